"""Small dense linear-algebra kernel.

Matrices are plain 2-D ``float64`` numpy arrays (row-major, C order).
Vectors are carried as one-column matrices wherever they enter a product.
"""

from __future__ import annotations

import numpy as np

SVD_MAX_SWEEPS = 100
SVD_OFF_TOL = 1e-14


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        desc = " and ".join(f"{s[0]}x{s[1]}" if len(s) == 2 else str(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class SvdConvergenceError(RuntimeError):
    pass


def as_matrix(x) -> np.ndarray:
    """Coerce *x* to a C-ordered 2-D float64 array (1-D input becomes a column)."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(-1, 1)
    elif m.ndim != 2:
        raise ShapeError("as_matrix", m.shape)
    return np.ascontiguousarray(m)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def frobenius_norm(m: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(m))))


def column_norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.square(m), axis=0))


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the same seed always yields the same stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive *n* independent child streams (one per layer, run, ...)."""
    return rng.spawn(n)


def kaiming_uniform(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform on +-sqrt(6 / fan_in) with fan_in = cols."""
    if rows < 1 or cols < 1:
        raise ShapeError("kaiming_uniform", (rows, cols))
    bound = np.sqrt(6.0 / cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint column pairings covering every pair once per sweep (circle method)."""
    m = n + (n % 2)
    idx = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(idx[i], idx[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p), max(p)) for p in pairs if max(p) < n]
        if pairs:
            rounds.append((np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])))
        idx = [idx[0], idx[-1], *idx[1:-1]]
    return rounds


def _rotate_pairs(cols: np.ndarray, p: np.ndarray, q: np.ndarray, floor: float) -> None:
    """Apply one Jacobi rotation to each (p[k], q[k]) row pair, all pairs disjoint."""
    cp, cq = cols[p], cols[q]
    alpha = np.einsum("ij,ij->i", cp, cp)
    beta = np.einsum("ij,ij->i", cq, cq)
    gamma = np.einsum("ij,ij->i", cp, cq)
    act = (alpha > floor) & (beta > floor) & (gamma != 0.0)
    if not np.any(act):
        return
    g = np.where(act, gamma, 1.0)
    zeta = (beta - alpha) / (2.0 * g)
    t = np.copysign(1.0, zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
    t = np.where(act, t, 0.0)
    c = 1.0 / np.sqrt(1.0 + t * t)
    s = c * t
    cols[p] = c[:, None] * cp - s[:, None] * cq
    cols[q] = s[:, None] * cp + c[:, None] * cq


def svd_values(m: np.ndarray) -> np.ndarray:
    """Singular values in descending order via one-sided Jacobi.

    Rotations act on the columns of the taller orientation, so the work runs
    on the smaller Gram dimension. A sweep sequence stops once the
    off-diagonal Frobenius mass of the cosine-normalized Gram matrix drops
    below ``SVD_OFF_TOL``. Columns whose norm is below ``SVD_OFF_TOL`` of the
    total are treated as numerically null and left alone.
    """
    a = np.array(m, dtype=np.float64, copy=True)
    if a.ndim != 2:
        raise ShapeError("svd_values", a.shape)
    if a.shape[1] > a.shape[0]:
        a = a.T
    n = a.shape[1]
    if n > 512:
        raise ShapeError("svd_values", np.shape(m))
    # columns stored as rows for contiguous access
    cols = np.ascontiguousarray(a.T)
    scale = frobenius_norm(cols)
    if scale == 0.0:
        return np.zeros(n)
    floor = (SVD_OFF_TOL * scale) ** 2
    for _ in range(SVD_MAX_SWEEPS):
        gram = cols @ cols.T
        diag = np.diag(gram).copy()
        live = diag > floor
        g = gram[np.ix_(live, live)]
        dl = diag[live]
        cos2 = np.square(g) / np.outer(dl, dl)
        np.fill_diagonal(cos2, 0.0)
        if np.sqrt(np.sum(cos2)) < SVD_OFF_TOL:
            break
        for left, right in _round_robin(n):
            _rotate_pairs(cols, left, right, floor)
    else:
        raise SvdConvergenceError(f"one-sided Jacobi did not converge in {SVD_MAX_SWEEPS} sweeps")
    values = np.sqrt(np.einsum("ij,ij->i", cols, cols))
    return np.sort(values)[::-1]


def numerical_rank(m: np.ndarray, rel_tol: float = 1e-10) -> int:
    if not 0.0 < rel_tol < 1.0:
        raise ValueError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    sv = svd_values(m)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.count_nonzero(sv > rel_tol * sv[0]))
