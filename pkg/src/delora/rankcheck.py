"""Numerical rank of reflection-based and low-rank updates on random weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import PretrainedLayer, Variant, ether_plus_two_sided_delta, init_adapter, projector_sum, raw_update
from .grads import randomize
from .numkit import numerical_rank


@dataclass
class RankCase:
    name: str
    bound: int
    exact: bool
    ranks: list[int]

    @property
    def ok(self) -> bool:
        if self.exact:
            return all(r == self.bound for r in self.ranks)
        return all(r <= self.bound for r in self.ranks)

    def row(self) -> list:
        rel = "==" if self.exact else "<="
        return [self.name, f"{rel}{self.bound}", min(self.ranks), max(self.ranks), len(self.ranks),
                "pass" if self.ok else "fail"]


HEADER = ["case", "bound", "min_rank", "max_rank", "trials", "verdict"]


def _unit(rng, n):
    u = rng.standard_normal((n, 1))
    return u / np.linalg.norm(u)


def ether_delta(w, u):
    return -2.0 * projector_sum(u) @ w


def ether_plus_delta(w, u, v):
    return (projector_sum(v) - projector_sum(u)) @ w


def run_rank_checks(d: int, f: int, rank: int, trials: int, rel_tol: float,
                    rng: np.random.Generator) -> list[RankCase]:
    """ETHER (exactly 1), one-sided ETHER+ (<= 2), two-sided ETHER+ (<= 4),
    the degenerate u = v case (0), and the rank-r adapter families (<= r)."""
    even = rank + rank % 2
    cases = {
        "ether": RankCase("ether", 1, True, []),
        "ether_plus_one_sided": RankCase("ether_plus_one_sided", 2, False, []),
        "ether_plus_two_sided": RankCase("ether_plus_two_sided", 4, False, []),
        "ether_plus_u_eq_v": RankCase("ether_plus_u_eq_v", 0, True, []),
        "delora": RankCase("delora", rank, False, []),
        "ether_plus_high_rank": RankCase("ether_plus_high_rank", even, False, []),
        "ether_plus_relaxed": RankCase("ether_plus_relaxed", even, False, []),
    }
    for _ in range(trials):
        w = rng.standard_normal((d, f))
        u, v = _unit(rng, d), _unit(rng, d)
        cases["ether"].ranks.append(numerical_rank(ether_delta(w, u), rel_tol))
        cases["ether_plus_one_sided"].ranks.append(numerical_rank(ether_plus_delta(w, u, v), rel_tol))
        two = ether_plus_two_sided_delta(w, u, v, _unit(rng, f), _unit(rng, f))
        cases["ether_plus_two_sided"].ranks.append(numerical_rank(two, rel_tol))
        cases["ether_plus_u_eq_v"].ranks.append(numerical_rank(ether_plus_delta(w, u, u), rel_tol))
        layer = PretrainedLayer.create(w)
        for name, variant, r in (
            ("delora", Variant.DELORA, rank),
            ("ether_plus_high_rank", Variant.ETHER_PLUS_HIGH_RANK, even),
            ("ether_plus_relaxed", Variant.ETHER_PLUS_RELAXED, even),
        ):
            ad, lay = init_adapter(variant, layer, r, 1.0, None, rng)
            ad = randomize(ad, rng)
            cases[name].ranks.append(numerical_rank(raw_update(ad, lay), rel_tol))
    return list(cases.values())
