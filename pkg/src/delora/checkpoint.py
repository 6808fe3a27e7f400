"""Binary container for layers and adapter state, plus a JSON sidecar.

Byte layout (all integers and floats little-endian)::

    magic      4 bytes   b"DLRC"
    version    u32       1
    kind       u32       0 = checkpoint (layers with adapters), 1 = layers only
    count      u32       number of entries
    entry * count:
        tag    u32       index into ALL_VARIANTS, 0xFFFFFFFF for no adapter
        rank   u32
        alpha  f64
        eps    f64
        n_arr  u32
        array * n_arr:
            name_len u16, name (utf-8), ndim u8, dims u32 * ndim,
            data f64 * prod(dims), row-major

Array names are ``layer.w_bar``, ``layer.bias``, ``layer.w_init_offset``,
``param.<name>`` and ``buffer.<name>``. The sidecar ``<path>.json`` repeats
the hyperparameters in readable form; loading only needs the binary file.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .adapters import ALL_VARIANTS, Adapter, PretrainedLayer

MAGIC = b"DLRC"
VERSION = 1
KIND_CHECKPOINT = 0
KIND_LAYERS = 1
NO_ADAPTER = 0xFFFFFFFF


class CheckpointError(ValueError):
    pass


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _write_array(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes(order="C"))


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("truncated container")
    return b


def _read_array(buf: io.BytesIO) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", _read_exact(buf, 2))
    name = _read_exact(buf, nlen).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
    dims = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
    count = int(np.prod(dims)) if ndim else 1
    data = np.frombuffer(_read_exact(buf, 8 * count), dtype="<f8").astype(np.float64)
    return name, data.reshape(dims)


def encode(layers: list[PretrainedLayer], adapters: list[Adapter | None] | None = None) -> bytes:
    kind = KIND_LAYERS if adapters is None else KIND_CHECKPOINT
    if adapters is None:
        adapters = [None] * len(layers)
    if len(adapters) != len(layers):
        raise CheckpointError(f"{len(layers)} layers but {len(adapters)} adapters")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", VERSION, kind, len(layers)))
    for layer, ad in zip(layers, adapters):
        arrays = [
            ("layer.w_bar", layer.w_bar),
            ("layer.bias", layer.bias),
            ("layer.w_init_offset", layer.w_init_offset),
        ]
        if ad is None:
            buf.write(struct.pack("<IIdd", NO_ADAPTER, 0, 0.0, 0.0))
        else:
            tag = ALL_VARIANTS.index(ad.variant)
            buf.write(struct.pack("<IIdd", tag, ad.rank, ad.alpha, ad.eps))
            arrays += [(f"param.{k}", v) for k, v in ad.params.items()]
            arrays += [(f"buffer.{k}", v) for k, v in ad.buffers.items()]
        buf.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            _write_array(buf, name, arr)
    return buf.getvalue()


def decode(data: bytes) -> tuple[int, list[PretrainedLayer], list[Adapter | None]]:
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != MAGIC:
        raise CheckpointError("bad magic; not a container file")
    version, kind, count = struct.unpack("<III", _read_exact(buf, 12))
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    layers: list[PretrainedLayer] = []
    adapters: list[Adapter | None] = []
    for _ in range(count):
        tag, rank, alpha, eps = struct.unpack("<IIdd", _read_exact(buf, 24))
        (n_arr,) = struct.unpack("<I", _read_exact(buf, 4))
        arrays = dict(_read_array(buf) for _ in range(n_arr))
        try:
            layer = PretrainedLayer.create(
                arrays["layer.w_bar"], arrays["layer.bias"], arrays["layer.w_init_offset"]
            )
        except KeyError as e:
            raise CheckpointError(f"entry is missing {e.args[0]}") from None
        layers.append(layer)
        if tag == NO_ADAPTER:
            adapters.append(None)
            continue
        if tag >= len(ALL_VARIANTS):
            raise CheckpointError(f"unknown variant tag {tag}")
        variant = ALL_VARIANTS[tag]
        params = {k[6:]: v for k, v in arrays.items() if k.startswith("param.")}
        buffers = {k[7:]: v for k, v in arrays.items() if k.startswith("buffer.")}
        for v in buffers.values():
            v.setflags(write=False)
        ad = Adapter(variant, rank, params, buffers, alpha=alpha, eps=eps)
        if set(params) != set(ad.param_names):
            raise CheckpointError(f"{variant} entry has parameters {sorted(params)}")
        ad.params = {k: params[k] for k in ad.param_names}
        adapters.append(ad)
    if buf.read(1):
        raise CheckpointError("trailing bytes after last entry")
    return kind, layers, adapters


def sidecar(layers: list[PretrainedLayer], adapters: list[Adapter | None] | None, extra: dict | None = None) -> dict:
    entries = []
    for i, layer in enumerate(layers):
        ad = None if adapters is None else adapters[i]
        entry: dict = {"d": layer.d, "f": layer.f, "frob_w_bar": layer.frob_w_bar}
        if ad is not None:
            entry.update(
                variant=str(ad.variant),
                rank=ad.rank,
                alpha=ad.alpha,
                eps=ad.eps,
                params={k: list(v.shape) for k, v in ad.params.items()},
            )
            if "lambda" in ad.params:
                entry["lambda"] = ad.lam
        entries.append(entry)
    doc = {
        "format": "delora-container",
        "version": VERSION,
        "kind": "layers" if adapters is None else "checkpoint",
        "entries": entries,
    }
    if extra:
        doc["hyperparameters"] = extra
    return doc


def save(path: str | Path, layers: list[PretrainedLayer], adapters: list[Adapter | None] | None = None,
         extra: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(encode(layers, adapters))
    text = json.dumps(sidecar(layers, adapters, extra), indent=2, sort_keys=True) + "\n"
    sidecar_path(path).write_text(text, encoding="utf-8", newline="\n")
    return path


def load(path: str | Path) -> tuple[list[PretrainedLayer], list[Adapter | None]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no container at {path}")
    _, layers, adapters = decode(path.read_bytes())
    return layers, adapters
