"""Binary model files (``.lcnm``) and solver checkpoints.

Layout, all integers little-endian::

    b"LCNM"  u32 version
    payload:
        u32 header length, UTF-8 JSON header (arch, overrides, preprocessing)
        u32 block count
        per block: u16 name length, name, u8 ndim, u32 dims..., float32 data
    u32 CRC32 of payload
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .zoo import NetworkModel, arch_spec, build_from_spec

MAGIC = b"LCNM"
VERSION = 1

DEFAULT_PREPROCESS = {
    "pixel_scale": 1.0 / 255.0,
    "mean_subtraction": False,
    "train_crop": "random 128x128 of 144x144, mirror p=0.5",
    "eval_crop": "aligned 128x128 input (center 128x128 when given 144x144)",
}


class ModelFormatError(ValueError):
    pass


def _header(model: NetworkModel, preprocess: dict | None) -> dict:
    dropout = next((layer.ratio for layer in model.layers if layer.kind == "dropout"), 0.0)
    return {
        "arch": model.spec.name,
        "overrides": model.spec.overrides,
        "dropout_ratio": dropout,
        "preprocess": preprocess if preprocess is not None else getattr(
            model, "preprocess", DEFAULT_PREPROCESS),
    }


def dumps(model: NetworkModel, preprocess: dict | None = None) -> bytes:
    header = json.dumps(_header(model, preprocess), sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", len(header)), header]
    params = model.params()
    parts.append(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<B", p.value.ndim) + struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        parts.append(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    payload = b"".join(parts)
    return MAGIC + struct.pack("<I", VERSION) + payload + struct.pack("<I", zlib.crc32(payload))


def save(model: NetworkModel, path, preprocess: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, preprocess))


def loads(data: bytes) -> NetworkModel:
    if len(data) < 12 or data[:4] != MAGIC:
        raise ModelFormatError("bad magic: not an LCNM model file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ModelFormatError(f"unknown format version {version} (supported: {VERSION})")
    payload, (crc,) = data[8:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise ModelFormatError("checksum mismatch: file is corrupted or truncated")

    view = memoryview(payload)
    pos = 0

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, view, pos)
        pos += struct.calcsize(fmt)
        return vals

    (hlen,) = take("<I")
    header = json.loads(bytes(view[pos:pos + hlen]).decode("utf-8"))
    pos += hlen
    o = header["overrides"]
    spec = arch_spec(header["arch"], o["num_classes"], o["width"], o["activation"], o["nin_mfm"])
    model = build_from_spec(spec, header.get("dropout_ratio", 0.7))
    model.preprocess = header.get("preprocess", DEFAULT_PREPROCESS)

    expected = model.param_dict()
    seen = set()
    (count,) = take("<I")
    for _ in range(count):
        (nlen,) = take("<H")
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape)) * 4
        if name not in expected:
            raise ModelFormatError(f"unexpected parameter block {name!r} for architecture {spec.name}")
        if name in seen:
            raise ModelFormatError(f"duplicate parameter block {name!r}")
        param = expected[name]
        if tuple(shape) != param.value.shape:
            raise ModelFormatError(
                f"block {name!r} has shape {tuple(shape)}, architecture expects {param.value.shape}")
        param.value = np.frombuffer(view[pos:pos + size], dtype="<f4").reshape(shape).astype(np.float32)
        param.grad = np.zeros_like(param.value)
        param.momentum = np.zeros_like(param.value)
        pos += size
        seen.add(name)
    missing = sorted(set(expected) - seen)
    if missing:
        raise ModelFormatError(f"missing parameter blocks: {', '.join(missing)}")
    if pos != len(payload):
        raise ModelFormatError(f"{len(payload) - pos} trailing bytes after last block")
    return model


def load(path) -> NetworkModel:
    return loads(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# solver checkpoints: model file + "<path>.solver.npz" sidecar
# ---------------------------------------------------------------------------

def solver_path(path) -> Path:
    return Path(str(path) + ".solver.npz")


def save_checkpoint(path, model: NetworkModel, iteration: int, rng: np.random.Generator,
                    log_rows=None) -> None:
    save(model, path)
    meta = {"iteration": int(iteration), "rng": rng.bit_generator.state,
            "log": [list(r) for r in (log_rows or [])]}
    arrays = {f"m:{p.name}": p.momentum for p in model.params()}
    with open(solver_path(path), "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    """Returns (model, iteration, rng, log_rows) with momentum buffers restored."""
    model = load(path)
    with np.load(solver_path(path)) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        for p in model.params():
            p.momentum = z[f"m:{p.name}"].astype(p.value.dtype)
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = meta["rng"]
    return model, meta["iteration"], rng, [tuple(r) for r in meta["log"]]
