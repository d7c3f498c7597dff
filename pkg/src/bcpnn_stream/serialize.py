"""Versioned little-endian model files.

Layout::

    magic      8 bytes  b"BCPNNMDL"
    version    u32
    header     u32 length + UTF-8 JSON (config, schedules, rng state)
    n_arrays   u32
    per array: u16 name length, name, 2-byte dtype code, u8 ndim,
               ndim x u64 shape, raw little-endian data
    digest     32 bytes sha256 of everything before it
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from bcpnn_stream.config import ModelConfig
from bcpnn_stream.errors import DataFormatError, ModelVersionError, TruncatedFileError
from bcpnn_stream.learning import TraceSchedule
from bcpnn_stream.model import BCPNNModel, Population, Projection

MAGIC = b"BCPNNMDL"
FORMAT_VERSION = 1

_DTYPES = {b"f8": "<f8", b"f4": "<f4", b"i8": "<i8"}
_CODES = {np.dtype("<f8"): b"f8", np.dtype("<f4"): b"f4", np.dtype("<i8"): b"i8"}


def _arrays(model: BCPNNModel) -> dict:
    out = {}
    for name in ("inp", "hid", "out"):
        pop = getattr(model, name)
        out[f"{name}.act"] = pop.act
        out[f"{name}.p"] = pop.p
        out[f"{name}.bias"] = pop.bias
    for name in ("ih", "ho"):
        proj = getattr(model, name)
        out[f"{name}.rf"] = proj.rf
        out[f"{name}.p_joint"] = proj.p_joint
        out[f"{name}.w"] = proj.w
        if proj.pre_trace is not None:
            out[f"{name}.pre_trace"] = proj.pre_trace
        if proj.silent is not None:
            out[f"{name}.silent"] = proj.silent
    return out


def dumps_model(model: BCPNNModel) -> bytes:
    header = {
        "config": model.cfg.to_dict(),
        "sched_unsup": model.sched_unsup.t,
        "sched_sup": model.sched_sup.t,
        "rng": model.rng.bit_generator.state,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(hb)), hb]
    arrays = _arrays(model)
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.asarray(arr).dtype.newbyteorder("<"))
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + _CODES[arr.dtype] + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, raw, source):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"{self.source}: model file truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads_model(raw: bytes, source: str = "<bytes>") -> BCPNNModel:
    if len(raw) < len(MAGIC) + 4 or raw[:len(MAGIC)] != MAGIC:
        raise ModelVersionError(f"{source}: not a model file (bad magic)")
    (version,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"{source}: model format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < 32 or hashlib.sha256(raw[:-32]).digest() != raw[-32:]:
        raise DataFormatError(f"{source}: checksum mismatch (corrupted or truncated model file)")
    r = _Reader(raw[:-32], source)
    r.take(len(MAGIC) + 4)
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen))
    (n,) = r.unpack("<I")
    arrays = {}
    for _ in range(n):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code = r.take(2)
        if code not in _DTYPES:
            raise DataFormatError(f"{source}: unknown dtype code {code!r} for {name}")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        dtype = np.dtype(_DTYPES[code])
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype).reshape(shape).astype(
            dtype.newbyteorder("=")
        )
    if r.pos != len(r.raw):
        raise DataFormatError(f"{source}: trailing bytes after the last array")
    return _assemble(header, arrays, source)


def _assemble(header, arrays, source):
    try:
        cfg = ModelConfig(**header["config"])
        pops = {}
        for name in ("inp", "hid", "out"):
            p = arrays[f"{name}.p"]
            n_mc = {"inp": cfg.input_mc, "hid": cfg.hidden_mc, "out": cfg.n_classes}[name]
            pops[name] = Population(len(p) // n_mc, n_mc, arrays[f"{name}.act"], p, arrays[f"{name}.bias"])
        projs = {}
        for name, pre, post, chunk in (("ih", "inp", "hid", cfg.packet_ih), ("ho", "hid", "out", cfg.packet_ho)):
            rf = arrays[f"{name}.rf"]
            projs[name] = Projection(
                pre_hc=pops[pre].n_hc,
                pre_mc=pops[pre].n_mc,
                post_hc=pops[post].n_hc,
                post_mc=pops[post].n_mc,
                nact=rf.shape[1],
                chunk=chunk,
                rf=rf,
                p_joint=arrays[f"{name}.p_joint"],
                w=arrays[f"{name}.w"],
                pre_trace=arrays.get(f"{name}.pre_trace"),
                silent=arrays.get(f"{name}.silent"),
            )
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng"]
        return BCPNNModel(
            cfg=cfg,
            inp=pops["inp"],
            hid=pops["hid"],
            out=pops["out"],
            ih=projs["ih"],
            ho=projs["ho"],
            rng=rng,
            sched_unsup=TraceSchedule(header["sched_unsup"], cfg.alpha_min),
            sched_sup=TraceSchedule(header["sched_sup"], cfg.alpha_min),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{source}: inconsistent model file ({exc})") from exc


def atomic_write(path, data: bytes) -> Path:
    """Write via a temporary file in the same directory, so no partial file survives."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def save_model(model: BCPNNModel, path) -> Path:
    return atomic_write(path, dumps_model(model))


def load_model(path) -> BCPNNModel:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read model {path}: {exc}") from exc
    return loads_model(raw, source=str(path))


def state_digest(model: BCPNNModel) -> str:
    """sha256 over every state array, for bitwise model comparisons."""
    h = hashlib.sha256()
    for name, arr in _arrays(model).items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(struct.pack("<2q", model.sched_unsup.t, model.sched_sup.t))
    return h.hexdigest()
