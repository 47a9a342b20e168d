"""Versioned binary checkpoint container.

Byte layout, all integers little-endian::

    magic        8 bytes   b"BNNCKPT1"
    version      u32       1
    grammar      u32 length + UTF-8 network grammar string
    metadata     u32 length + UTF-8 JSON (sorted keys)
    n_records    u32
    record *     u16 name length, name (UTF-8),
                 u8 kind, u8 ndim, ndim * u32 dims,
                 payload: float32 for kinds 0-2 and 4, float64 for kind 3

Record kinds: 0 parameter, 1 BN moving mean, 2 BN moving variance,
3 BN eps (scalar), 4 optimizer state.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError
from ..models import Network, NetworkSpec, build_network

MAGIC = b"BNNCKPT1"
VERSION = 1
PARAM, BN_MEAN, BN_VAR, BN_EPS, OPTIM = range(5)


@dataclass
class Checkpoint:
    spec: NetworkSpec
    meta: dict
    params: dict[str, np.ndarray]
    bn_mean: dict[str, np.ndarray]
    bn_var: dict[str, np.ndarray]
    bn_eps: dict[str, float]
    optim: dict[str, np.ndarray] = field(default_factory=dict)

    def build(self, dtype=np.float32) -> Network:
        """Instantiate the network in eval mode with stored weights."""
        net = build_network(self.spec, dtype=dtype,
                            bn_momentum=float(self.meta.get("bn_momentum", 0.1)),
                            tap=self.meta.get("tap", "post_pool"),
                            windowed_weight_ste=bool(self.meta.get("windowed_weight_ste", False)))
        params = dict(net.named_parameters())
        if set(params) != set(self.params):
            raise DataError("checkpoint parameters do not match the network grammar")
        for name, p in params.items():
            if p.shape != self.params[name].shape:
                raise DataError(f"checkpoint parameter {name} has shape {self.params[name].shape}, "
                                f"expected {p.shape}")
            p.values[...] = self.params[name]
        for name, st in net.named_bn_states():
            st.set(self.bn_mean[name], self.bn_var[name])
            st.eps = self.bn_eps[name]
        return net.eval()


def from_network(net: Network, meta: dict | None = None, optim: dict | None = None) -> Checkpoint:
    states = dict(net.named_bn_states())
    return Checkpoint(
        spec=net.spec,
        meta=dict(meta or {}),
        params={n: p.values.astype(np.float32) for n, p in net.named_parameters()},
        bn_mean={n: s.mean.astype(np.float32) for n, s in states.items()},
        bn_var={n: s.var.astype(np.float32) for n, s in states.items()},
        bn_eps={n: float(s.eps) for n, s in states.items()},
        optim={k: np.asarray(v) for k, v in (optim or {}).items()},
    )


def _record(name: str, kind: int, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8" if kind == BN_EPS else "<f4")
    enc = name.encode()
    head = struct.pack("<H", len(enc)) + enc + struct.pack("<BB", kind, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def dumps(ck: Checkpoint) -> bytes:
    grammar = ck.spec.to_string().encode()
    meta = json.dumps(ck.meta, sort_keys=True).encode()
    records = []
    for name in sorted(ck.params):
        records.append(_record(name, PARAM, ck.params[name]))
    for name in sorted(ck.bn_mean):
        records.append(_record(name, BN_MEAN, ck.bn_mean[name]))
        records.append(_record(name, BN_VAR, ck.bn_var[name]))
        records.append(_record(name, BN_EPS, np.array(ck.bn_eps[name])))
    for name in sorted(ck.optim):
        records.append(_record(name, OPTIM, ck.optim[name]))
    out = [MAGIC, struct.pack("<I", VERSION),
           struct.pack("<I", len(grammar)), grammar,
           struct.pack("<I", len(meta)), meta,
           struct.pack("<I", len(records))]
    return b"".join(out + records)


class _Reader:
    def __init__(self, raw: bytes, src: str):
        self.raw, self.pos, self.src = raw, 0, src

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DataError(f"{self.src}: truncated at byte offset {self.pos} (need {n} more bytes)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(raw: bytes, src: str = "<bytes>") -> Checkpoint:
    r = _Reader(raw, src)
    if r.take(8) != MAGIC:
        raise DataError(f"{src}: bad checkpoint magic at byte offset 0")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise DataError(f"{src}: unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    spec = NetworkSpec.parse(r.take(n).decode())
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode())
    (count,) = r.unpack("<I")
    ck = Checkpoint(spec, meta, {}, {}, {}, {}, {})
    targets = {PARAM: ck.params, BN_MEAN: ck.bn_mean, BN_VAR: ck.bn_var, OPTIM: ck.optim}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        kind, ndim = r.unpack("<BB")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        dt = np.dtype("<f8" if kind == BN_EPS else "<f4")
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(size * dt.itemsize), dtype=dt).reshape(dims).copy()
        if kind == BN_EPS:
            ck.bn_eps[name] = float(arr)
        elif kind in targets:
            targets[kind][name] = arr
        else:
            raise DataError(f"{src}: unknown record kind {kind} at byte offset {r.pos}")
    if r.pos != len(raw):
        raise DataError(f"{src}: {len(raw) - r.pos} trailing bytes at byte offset {r.pos}")
    return ck


def save(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ck))


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    return loads(raw, str(path))
