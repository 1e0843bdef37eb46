"""Subnetwork cost tables, budget-driven selection, extraction and checkpoints.

Checkpoint layout (all integers little-endian)::

    b"DWDN"                      magic
    u32  version                 currently 1
    u32  n, n bytes              model config as UTF-8 JSON
    u32  array count
    per array:
      u16 n, n bytes             UTF-8 parameter name
      u8  dtype code             1 = float32
      u8  ndim, ndim x u32       shape
      u64 offset, u64 nbytes     location inside the payload
    u64  payload length, payload raw array bytes in directory order
    u32  CRC-32 of every preceding byte

Arrays are always stored as float32; float64 weights are narrowed on save.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamic_layer import DynamicLayerParams, GRUParams, Linear, TACParams
from .model import FullModelParams, ModelConfig, check_subnet, init_model, model_costs
from .tensor import Tensor

MAGIC = b"DWDN"
VERSION = 1
_DTYPES = {1: np.dtype("<f4")}


@dataclass(frozen=True, order=True)
class SubnetConfig:
    w: int
    d: int


@dataclass
class CostRow:
    w: int
    d: int
    params: int
    macs_per_s: float
    snr_db: float | None = None


@dataclass
class CostTable:
    rows: list[CostRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def lookup(self, w: int, d: int) -> CostRow:
        for r in self.rows:
            if (r.w, r.d) == (w, d):
                return r
        raise KeyError((w, d))

    def check_monotone(self) -> None:
        cells = {(r.w, r.d): r for r in self.rows}
        for (w, d), r in cells.items():
            for nb in ((w + 1, d), (w, d + 1)):
                if nb in cells:
                    o = cells[nb]
                    if o.params < r.params or o.macs_per_s < r.macs_per_s:
                        raise ValueError(f"cost table not monotone between {(w, d)} and {nb}")

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["w", "d", "params", "macs_per_s", "snr_db"])
        for r in self.rows:
            wr.writerow([r.w, r.d, r.params, repr(float(r.macs_per_s)), "" if r.snr_db is None else f"{r.snr_db:.4f}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> CostTable:
        rows = []
        with open(path, newline="") as f:
            for rec in csv.DictReader(f):
                snr = rec.get("snr_db") or None
                rows.append(
                    CostRow(int(rec["w"]), int(rec["d"]), int(rec["params"]), float(rec["macs_per_s"]),
                            None if snr is None else float(snr))
                )
        return cls(rows)


def enumerate_costs(config: ModelConfig, frames_per_second: float | None = None) -> CostTable:
    """Costs of every ``(w, d)`` subnetwork; MACs are per second of one audio channel."""
    fps = config.frames_per_second if frames_per_second is None else frames_per_second
    rows = []
    for d in range(1, config.max_depth + 1):
        for w in range(1, config.max_width + 1):
            params, macs = model_costs(config, w, d, fps)
            rows.append(CostRow(w, d, params, macs))
    table = CostTable(rows)
    table.check_monotone()
    return table


class BudgetTooSmall(ValueError):
    def __init__(self, min_params: int, min_macs: float):
        self.min_params = min_params
        self.min_macs = min_macs
        super().__init__(
            f"no subnetwork fits the budget; smallest needs {min_params} params and {min_macs:.6g} MACs/s"
        )


def select_config(
    table: CostTable,
    max_macs: float | None = None,
    max_params: float | None = None,
    prefer: str = "depth",
) -> SubnetConfig:
    """Largest feasible subnetwork under inclusive budgets.

    ``prefer="depth"`` picks the deepest feasible config, then the widest
    among those; ``prefer="width"`` swaps the two keys.
    """
    if max_macs is None and max_params is None:
        raise ValueError("select_config needs max_macs and/or max_params")
    if prefer not in ("depth", "width"):
        raise ValueError(f"prefer must be 'depth' or 'width', got {prefer!r}")
    feasible = [
        r for r in table.rows
        if (max_macs is None or r.macs_per_s <= max_macs) and (max_params is None or r.params <= max_params)
    ]
    if not feasible:
        raise BudgetTooSmall(min(r.params for r in table.rows), min(r.macs_per_s for r in table.rows))
    key = (lambda r: (r.d, r.w)) if prefer == "depth" else (lambda r: (r.w, r.d))
    best = max(feasible, key=key)
    return SubnetConfig(best.w, best.d)


def _clone(t: Tensor) -> Tensor:
    return Tensor(t.data.copy(), requires_grad=t.requires_grad)


def _clone_linear(lin: Linear) -> Linear:
    return Linear(_clone(lin.weight), _clone(lin.bias))


def extract_subnet(full: FullModelParams, sub: SubnetConfig) -> FullModelParams:
    """Copy of the band modules, the first ``d`` depth units and their first ``w`` experts."""
    check_subnet(full.config, sub.w, sub.d)
    layers = []
    for unit in full.layers[: sub.d]:
        new_unit = []
        for layer in unit:
            tac = None
            if layer.tac is not None:
                tac = TACParams(*(_clone_linear(getattr(layer.tac, k)) for k in ("fc1", "fc2", "fc3")))
            new_unit.append(
                DynamicLayerParams(
                    [GRUParams(*(_clone(getattr(c, k)) for k in ("w_ih", "w_hh", "b_ih", "b_hh"))) for c in layer.rnn],
                    [_clone_linear(e) for e in layer.experts[: sub.w]],
                    tac,
                    layer.n_features,
                    layer.reweight_dim,
                )
            )
        layers.append(new_unit)
    return FullModelParams(
        full.config.replace(max_width=sub.w, max_depth=sub.d),
        [_clone_linear(b) for b in full.band_split],
        layers,
        [_clone_linear(m) for m in full.mask],
    )


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def save_checkpoint(params: FullModelParams, path) -> None:
    # weights are stored as float32, so the stored config says so too
    config = json.dumps({**params.config.to_dict(), "dtype": "float32"}, sort_keys=True).encode("utf-8")
    directory = bytearray()
    payload = bytearray()
    named = list(params.named_parameters())
    for name, t in named:
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        raw = arr.tobytes()
        nb = name.encode("utf-8")
        directory += struct.pack("<H", len(nb)) + nb
        directory += struct.pack("<BB", 1, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        directory += struct.pack("<QQ", len(payload), len(raw))
        payload += raw
    body = bytearray(MAGIC)
    body += struct.pack("<I", VERSION)
    body += struct.pack("<I", len(config)) + config
    body += struct.pack("<I", len(named)) + directory
    body += struct.pack("<Q", len(payload)) + payload
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, dtype: str = "float32") -> FullModelParams:
    """Read a checkpoint. Weights come back as float32 unless ``dtype`` asks to widen."""
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a DWDN checkpoint")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{path}: CRC-32 mismatch")
    rd = _Reader(buf[:-4])
    rd.take(4)
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    (clen,) = rd.unpack("<I")
    try:
        cfg_dict = json.loads(rd.take(clen).decode("utf-8"))
        cfg_dict["dtype"] = dtype
        config = ModelConfig.from_dict(cfg_dict)
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: bad config block: {e}") from e
    (count,) = rd.unpack("<I")
    entries = []
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8")
        code, ndim = rd.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = rd.unpack(f"<{ndim}I") if ndim else ()
        off, nbytes = rd.unpack("<QQ")
        if nbytes != math.prod(shape) * _DTYPES[code].itemsize:
            raise ShapeMismatchError(f"{path}: {name} has {nbytes} bytes for shape {shape}")
        entries.append((name, _DTYPES[code], tuple(shape), off, nbytes))
    (plen,) = rd.unpack("<Q")
    payload = rd.take(plen)

    params = init_model(config, seed=0)
    expected = dict(params.named_parameters())
    if [e[0] for e in entries] != list(expected):
        missing = set(expected) - {e[0] for e in entries}
        extra = {e[0] for e in entries} - set(expected)
        raise ShapeMismatchError(f"{path}: parameter names disagree with config (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, dt, shape, off, nbytes in entries:
        t = expected[name]
        if t.shape != shape:
            raise ShapeMismatchError(f"{path}: {name} stored as {shape}, config implies {t.shape}")
        if off + nbytes > len(payload):
            raise CheckpointError(f"{path}: {name} runs past the payload")
        t.data = np.frombuffer(payload, dtype=dt, count=math.prod(shape), offset=off).reshape(shape).astype(config.np_dtype)
    return params
