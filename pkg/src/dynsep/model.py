"""Band-split separation network built from dynamic-width layers.

Pipeline for a mixture spectrogram ``[B, bins, frames]``:

1. every band's real/imag bins are projected to an ``N``-dim embedding
   (one FC per band);
2. the first ``d`` of ``D`` depth units run at width ``w``; a unit is a
   dynamic layer over time for each band and, with ``dual_path``, a second
   dynamic layer across bands for each frame;
3. one FC per band maps the embedding to a complex mask, which multiplies
   the mixture.

The band FCs and mask FCs are shared by every subnetwork.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .dynamic_layer import (
    DynamicLayerParams,
    Linear,
    dynamic_layer_forward,
    init_dynamic_layer,
    init_linear,
    layer_macs_dims,
    layer_param_count_dims,
)
from .spectral import BandScheme, Spectrogram
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_features: int = 16  # N
    reweight_dim: int = 8  # H
    max_width: int = 4  # W
    max_depth: int = 4  # D
    rnn_hidden: int = 16  # R
    tac_hidden: int = 16
    n_bands: int = 8
    window: int = 256
    hop: int = 64
    sample_rate: int = 8000
    dual_path: bool = False
    bidirectional: bool = False
    tac: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("n_features", "reweight_dim", "max_width", "max_depth", "rnn_hidden", "tac_hidden", "n_bands"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")
        self.band_scheme  # validates window / band count

    @property
    def bins(self) -> int:
        return self.window // 2 + 1

    @property
    def band_scheme(self) -> BandScheme:
        return BandScheme.equal(self.bins, self.n_bands)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def frames_per_second(self) -> float:
        return self.sample_rate / self.hop

    def replace(self, **kw) -> ModelConfig:
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


DESK = ModelConfig()
PAPER = ModelConfig(
    n_features=64, reweight_dim=32, max_width=16, max_depth=12, rnn_hidden=64, tac_hidden=64,
    n_bands=32, window=2048, hop=512, sample_rate=44100, dual_path=True, bidirectional=True,
)


@dataclass
class FullModelParams:
    config: ModelConfig
    band_split: list[Linear]  # per band: 2*bw -> N
    layers: list[list[DynamicLayerParams]]  # per depth unit: [seq] or [seq, band]
    mask: list[Linear]  # per band: N -> 2*bw

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for b, lin in enumerate(self.band_split):
            yield from lin.named_parameters(f"band_split.{b}")
        for d, unit in enumerate(self.layers):
            for name, layer in zip(("seq", "band"), unit):
                yield from layer.named_parameters(f"layers.{d}.{name}")
        for b, lin in enumerate(self.mask):
            yield from lin.named_parameters(f"mask.{b}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def copy(self) -> FullModelParams:
        out = init_model(self.config, seed=0)
        for (_, dst), (_, src) in zip(out.named_parameters(), self.named_parameters()):
            dst.data = src.data.copy()
        return out


def init_model(config: ModelConfig, seed: int | np.random.Generator = 0) -> FullModelParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dt = config.np_dtype
    widths = config.band_scheme.widths
    band_split = [init_linear(rng, 2 * bw, config.n_features, dt) for bw in widths]
    layers = []
    for _ in range(config.max_depth):
        unit = []
        for _ in range(2 if config.dual_path else 1):
            unit.append(
                init_dynamic_layer(
                    rng, config.n_features, config.reweight_dim, config.max_width, config.rnn_hidden,
                    config.tac_hidden, bidirectional=config.bidirectional, tac=config.tac, dtype=dt,
                )
            )
        layers.append(unit)
    mask = [init_linear(rng, config.n_features, 2 * bw, dt) for bw in widths]
    return FullModelParams(config, band_split, layers, mask)


def check_subnet(config: ModelConfig, w: int, d: int) -> None:
    if not (1 <= w <= config.max_width and 1 <= d <= config.max_depth):
        raise ValueError(
            f"subnetwork (w={w}, d={d}) out of range: w in [1, {config.max_width}], d in [1, {config.max_depth}]"
        )


def _const(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def forward_tensors(params: FullModelParams, re, im, w: int, d: int) -> tuple[Tensor, Tensor]:
    """Graph-building forward on ``[B, bins, frames]`` inputs; returns masked (re, im)."""
    cfg = params.config
    check_subnet(cfg, w, d)
    re, im = _const(re, cfg.np_dtype), _const(im, cfg.np_dtype)
    if re.ndim != 3 or re.shape[1] != cfg.bins:
        raise ValueError(f"expected spectrogram [B, {cfg.bins}, frames], got {re.shape}")
    b_, _, t_ = re.shape
    n = cfg.n_features
    scheme = cfg.band_scheme
    k = len(scheme)

    xr = T.transpose(re, (0, 2, 1))  # [B, T, F]
    xi = T.transpose(im, (0, 2, 1))
    embs = []
    for lin, (lo, hi) in zip(params.band_split, scheme.ranges):
        inp = T.concat([T.slice_axis(xr, -1, lo, hi), T.slice_axis(xi, -1, lo, hi)], axis=-1)
        embs.append(T.reshape(lin(inp), (b_, 1, t_, n)))
    z = T.concat(embs, axis=1)  # [B, K, T, N]

    for unit in params.layers[:d]:
        z = T.reshape(dynamic_layer_forward(T.reshape(z, (b_ * k, t_, n)), unit[0], w), (b_, k, t_, n))
        if len(unit) > 1:
            zt = T.reshape(T.transpose(z, (0, 2, 1, 3)), (b_ * t_, k, n))
            zt = dynamic_layer_forward(zt, unit[1], w)
            z = T.transpose(T.reshape(zt, (b_, t_, k, n)), (0, 2, 1, 3))

    mrs, mis = [], []
    for j, (lin, bw) in enumerate(zip(params.mask, scheme.widths)):
        m = lin(T.reshape(T.slice_axis(z, 1, j, j + 1), (b_, t_, n)))  # [B, T, 2 bw]
        mrs.append(T.slice_axis(m, -1, 0, bw))
        mis.append(T.slice_axis(m, -1, bw, 2 * bw))
    mr, mi = T.concat(mrs, axis=-1), T.concat(mis, axis=-1)
    out_r = T.sub(T.mul(mr, xr), T.mul(mi, xi))
    out_i = T.add(T.mul(mr, xi), T.mul(mi, xr))
    return T.transpose(out_r, (0, 2, 1)), T.transpose(out_i, (0, 2, 1))


def model_forward(mixture: Spectrogram, params: FullModelParams, w: int, d: int) -> Spectrogram:
    """Separate ``mixture`` (``[..., bins, frames]``) with subnetwork ``(w, d)``."""
    cfg = params.config
    if mixture.bins != cfg.bins:
        raise ValueError(f"spectrogram has {mixture.bins} bins, model expects {cfg.bins}")
    lead = mixture.shape[:-2]
    flat = (-1,) + mixture.shape[-2:]
    re, im = forward_tensors(params, mixture.re.reshape(flat), mixture.im.reshape(flat), w, d)
    return Spectrogram(re.data.reshape(lead + re.shape[1:]), im.data.reshape(lead + im.shape[1:]))


def model_costs(config: ModelConfig, w: int, d: int, frames: float) -> tuple[int, float]:
    """Analytic (parameter count, MACs) of subnetwork ``(w, d)`` over ``frames`` frames of one channel."""
    check_subnet(config, w, d)
    widths = config.band_scheme.widths
    n, k = config.n_features, len(widths)
    n_dirs = 2 if config.bidirectional else 1
    band_params = sum(2 * bw * n + n for bw in widths) + sum(n * 2 * bw + 2 * bw for bw in widths)
    band_macs = frames * sum(2 * bw * n + n * 2 * bw for bw in widths)

    dims = (n, config.reweight_dim, config.rnn_hidden, n_dirs, config.tac_hidden, w)
    unit_params = layer_param_count_dims(*dims, tac=config.tac)
    unit_macs = k * layer_macs_dims(*dims, frames, tac=config.tac)
    if config.dual_path:
        unit_params *= 2
        unit_macs += frames * layer_macs_dims(*dims, k, tac=config.tac)
    return band_params + d * unit_params, band_macs + d * unit_macs
