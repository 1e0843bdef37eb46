"""Objectives, subnetwork sampling, optimisation and synthetic training data.

The training step follows the dual objective: one randomly sampled
``(w, d)`` per step plus the full ``(W, D)`` model, summed and backpropagated
once. Validation always scores the full model.
"""

from __future__ import annotations

import functools
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import signal as sps

from . import tensor as T
from .model import FullModelParams, check_subnet, forward_tensors
from .spectral import Spectrogram, istft, istft_tensor, read_wav, snr_db, stft
from .tensor import Tensor

log = logging.getLogger(__name__)

# every synthetic sample is a multiple of this, so mixing and unmixing are exact
_GRID = 2.0**-24


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class DataSpec:
    duration: float = 2.0
    sample_rate: int = 8000
    batch_size: int = 4
    channels: int = 1
    snr_range: tuple[float, float] = (-5.0, 5.0)
    wav_dir: str = ""  # empty: synthetic data; else a folder of <track>/mixture.wav + target.wav

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(x / _GRID) * _GRID


def _vocal_like(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    """Harmonic notes with vibrato and attack/release envelopes."""
    t = np.arange(n) / sr
    out = np.zeros(n)
    pos = 0
    while pos < n:
        dur = int(rng.uniform(0.25, 0.7) * sr)
        seg = slice(pos, min(pos + dur, n))
        m = seg.stop - seg.start
        if rng.random() < 0.8:
            f0 = rng.uniform(150.0, 400.0)
            rate, depth = rng.uniform(4.0, 7.0), rng.uniform(0.005, 0.02)
            inst = f0 * (1.0 + depth * np.sin(2 * np.pi * rate * t[seg] + rng.uniform(0, 2 * np.pi)))
            phase = 2 * np.pi * np.cumsum(inst) / sr
            tilt = rng.uniform(0.8, 1.5)
            note = np.zeros(m)
            for k in range(1, 12):
                if k * f0 * (1 + depth) > 0.45 * sr:
                    break
                note += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k**tilt
            att, rel = max(1, int(0.03 * sr)), max(1, int(0.06 * sr))
            env = np.ones(m)
            env[: min(att, m)] = np.linspace(0.0, 1.0, min(att, m))
            env[-min(rel, m) :] *= np.linspace(1.0, 0.0, min(rel, m))
            out[seg] = note * env * rng.uniform(0.5, 1.0)
        pos += dur
    if not np.any(out):
        out[:] = np.sin(2 * np.pi * 220.0 * t)
    return out


def _accompaniment_like(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    """Band-limited noise plus a low harmonic pad."""
    nyq = sr / 2
    lo = rng.uniform(80.0, 600.0)
    hi = min(lo * rng.uniform(2.0, 6.0), 0.9 * nyq)
    b, a = sps.butter(2, [lo / nyq, hi / nyq], btype="band")
    noise = sps.lfilter(b, a, rng.standard_normal(n))
    noise /= np.sqrt(np.mean(noise**2)) + 1e-12
    t = np.arange(n) / sr
    f0 = rng.uniform(55.0, 110.0)
    pad = sum(np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 7))
    pad /= np.sqrt(np.mean(pad**2))
    return rng.uniform(0.3, 1.0) * noise + rng.uniform(0.3, 1.0) * pad


def synth_sources(rng: np.random.Generator, spec: DataSpec) -> tuple[np.ndarray, np.ndarray]:
    """``(target, interferer)``, each ``[batch, channels, samples]``.

    Each item's interferer is scaled to a target-to-interferer ratio drawn
    uniformly from ``spec.snr_range``.
    """
    n, sr = spec.n_samples, spec.sample_rate
    tgt = np.zeros((spec.batch_size, spec.channels, n))
    itf = np.zeros_like(tgt)
    for b in range(spec.batch_size):
        snr = rng.uniform(*spec.snr_range)
        for c in range(spec.channels):
            v = _vocal_like(rng, n, sr)
            v *= 0.1 / np.sqrt(np.mean(v**2))
            acc = _accompaniment_like(rng, n, sr)
            acc *= np.sqrt(np.sum(v**2) / (np.sum(acc**2) * 10.0 ** (snr / 10.0)))
            tgt[b, c], itf[b, c] = v, acc
    return _quantize(tgt), _quantize(itf)


def synth_batch(rng: np.random.Generator, spec: DataSpec) -> tuple[np.ndarray, np.ndarray]:
    """``(mixture, target)`` with ``mixture = target + interferer``."""
    tgt, itf = synth_sources(rng, spec)
    return tgt + itf, tgt


@functools.lru_cache(maxsize=None)
def wav_tracks(root: str) -> tuple[int, tuple[tuple[str, np.ndarray, np.ndarray], ...]]:
    """``(sample_rate, tracks)`` for every ``<track>/mixture.wav`` + ``target.wav`` under ``root``."""
    tracks, rates = [], set()
    for track in sorted(Path(root).iterdir()):
        mix_path, tgt_path = track / "mixture.wav", track / "target.wav"
        if not (mix_path.is_file() and tgt_path.is_file()):
            continue
        mix, tgt = read_wav(mix_path), read_wav(tgt_path)
        if mix.samples.shape != tgt.samples.shape or mix.sample_rate != tgt.sample_rate:
            raise ValueError(f"{track}: mixture and target differ in shape or sample rate")
        rates.add(mix.sample_rate)
        tracks.append((track.name, mix.samples, tgt.samples))
    if not tracks:
        raise ValueError(f"{root}: no <track>/mixture.wav + target.wav pairs")
    if len(rates) > 1:
        raise ValueError(f"{root}: tracks mix sample rates {sorted(rates)}")
    return rates.pop(), tuple(tracks)


def wav_batch(rng: np.random.Generator, spec: DataSpec) -> tuple[np.ndarray, np.ndarray]:
    """Random crops of random tracks from ``spec.wav_dir``, shaped like :func:`synth_batch`."""
    rate, tracks = wav_tracks(str(spec.wav_dir))
    if rate != spec.sample_rate:
        raise ValueError(f"{spec.wav_dir}: sample rate {rate}, data spec says {spec.sample_rate}")
    n = spec.n_samples
    mix = np.zeros((spec.batch_size, spec.channels, n))
    tgt = np.zeros_like(mix)
    for b in range(spec.batch_size):
        _, m, t = tracks[rng.integers(len(tracks))]
        start = int(rng.integers(max(1, m.shape[1] - n + 1)))
        seg = slice(start, start + n)
        for c in range(spec.channels):
            src = c % m.shape[0]  # mono tracks feed every channel; short tracks are zero-padded
            mix[b, c, : m[src, seg].size] = m[src, seg]
            tgt[b, c, : t[src, seg].size] = t[src, seg]
    return mix, tgt


def draw_batch(rng: np.random.Generator, spec: DataSpec) -> tuple[np.ndarray, np.ndarray]:
    return wav_batch(rng, spec) if spec.wav_dir else synth_batch(rng, spec)


@dataclass
class Batch:
    mixture: Spectrogram  # [B*C, bins, frames]
    target: Spectrogram
    target_wave: np.ndarray  # [B*C, samples]
    mixture_wave: np.ndarray


def make_batch(mixture: np.ndarray, target: np.ndarray, window: int, hop: int) -> Batch:
    """Flatten batch/channel axes and transform both signals."""
    n = mixture.shape[-1]
    mix = mixture.reshape(-1, n)
    tgt = target.reshape(-1, n)
    return Batch(stft(mix, window, hop), stft(tgt, window, hop), tgt, mix)


# ---------------------------------------------------------------- objectives


def loss_obj(est_re: Tensor, est_im: Tensor, target: Spectrogram, window: int, hop: int, out_len: int) -> Tensor:
    """L1(real) + L1(imag) + L1(waveforms after ISTFT), each a mean over elements."""
    if est_re.shape != target.re.shape or est_im.shape != target.im.shape:
        raise ValueError(f"loss_obj: estimate {est_re.shape} vs target {target.re.shape}")
    dt = est_re.dtype
    tr, ti = Tensor(target.re, dtype=dt), Tensor(target.im, dtype=dt)
    wav_est = istft_tensor(est_re, est_im, window, hop, out_len)
    wav_tgt = istft_tensor(tr, ti, window, hop, out_len)
    return T.add(T.add(T.l1_loss(est_re, tr), T.l1_loss(est_im, ti)), T.l1_loss(wav_est, wav_tgt))


def subnet_loss(params: FullModelParams, batch: Batch, w: int, d: int) -> Tensor:
    cfg = params.config
    re, im = forward_tensors(params, batch.mixture.re, batch.mixture.im, w, d)
    return loss_obj(re, im, batch.target, cfg.window, cfg.hop, batch.target_wave.shape[-1])


@dataclass(frozen=True)
class SampledConfig:
    w: int
    d: int


def sample_subnet(rng: np.random.Generator, max_width: int, max_depth: int) -> SampledConfig:
    """Independent uniform draws of width in ``1..W`` and depth in ``1..D``."""
    w = int(rng.integers(1, max_width + 1))
    d = int(rng.integers(1, max_depth + 1))
    return SampledConfig(w, d)


def loss_total(params: FullModelParams, batch: Batch, sampled: SampledConfig) -> Tensor:
    cfg = params.config
    check_subnet(cfg, sampled.w, sampled.d)
    full = subnet_loss(params, batch, cfg.max_width, cfg.max_depth)
    return T.add(subnet_loss(params, batch, sampled.w, sampled.d), full)


# ---------------------------------------------------------------- optimisation


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            # rebind instead of mutating: graphs may still hold the old array
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def global_grad_norm(params: list[Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale gradients so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        k = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * k
    return norm


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.98
    decay_every: int = 2  # epochs
    clip_norm: float = 5.0
    patience: int = 10
    max_epochs: int = 100
    steps_per_epoch: int = 50
    val_batches: int = 2
    seed: int = 0
    dual_objective: bool = True  # False: plain loss at (W, D), i.e. a stand-alone model

    def __post_init__(self):
        if self.lr < 0 or self.lr_decay <= 0 or self.clip_norm <= 0:
            raise ValueError("lr, lr_decay and clip_norm must be positive")
        if min(self.decay_every, self.patience, self.max_epochs, self.steps_per_epoch, self.val_batches) < 1:
            raise ValueError("decay_every, patience, max_epochs, steps_per_epoch and val_batches must be >= 1")

    def lr_at(self, epochs_done: int) -> float:
        return self.lr * self.lr_decay ** (epochs_done // self.decay_every)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    sampled: dict = field(default_factory=dict)

    def histogram_str(self) -> str:
        return ";".join(f"w{w}d{d}:{n}" for (w, d), n in sorted(self.sampled.items()))


@dataclass
class TrainResult:
    params: FullModelParams
    history: list[EpochRecord]
    step_losses: list[float]
    best_epoch: int


class TrainingDiverged(FloatingPointError):
    pass


def validation_set(spec: DataSpec, n_batches: int, seed: int, window: int, hop: int) -> list[Batch]:
    rng = np.random.default_rng([seed, 1])
    return [make_batch(*draw_batch(rng, spec), window, hop) for _ in range(n_batches)]


def evaluate_loss(params: FullModelParams, batches: list[Batch], w: int | None = None, d: int | None = None) -> float:
    w = params.config.max_width if w is None else w
    d = params.config.max_depth if d is None else d
    with T.no_grad():
        return float(np.mean([subnet_loss(params, b, w, d).item() for b in batches]))


def train(
    params: FullModelParams,
    data: DataSpec,
    cfg: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    val_fn: Callable[[FullModelParams], float] | None = None,
) -> TrainResult:
    """Optimise ``params`` in place; return the best-validation snapshot and history.

    Training data comes from ``draw_batch`` seeded by ``cfg.seed``;
    ``val_fn`` overrides the default full-model validation loss.
    """
    mcfg = params.config
    plist = params.parameters()
    opt = Adam(plist, lr=cfg.lr_at(0))
    data_rng = np.random.default_rng([cfg.seed, 0])
    sampler_rng = np.random.default_rng([cfg.seed, 2])
    if val_fn is None:
        val_set = validation_set(data, cfg.val_batches, cfg.seed, mcfg.window, mcfg.hop)
        val_fn = lambda p: evaluate_loss(p, val_set)  # noqa: E731

    history: list[EpochRecord] = []
    step_losses: list[float] = []
    best, best_epoch, since_best = math.inf, 0, 0
    best_params = params.copy()
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        opt.lr = cfg.lr_at(epoch - 1)
        counts: Counter = Counter()
        losses = []
        for _ in range(cfg.steps_per_epoch):
            step += 1
            batch = make_batch(*draw_batch(data_rng, data), mcfg.window, mcfg.hop)
            if cfg.dual_objective:
                sampled = sample_subnet(sampler_rng, mcfg.max_width, mcfg.max_depth)
                loss = loss_total(params, batch, sampled)
            else:
                sampled = SampledConfig(mcfg.max_width, mcfg.max_depth)
                loss = subnet_loss(params, batch, sampled.w, sampled.d)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at step {step} with sampled config {sampled}")
            T.zero_grad(plist)
            T.backward(loss)
            clip_grad_norm(plist, cfg.clip_norm)
            opt.step()
            counts[(sampled.w, sampled.d)] += 1
            losses.append(value)
            step_losses.append(value)

        val = val_fn(params)
        rec = EpochRecord(epoch, float(np.mean(losses)), val, opt.lr, dict(counts))
        history.append(rec)
        log.info("epoch %d train %.5f val %.5f lr %.6g", epoch, rec.train_loss, val, opt.lr)
        if on_epoch is not None:
            on_epoch(rec)
        if val < best:
            best, best_epoch, since_best = val, epoch, 0
            best_params = params.copy()
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    T.zero_grad(plist)
    return TrainResult(best_params, history, step_losses, best_epoch)


# ---------------------------------------------------------------- evaluation


def separate(params: FullModelParams, mixture: np.ndarray, w: int, d: int) -> np.ndarray:
    """Waveform estimate for ``mixture[..., samples]`` using subnetwork ``(w, d)``."""
    cfg = params.config
    n = mixture.shape[-1]
    flat = mixture.reshape(-1, n)
    S = stft(flat, cfg.window, cfg.hop)
    with T.no_grad():
        re, im = forward_tensors(params, S.re, S.im, w, d)
    est = istft(Spectrogram(re.data, im.data), cfg.window, cfg.hop, n)
    return est.reshape(mixture.shape)


def make_test_set(spec: DataSpec, n_batches: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng([seed, 3])
    return [draw_batch(rng, spec) for _ in range(n_batches)]


def evaluate_snr(params: FullModelParams, items: list[tuple[np.ndarray, np.ndarray]], w: int, d: int) -> list[float]:
    """Per-clip SNR (dB, channel-averaged) of the separated target."""
    out = []
    for mixture, target in items:
        est = separate(params, mixture, w, d)
        out.extend(snr_db(target[b], est[b]) for b in range(target.shape[0]))
    return out
