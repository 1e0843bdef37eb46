"""STFT / ISTFT, band split/merge and the SNR metric.

Conventions
-----------
* Waveforms are arrays ``[..., samples]``; the leading axes are channels
  (and optionally a batch axis). Stereo channels are treated independently.
* Spectrograms hold real and imaginary parts shaped ``[..., bins, frames]``
  with ``bins = window // 2 + 1``.
* The STFT reflect-pads ``window // 2`` samples on each side, so
  ``frames = samples // hop + 1`` and the ISTFT can compensate the edges
  exactly.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import tensor as T

SNR_CAP_DB = 100.0


@dataclass(frozen=True)
class Waveform:
    """Multi-channel audio. ``samples`` is ``[channels, n]``."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2:
            raise ValueError(f"waveform must be [channels, samples], got shape {s.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", s)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    def __len__(self) -> int:
        return self.samples.shape[1]


@dataclass
class Spectrogram:
    """Complex spectrogram stored as separate real/imag arrays ``[..., bins, frames]``."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ValueError(f"real/imag shape mismatch: {self.re.shape} vs {self.im.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.shape

    @property
    def bins(self) -> int:
        return self.re.shape[-2]

    @property
    def frames(self) -> int:
        return self.re.shape[-1]

    @classmethod
    def from_complex(cls, z: np.ndarray) -> Spectrogram:
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im


def hann(window_size: int, dtype=np.float64) -> np.ndarray:
    """Periodic Hann window (satisfies constant overlap-add at hop = window/4)."""
    n = np.arange(window_size)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * n / window_size)).astype(dtype)


def _check_params(window_size: int, hop: int) -> None:
    if window_size <= 0 or window_size % 2:
        raise ValueError(f"window_size must be a positive even number, got {window_size}")
    if not 0 < hop <= window_size // 2:
        raise ValueError(f"hop must be in (0, window/2], got {hop}")


def n_frames(n_samples: int, hop: int) -> int:
    return n_samples // hop + 1


def stft(x, window_size: int = 256, hop: int = 64) -> Spectrogram:
    """Short-time Fourier transform of ``x[..., samples]`` with a Hann window."""
    _check_params(window_size, hop)
    x = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=float)
    if x.shape[-1] == 0:
        raise ValueError("empty signal")
    pad = window_size // 2
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    xp = np.pad(x, widths, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(xp, window_size, axis=-1)[..., ::hop, :]
    spec = np.fft.rfft(frames * hann(window_size, x.dtype), axis=-1)  # [..., frames, bins]
    return Spectrogram.from_complex(np.swapaxes(spec, -1, -2))


@functools.lru_cache(maxsize=32)
def _synthesis_norm(frames: int, window_size: int, hop: int, dtype) -> np.ndarray:
    w2 = hann(window_size, dtype) ** 2
    total = np.zeros((frames - 1) * hop + window_size, dtype=dtype)
    for f in range(frames):
        total[f * hop : f * hop + window_size] += w2
    inv = np.zeros_like(total)
    ok = total >= 1e-8
    inv[ok] = 1.0 / total[ok]
    inv.flags.writeable = False
    return inv


def _check_istft(S: Spectrogram, window_size: int, hop: int, out_len: int) -> None:
    _check_params(window_size, hop)
    if S.bins != window_size // 2 + 1:
        raise ValueError(f"spectrogram has {S.bins} bins, window {window_size} needs {window_size // 2 + 1}")
    if out_len <= 0 or n_frames(out_len, hop) != S.frames:
        raise ValueError(
            f"frame count {S.frames} inconsistent with out_len {out_len} (expected {n_frames(max(out_len, 0), hop)})"
        )


def istft(S: Spectrogram, window_size: int = 256, hop: int = 64, out_len: int | None = None) -> np.ndarray:
    """Inverse STFT by windowed overlap-add, normalised by the summed squared window."""
    if out_len is None:
        out_len = (S.frames - 1) * hop
    _check_istft(S, window_size, hop, out_len)
    frames = np.fft.irfft(np.swapaxes(S.to_complex(), -1, -2), n=window_size, axis=-1)
    frames = frames * hann(window_size, frames.dtype)
    lead = frames.shape[:-2]
    total = np.zeros(lead + ((S.frames - 1) * hop + window_size,), dtype=frames.dtype)
    for f in range(S.frames):
        total[..., f * hop : f * hop + window_size] += frames[..., f, :]
    total *= _synthesis_norm(S.frames, window_size, hop, frames.dtype)
    pad = window_size // 2
    return total[..., pad : pad + out_len]


@functools.lru_cache(maxsize=8)
def _irfft_matrices(window_size: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    bins = window_size // 2 + 1
    k = np.arange(bins)[:, None]
    n = np.arange(window_size)[None, :]
    ang = 2.0 * np.pi * k * n / window_size
    c = np.full((bins, 1), 2.0)
    c[0] = 1.0
    c[-1] = 1.0
    cr = (c * np.cos(ang) / window_size).astype(dtype)
    ci = (-c * np.sin(ang) / window_size).astype(dtype)
    cr.flags.writeable = ci.flags.writeable = False
    return cr, ci


def istft_tensor(re: T.Tensor, im: T.Tensor, window_size: int, hop: int, out_len: int) -> T.Tensor:
    """Differentiable ISTFT of ``[..., bins, frames]`` tensors -> ``[..., out_len]``.

    Same maths as :func:`istft`, written with graph ops (the inverse real
    DFT becomes a matmul with fixed cosine/sine matrices).
    """
    _check_istft(Spectrogram(re.data, im.data), window_size, hop, out_len)
    nd = re.ndim
    axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    cr, ci = _irfft_matrices(window_size, re.dtype)
    frames = T.add(
        T.matmul(T.transpose(re, axes), T.Tensor(cr)),
        T.matmul(T.transpose(im, axes), T.Tensor(ci)),
    )
    frames = T.scale(frames, hann(window_size, re.dtype))
    sig = T.overlap_add(frames, hop)
    sig = T.scale(sig, _synthesis_norm(re.shape[-1], window_size, hop, re.dtype))
    pad = window_size // 2
    return T.slice_axis(sig, -1, pad, pad + out_len)


# ---------------------------------------------------------------- bands


@dataclass(frozen=True)
class BandScheme:
    """Contiguous, non-overlapping ``(start, stop)`` bin ranges covering ``[0, bins)``."""

    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        ranges = tuple((int(a), int(b)) for a, b in self.ranges)
        if not ranges:
            raise ValueError("band scheme needs at least one band")
        pos = 0
        for a, b in ranges:
            if a != pos:
                raise ValueError(f"band scheme has a gap or overlap at bin {pos} (band starts at {a})")
            if b <= a:
                raise ValueError(f"empty or reversed band ({a}, {b})")
            pos = b
        object.__setattr__(self, "ranges", ranges)

    @property
    def bins(self) -> int:
        return self.ranges[-1][1]

    @property
    def widths(self) -> list[int]:
        return [b - a for a, b in self.ranges]

    def __len__(self) -> int:
        return len(self.ranges)

    @classmethod
    def equal(cls, bins: int, n_bands: int) -> BandScheme:
        """Bands of ``ceil(bins / n_bands)`` bins; the last band takes the remainder."""
        if not 1 <= n_bands <= bins:
            raise ValueError(f"cannot split {bins} bins into {n_bands} bands")
        width = math.ceil(bins / n_bands)
        edges = list(range(0, bins, width)) + [bins]
        return cls(tuple(zip(edges[:-1], edges[1:])))


def band_split(S: Spectrogram, scheme: BandScheme) -> list[Spectrogram]:
    if S.bins != scheme.bins:
        raise ValueError(f"spectrogram has {S.bins} bins, scheme covers {scheme.bins}")
    return [Spectrogram(S.re[..., a:b, :].copy(), S.im[..., a:b, :].copy()) for a, b in scheme.ranges]


def band_merge(bands: list[Spectrogram]) -> Spectrogram:
    return Spectrogram(
        np.concatenate([b.re for b in bands], axis=-2),
        np.concatenate([b.im for b in bands], axis=-2),
    )


# ---------------------------------------------------------------- metric


def snr_db(reference, estimate) -> float:
    """Per-channel ``10 log10(sum y^2 / sum (y - y_hat)^2)`` averaged over channels.

    Inputs are ``[..., samples]`` arrays or :class:`Waveform`; every leading
    index counts as one channel. A perfect channel is capped at 100 dB.
    """
    y = reference.samples if isinstance(reference, Waveform) else np.asarray(reference, dtype=float)
    yh = estimate.samples if isinstance(estimate, Waveform) else np.asarray(estimate, dtype=float)
    if y.shape != yh.shape:
        raise ValueError(f"snr_db: shape mismatch {y.shape} vs {yh.shape}")
    y = y.reshape(-1, y.shape[-1]) if y.ndim > 1 else y[None]
    yh = yh.reshape(y.shape)
    sig = np.sum(y * y, axis=-1)
    if np.any(sig == 0):
        raise ValueError("snr_db: reference channel is all zeros")
    err = np.sum((y - yh) ** 2, axis=-1)
    with np.errstate(divide="ignore"):
        per = np.where(err > 0, 10.0 * np.log10(sig / np.where(err > 0, err, 1.0)), SNR_CAP_DB)
    return float(np.mean(np.minimum(per, SNR_CAP_DB)))


# ---------------------------------------------------------------- WAV I/O


def read_wav(path: str | Path) -> Waveform:
    """Read 16-bit PCM or 32-bit float WAV into ``[channels, samples]`` floats."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        data = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported WAV sample type {data.dtype}")
    if data.ndim == 1:
        data = data[:, None]
    return Waveform(np.ascontiguousarray(data.T), int(rate))


def write_wav(path: str | Path, wav: Waveform, pcm16: bool = False) -> None:
    data = wav.samples.T
    if pcm16:
        out = np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2")
    else:
        out = data.astype("<f4")
    wavfile.write(str(path), wav.sample_rate, out[:, 0] if out.shape[1] == 1 else out)
