"""A synthetic clip, its spectrogram, the band split, and the way back."""
import numpy as np

from dynsep.spectral import BandScheme, band_merge, band_split, istft, snr_db, stft
from dynsep.training import DataSpec, synth_sources

#%%
# one 2 s clip at 8 kHz: a voice-like target over a noisy accompaniment
rng = np.random.default_rng(0)
target, interferer = synth_sources(rng, DataSpec(batch_size=1))
mixture = target + interferer
print("samples:", mixture.shape, " input SNR of the mixture: %.2f dB" % snr_db(target[0], mixture[0]))

#%%
S = stft(mixture[0, 0], 256, 64)
print("spectrogram:", S.shape, "(bins, frames)")
energy = (S.re**2 + S.im**2).mean(axis=1)
print("loudest bins:", np.argsort(energy)[::-1][:5])

#%%
# 129 bins into 8 contiguous bands; the last one takes the remainder
scheme = BandScheme.equal(S.bins, 8)
print("band widths:", scheme.widths)
bands = band_split(S, scheme)
back = band_merge(bands)
print("split/merge exact:", np.array_equal(back.re, S.re) and np.array_equal(back.im, S.im))

#%%
y = istft(S, 256, 64, mixture.shape[-1])
print("round trip max error: %.2e" % np.max(np.abs(y - mixture[0, 0])))
