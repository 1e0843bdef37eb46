import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynsep import tensor as T
from dynsep.spectral import (
    BandScheme,
    Spectrogram,
    Waveform,
    band_merge,
    band_split,
    hann,
    istft,
    istft_tensor,
    n_frames,
    read_wav,
    snr_db,
    stft,
    write_wav,
)

W, HOP = 256, 64


def test_dc_energy_sits_in_bin_zero():
    S = stft(np.ones(2048), W, HOP)
    interior = slice(W // HOP, S.frames - W // HOP)
    mag = np.abs(S.to_complex())[:, interior]
    np.testing.assert_allclose(mag[0], hann(W).sum(), rtol=0, atol=1e-9)
    # the periodic Hann window itself has one neighbouring coefficient, -N/4
    np.testing.assert_allclose(mag[1], W / 4, rtol=0, atol=1e-9)
    assert np.max(mag[2:]) < 1e-9


@pytest.mark.parametrize("k", [1, 5, 17, 64, 127])
def test_bin_centred_sinusoid_peaks_at_its_bin(k):
    n = np.arange(4096)
    x = np.cos(2 * np.pi * k * n / W + 0.3)
    S = stft(x, W, HOP)
    interior = slice(W // HOP, S.frames - W // HOP)
    assert np.all(np.argmax(np.abs(S.to_complex())[:, interior], axis=0) == k)
    # one frame against a direct DFT sum
    f = 10
    seg = np.pad(x, W // 2, mode="reflect")[f * HOP : f * HOP + W] * hann(W)
    direct = sum(seg[m] * np.exp(-2j * np.pi * k * m / W) for m in range(W))
    assert abs(S.to_complex()[k, f] - direct) < 1e-9


def test_frame_count_and_shapes():
    S = stft(np.zeros((2, 1000)), W, HOP)
    assert S.shape == (2, W // 2 + 1, n_frames(1000, HOP))
    assert S.frames == 1000 // HOP + 1


def test_zero_signal_and_zero_spectrogram():
    S = stft(np.zeros(500), W, HOP)
    assert not S.re.any() and not S.im.any()
    assert not istft(S, W, HOP, 500).any()


def test_round_trip_includes_edges():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.standard_normal(int(rng.integers(300, 3000)))
        y = istft(stft(x, W, HOP), W, HOP, len(x))
        assert np.max(np.abs(y - x)) < 1e-6 * np.max(np.abs(x))


def test_round_trip_at_large_window():
    x = np.random.default_rng(1).standard_normal(20000)
    y = istft(stft(x, 2048, 512), 2048, 512, len(x))
    assert np.max(np.abs(y - x)) < 1e-6 * np.max(np.abs(x))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(64, 16), (128, 32), (256, 64), (512, 128)]))
def test_round_trip_property(seed, wh):
    w, h = wh
    x = np.random.default_rng(seed).standard_normal(w * 3 + seed % 97)
    y = istft(stft(x, w, h), w, h, len(x))
    assert np.max(np.abs(y - x)) < 1e-6 * np.max(np.abs(x))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_stft_and_istft_are_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x, z = rng.standard_normal((2, 700))
    lhs = stft(a * x + b * z, W, HOP)
    sx, sz = stft(x, W, HOP), stft(z, W, HOP)
    np.testing.assert_allclose(lhs.re, a * sx.re + b * sz.re, rtol=0, atol=1e-9)
    np.testing.assert_allclose(lhs.im, a * sx.im + b * sz.im, rtol=0, atol=1e-9)
    s12 = Spectrogram(sx.re + sz.re, sx.im + sz.im)
    np.testing.assert_allclose(istft(s12, W, HOP, 700), istft(sx, W, HOP, 700) + istft(sz, W, HOP, 700),
                               rtol=0, atol=1e-9)


def test_tensor_istft_matches_numpy_istft():
    rng = np.random.default_rng(2)
    S = stft(rng.standard_normal((3, 800)), W, HOP)
    y = istft_tensor(T.Tensor(S.re), T.Tensor(S.im), W, HOP, 800)
    np.testing.assert_allclose(y.data, istft(S, W, HOP, 800), rtol=0, atol=1e-12)


def test_parameter_errors():
    with pytest.raises(ValueError, match="even"):
        stft(np.ones(100), 255, 64)
    with pytest.raises(ValueError, match="empty"):
        stft(np.ones(0), W, HOP)
    with pytest.raises(ValueError, match="hop"):
        stft(np.ones(1000), W, 200)
    S = stft(np.ones(1000), W, HOP)
    with pytest.raises(ValueError, match="frame count"):
        istft(S, W, HOP, 2000)
    with pytest.raises(ValueError, match="bins"):
        istft(S, 512, HOP, 1000)


def test_single_band_and_halves_round_trip():
    rng = np.random.default_rng(3)
    S = Spectrogram(rng.standard_normal((2, 129, 7)), rng.standard_normal((2, 129, 7)))
    for scheme in (BandScheme(((0, 129),)), BandScheme(((0, 64), (64, 129)))):
        back = band_merge(band_split(S, scheme))
        assert np.array_equal(back.re, S.re) and np.array_equal(back.im, S.im)


def test_default_scheme_on_129_bins():
    scheme = BandScheme.equal(129, 8)
    assert sum(scheme.widths) == 129
    assert len(scheme) == 8
    assert scheme.widths == [17] * 7 + [10]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.data())
def test_merge_of_split_is_exact_for_any_scheme(bins, data):
    n_bands = data.draw(st.integers(1, bins))
    cuts = sorted(data.draw(st.sets(st.integers(1, bins - 1), max_size=n_bands - 1)) if bins > 1 else [])
    edges = [0] + cuts + [bins]
    scheme = BandScheme(tuple(zip(edges[:-1], edges[1:])))
    rng = np.random.default_rng(bins)
    S = Spectrogram(rng.standard_normal((bins, 3)), rng.standard_normal((bins, 3)))
    back = band_merge(band_split(S, scheme))
    assert back.re.tobytes() == S.re.tobytes() and back.im.tobytes() == S.im.tobytes()


def test_bad_schemes_are_rejected():
    with pytest.raises(ValueError, match="gap"):
        BandScheme(((0, 10), (11, 20)))
    with pytest.raises(ValueError, match="overlap"):
        BandScheme(((0, 10), (9, 20)))
    with pytest.raises(ValueError, match="empty"):
        BandScheme(((0, 10), (10, 10)))
    with pytest.raises(ValueError):
        band_split(Spectrogram(np.zeros((10, 2)), np.zeros((10, 2))), BandScheme(((0, 11),)))


def test_snr_examples():
    y = np.random.default_rng(4).standard_normal((2, 500))
    assert snr_db(y, 0.5 * y) == pytest.approx(10 * np.log10(4.0), abs=1e-9)
    assert snr_db(y, y) == 100.0
    assert snr_db(y, np.zeros_like(y)) == pytest.approx(0.0, abs=1e-12)


def test_snr_averages_channels():
    y = np.random.default_rng(5).standard_normal((2, 300))
    est = np.stack([0.5 * y[0], 0.9 * y[1]])
    expected = (-20 * np.log10(0.5) - 20 * np.log10(0.1)) / 2
    assert snr_db(Waveform(y, 8000), Waveform(est, 8000)) == pytest.approx(expected, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5).filter(lambda g: abs(1 - g) > 1e-3), st.integers(0, 1000))
def test_snr_of_scaled_reference(g, seed):
    y = np.random.default_rng(seed).standard_normal((1, 200))
    assert snr_db(y, g * y) == pytest.approx(-20 * np.log10(abs(1 - g)), abs=1e-8)


def test_snr_errors():
    with pytest.raises(ValueError, match="shape"):
        snr_db(np.ones(5), np.ones(6))
    with pytest.raises(ValueError, match="zeros"):
        snr_db(np.zeros(5), np.ones(5))


def test_waveform_validation():
    assert Waveform(np.zeros(10), 8000).channels == 1
    with pytest.raises(ValueError):
        Waveform(np.zeros((1, 2, 3)), 8000)
    with pytest.raises(ValueError):
        Waveform(np.zeros(10), 0)


def test_wav_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    wav = Waveform(rng.uniform(-0.9, 0.9, (2, 400)), 8000)
    write_wav(tmp_path / "f.wav", wav)
    back = read_wav(tmp_path / "f.wav")
    assert back.sample_rate == 8000 and back.samples.shape == (2, 400)
    np.testing.assert_allclose(back.samples, wav.samples, rtol=0, atol=1e-7)
    write_wav(tmp_path / "p.wav", Waveform(wav.samples[:1], 8000), pcm16=True)
    back = read_wav(tmp_path / "p.wav")
    assert back.channels == 1
    np.testing.assert_allclose(back.samples, wav.samples[:1], rtol=0, atol=1.0 / 32768)
