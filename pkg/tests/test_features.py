import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrxvec import features, synthdata
from lrxvec.errors import CorruptionError, IngestionError
from lrxvec.features import Waveform


def write_raw_wav(path, pcm, rate=16000, channels=1, width=2):
    with wave.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(width)
        f.setframerate(rate)
        f.writeframes(pcm.tobytes())


def test_load_silence(tmp_path):
    p = tmp_path / "s.wav"
    write_raw_wav(p, np.zeros(16000, dtype="<i2"))
    w = features.load_wav(p)
    assert w.samples.shape == (16000,) and not w.samples.any()
    assert w.duration == 1.0


def test_load_full_scale_square(tmp_path):
    p = tmp_path / "sq.wav"
    pcm = np.where(np.arange(1600) // 40 % 2 == 0, 32767, -32767).astype("<i2")
    write_raw_wav(p, pcm)
    w = features.load_wav(p)
    assert set(np.unique(w.samples)) == {-32767 / 32768, 32767 / 32768}


def test_synthetic_roundtrip(tmp_path):
    w = synthdata.gen_corpus(2, 1, 0.5, seed=3).waveforms[0]
    features.save_wav(tmp_path / "u.wav", w)
    back = features.load_wav(tmp_path / "u.wav")
    assert np.max(np.abs(back.samples - w.samples)) <= 1 / 32768


@pytest.mark.parametrize(
    "kwargs,word",
    [({"rate": 8000}, "sample rate"), ({"channels": 2}, "channels"), ({"width": 1}, "sample width")],
)
def test_load_rejects_wrong_format(tmp_path, kwargs, word):
    p = tmp_path / "bad.wav"
    pcm = np.zeros(4000, dtype="<i2" if kwargs.get("width", 2) == 2 else "u1")
    write_raw_wav(p, pcm, **kwargs)
    with pytest.raises(IngestionError, match=word):
        features.load_wav(p)


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(b"not a wav file at all")
    with pytest.raises(IngestionError):
        features.load_wav(p)


def test_waveform_invariants():
    with pytest.raises(IngestionError, match="400"):
        Waveform(np.zeros(399))
    with pytest.raises(IngestionError, match="sample rate"):
        Waveform(np.zeros(1000), sample_rate=8000)
    with pytest.raises(IngestionError, match="mono"):
        Waveform(np.zeros((2, 1000)))


def test_frame_count_one_second():
    assert features.melbank(Waveform(np.zeros(16000))).shape == (98, 40)
    assert features.num_frames(16000) == 98


def test_tone_peaks_in_nearest_filter():
    t = np.arange(16000) / 16000
    f = features.melbank(Waveform(0.5 * np.sin(2 * np.pi * 1000 * t)))
    peaks = np.argmax(f, axis=1)
    assert np.all(peaks == peaks[0])
    centers = features.filter_centers()
    assert peaks[0] == np.argmin(np.abs(centers - 1000))


def test_silence_gives_identical_frames():
    f = features.melbank(Waveform(np.zeros(4000)))
    assert np.all(f == f[0])
    assert np.allclose(f, np.log(1e-10))


def test_filterbank_shape_and_range():
    fb = features.mel_filterbank()
    assert fb.shape == (257, 40)
    assert fb.min() >= 0 and fb.max() <= 1
    centers = features.filter_centers()
    assert 20 < centers[0] < centers[-1] < 7600


def test_shift_covariance(rng):
    x = rng.uniform(-0.5, 0.5, 8000)
    a = features.melbank(Waveform(x))
    b = features.melbank(Waveform(x[160:]))
    assert np.max(np.abs(a[1:] - b[: a.shape[0] - 1])) <= 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(400, 3000), st.integers(0, 2**16), st.floats(0.0, 1.0))
def test_melbank_always_finite(n, seed, level):
    x = level * np.random.default_rng(seed).uniform(-1, 1, n)
    f = features.melbank(Waveform(x))
    assert f.shape == (features.num_frames(n), 40)
    assert np.all(np.isfinite(f))


def brute_force_normalize(frames, window=301):
    t = frames.shape[0]
    out = np.empty_like(frames)
    half = window // 2
    for i in range(t):
        if t <= window:
            lo, hi = 0, t
        else:
            lo = min(max(i - half, 0), t - window)
            hi = lo + window
        out[i] = frames[i] - frames[lo:hi].mean(axis=0)
    return out


def test_normalize_constant_is_zero():
    assert np.all(features.mean_normalize(np.full((50, 40), 3.25)) == 0)


def test_normalize_short_removes_global_mean(rng):
    f = rng.standard_normal((120, 40)) + 5.0
    out = features.mean_normalize(f)
    assert np.max(np.abs(out.mean(axis=0))) <= 1e-12
    assert np.allclose(features.mean_normalize(out), out, atol=1e-12)


def test_normalize_matches_brute_force(rng):
    f = rng.standard_normal((500, 40)) * 3 + rng.standard_normal(40)
    assert np.max(np.abs(features.mean_normalize(f) - brute_force_normalize(f))) <= 1e-12


def test_normalize_interior_windows_have_zero_mean(rng):
    f = rng.standard_normal((700, 4)) + np.linspace(0, 10, 700)[:, None]
    out = features.mean_normalize(f)
    # the frame at the center of a full window has that window's mean removed
    i = 400
    assert np.allclose(out[i], f[i] - f[i - 150 : i + 151].mean(axis=0), atol=1e-12)


def test_extract_pipeline(rng):
    w = Waveform(rng.uniform(-0.1, 0.1, 16000))
    f = features.extract(w)
    assert f.shape == (98, 40)
    assert np.max(np.abs(f.mean(axis=0))) <= 1e-9


def test_feature_file_roundtrip(tmp_path, rng):
    f = rng.standard_normal((17, 40))
    features.write_features(tmp_path / "f.bin", f)
    assert np.array_equal(features.read_features(tmp_path / "f.bin"), f)
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-8])
    with pytest.raises(CorruptionError):
        features.read_features(tmp_path / "cut.bin")
    (tmp_path / "magic.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptionError):
        features.read_features(tmp_path / "magic.bin")
