"""Audio frontend: WAV I/O, 40-band log-mel filterbank, sliding mean normalization."""

import struct
import wave
from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, IngestionError

SAMPLE_RATE = 16000
FRAME_LENGTH = 400  # 25 ms
FRAME_SHIFT = 160  # 10 ms
N_FFT = 512
N_MELS = 40
F_MIN = 20.0
F_MAX = 7600.0
LOG_FLOOR = 1e-10
CMN_WINDOW = 301  # 3 s at 10 ms shift

FEATURE_MAGIC = b"LRXF"


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise IngestionError(f"sample rate {self.sample_rate} Hz, expected {SAMPLE_RATE}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise IngestionError("waveform must be mono (1-D samples)")
        if samples.shape[0] < FRAME_LENGTH:
            raise IngestionError(f"waveform has {samples.shape[0]} samples, need at least {FRAME_LENGTH}")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self):
        return self.samples.shape[0] / self.sample_rate


def load_wav(path):
    """Read a 16-bit PCM mono 16 kHz WAV file, scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, nframes = (
                f.getnchannels(),
                f.getsampwidth(),
                f.getframerate(),
                f.getnframes(),
            )
            raw = f.readframes(nframes)
    except (wave.Error, EOFError) as exc:
        raise IngestionError(f"{path}: not a readable PCM WAV file ({exc})") from exc
    if channels != 1:
        raise IngestionError(f"{path}: {channels} channels, expected mono")
    if width != 2:
        raise IngestionError(f"{path}: sample width {8 * width} bits, expected 16-bit PCM")
    if rate != SAMPLE_RATE:
        raise IngestionError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE}")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0)


def save_wav(path, w):
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sample_rate=SAMPLE_RATE, f_min=F_MIN, f_max=F_MAX):
    """Triangular filters on the rfft bin grid, shape (n_fft // 2 + 1, n_mels)."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    rising = (freqs[:, None] - lower) / (center - lower)
    falling = (upper - freqs[:, None]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def filter_centers():
    edges = _mel_to_hz(np.linspace(_hz_to_mel(F_MIN), _hz_to_mel(F_MAX), N_MELS + 2))
    return edges[1:-1]


_FILTERS = mel_filterbank()
_WINDOW = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(FRAME_LENGTH) / FRAME_LENGTH)


def num_frames(num_samples):
    return (num_samples - FRAME_LENGTH) // FRAME_SHIFT + 1


def melbank(w):
    """Log mel energies, one row per 25 ms frame at a 10 ms shift (no padding)."""
    x = w.samples
    frames = np.lib.stride_tricks.sliding_window_view(x, FRAME_LENGTH)[::FRAME_SHIFT]
    spectrum = np.fft.rfft(frames * _WINDOW, n=N_FFT, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    return np.log(np.maximum(power @ _FILTERS, LOG_FLOOR))


def mean_normalize(frames, window=CMN_WINDOW):
    """Subtract a centered sliding mean of ``window`` frames.

    Near the sequence edges the window is shifted to stay inside the
    sequence, so sequences no longer than ``window`` get their global mean
    removed.
    """
    frames = np.asarray(frames, dtype=np.float64)
    t = frames.shape[0]
    if t <= window:
        return frames - frames.mean(axis=0)
    half = window // 2
    start = np.clip(np.arange(t) - half, 0, t - window)
    csum = np.vstack([np.zeros((1, frames.shape[1])), np.cumsum(frames, axis=0)])
    means = (csum[start + window] - csum[start]) / window
    return frames - means


def extract(w):
    """Full pipeline: filterbank then sliding mean normalization."""
    return mean_normalize(melbank(w))


def write_features(path, frames):
    frames = np.ascontiguousarray(frames, dtype="<f8")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<II", frames.shape[0], frames.shape[1]))
        f.write(frames.tobytes())


def read_features(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != FEATURE_MAGIC:
        raise CorruptionError(f"{path}: missing LRXF header")
    t, d = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 8 * t * d:
        raise CorruptionError(f"{path}: expected {t}x{d} float64 payload, got {len(data) - 12} bytes")
    return np.frombuffer(data[12:], dtype="<f8").reshape(t, d).astype(np.float64)
