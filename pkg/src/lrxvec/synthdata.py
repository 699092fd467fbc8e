"""Deterministic synthetic multi-speaker corpus and 4x augmentation.

A speaker is a 40-band timbre template, a vocal-tract warp applied to a
shared inventory of formant "phonemes", a pitch range and jitter. An
utterance is a sequence of voiced/unvoiced syllables: pulse-train or noise
excitation shaped in the frequency domain by the warped phoneme formants
and the speaker template.

All randomness comes from Philox substreams keyed by (seed, purpose, index).
"""

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, IngestionError
from .features import SAMPLE_RATE, Waveform, filter_centers, load_wav, save_wav
from .rng import substream

N_BANDS = 40
N_PHONEMES = 16
LEVEL_RMS = 0.05
MIN_TEMPLATE_DISTANCE = 2.0
PHONEME_SEED = 0x5EED


class SilentInputWarning(UserWarning):
    """Augmentation received a zero-RMS waveform; the output is noise only."""


@dataclass(frozen=True)
class SyntheticSpeaker:
    id: int
    template: np.ndarray  # positive per-band gains on the mel-band centers
    warp: float  # formant frequency scale
    f0: float  # mean pitch, Hz
    jitter: float  # relative pitch jitter
    rate: float  # mean syllable duration, s
    seed: int


@dataclass
class Corpus:
    utt_ids: list = field(default_factory=list)
    speakers: list = field(default_factory=list)  # speaker id string per utterance
    waveforms: list = field(default_factory=list)

    def __len__(self):
        return len(self.utt_ids)

    def labels(self):
        """Integer label per utterance, speakers numbered in sorted order."""
        index = {s: i for i, s in enumerate(sorted(set(self.speakers)))}
        return np.array([index[s] for s in self.speakers])

    def speaker_names(self):
        return sorted(set(self.speakers))


def _phoneme_inventory():
    rng = substream(PHONEME_SEED, "phonemes")
    f1 = rng.uniform(250, 850, N_PHONEMES)
    f2 = rng.uniform(850, 2400, N_PHONEMES)
    f3 = rng.uniform(2400, 3600, N_PHONEMES)
    voiced = rng.random(N_PHONEMES) < 0.75
    return np.stack([f1, f2, f3], axis=1), voiced


PHONEME_FORMANTS, PHONEME_VOICED = _phoneme_inventory()
BANDWIDTHS = np.array([90.0, 130.0, 200.0])


def _random_template(rng):
    k = np.arange(N_BANDS) / (N_BANDS - 1)
    db = np.zeros(N_BANDS)
    for order in range(1, 5):
        db += rng.normal(0.0, 6.0 / order) * np.cos(np.pi * order * k + rng.uniform(0, 2 * np.pi))
    return 10.0 ** (db / 20.0)


def make_speakers(num_speakers, seed, min_distance=MIN_TEMPLATE_DISTANCE, offset=0):
    """Speakers whose templates differ pairwise by at least ``min_distance`` (L2, in gain units)."""
    speakers = []
    for s in range(offset, offset + num_speakers):
        for attempt in range(1000):
            rng = substream(seed, "speaker", s, attempt)
            template = _random_template(rng)
            if all(np.linalg.norm(template - o.template) >= min_distance for o in speakers):
                break
        else:
            raise ConfigurationError(f"could not place speaker {s} at distance {min_distance}")
        speakers.append(
            SyntheticSpeaker(
                id=s,
                template=template,
                warp=float(rng.uniform(0.82, 1.18)),
                f0=float(rng.uniform(85.0, 255.0)),
                jitter=float(rng.uniform(0.01, 0.05)),
                rate=float(rng.uniform(0.12, 0.22)),
                seed=int(rng.integers(0, 2**31)),
            )
        )
    return speakers


def _excitation(n, voiced, f0, jitter, rng):
    if not voiced:
        return rng.standard_normal(n)
    drift = np.cumsum(rng.standard_normal(n)) / np.sqrt(n)
    inst = f0 * (1.0 + jitter * drift + jitter * 0.3 * rng.standard_normal(n))
    phase = np.cumsum(inst) / SAMPLE_RATE
    pulses = np.diff(np.floor(phase), prepend=np.floor(phase[0])) > 0
    return pulses * np.sqrt(SAMPLE_RATE / f0) + 0.05 * rng.standard_normal(n)


def _shape(excitation, speaker, phoneme, tilt):
    n = excitation.size
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    formants = PHONEME_FORMANTS[phoneme] * speaker.warp
    env = np.full(freqs.shape, 0.02)
    for f, bw, amp in zip(formants, BANDWIDTHS * speaker.warp, (1.0, 0.6, 0.35)):
        env += amp / (1.0 + ((freqs - f) / bw) ** 2)
    timbre = np.interp(freqs, filter_centers(), speaker.template)
    gain = env * timbre * (1.0 + freqs / 1000.0) ** tilt
    return np.fft.irfft(np.fft.rfft(excitation) * gain, n=n)


def synth_utterance(speaker, duration_s, rng):
    """One utterance of ``speaker`` as a Waveform at the nominal level."""
    total = int(round(duration_s * SAMPLE_RATE))
    out = np.zeros(total)
    tilt = rng.normal(-0.6, 0.15)
    pos = int(rng.integers(0, int(0.1 * SAMPLE_RATE)))
    while pos < total:
        length = int(SAMPLE_RATE * speaker.rate * rng.uniform(0.6, 1.5))
        length = min(length, total - pos)
        if length >= 64:
            phoneme = int(rng.integers(0, N_PHONEMES))
            voiced = bool(PHONEME_VOICED[phoneme])
            f0 = speaker.f0 * np.exp(rng.normal(0.0, 0.08))
            seg = _shape(_excitation(length, voiced, f0, speaker.jitter, rng), speaker, phoneme, tilt)
            ramp = min(160, length // 4)
            taper = np.ones(length)
            taper[:ramp] = np.linspace(0.0, 1.0, ramp)
            taper[length - ramp :] = np.linspace(1.0, 0.0, ramp)
            level = np.exp(rng.normal(0.0, 0.3)) * (1.0 if voiced else 0.4)
            rms = np.sqrt(np.mean(seg**2)) or 1.0
            out[pos : pos + length] += seg * taper * level / rms
        pos += length + int(SAMPLE_RATE * rng.uniform(0.0, 0.08))
    out += 0.002 * rng.standard_normal(total)
    out *= LEVEL_RMS / np.sqrt(np.mean(out**2))
    return Waveform(np.clip(out, -1.0, 1.0))


def gen_corpus(num_speakers, utts_per_speaker, duration_s, seed, speaker_offset=0):
    """``num_speakers * utts_per_speaker`` clean utterances, deterministic in ``seed``."""
    if num_speakers < 2:
        raise ConfigurationError("need at least 2 speakers")
    if utts_per_speaker < 1:
        raise ConfigurationError("need at least 1 utterance per speaker")
    if duration_s * SAMPLE_RATE < 400:
        raise ConfigurationError("duration shorter than one 25 ms frame")
    corpus = Corpus()
    for spk in make_speakers(num_speakers, seed, offset=speaker_offset):
        for u in range(utts_per_speaker):
            rng = substream(seed, "utterance", spk.id, u)
            corpus.utt_ids.append(f"spk{spk.id:03d}-utt{u:03d}")
            corpus.speakers.append(f"spk{spk.id:03d}")
            corpus.waveforms.append(synth_utterance(spk, duration_s, rng))
    return corpus


# --- augmentation ------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    snr_db: float | None  # None disables noise
    rir: np.ndarray | None = None  # None disables reverberation
    noise_kind: str = "white"
    noise_seed: int = 0

    def __post_init__(self):
        if self.snr_db is not None and not 0.0 <= self.snr_db <= 18.0:
            raise ConfigurationError(f"snr {self.snr_db} dB outside [0, 18]")
        if self.noise_kind not in ("white", "babble"):
            raise ConfigurationError(f"unknown noise kind {self.noise_kind!r}")


def make_rir(rt60, rng, sample_rate=SAMPLE_RATE):
    """Direct path plus exponentially decaying noise tail (60 dB down at ``rt60``), unit energy."""
    if not 0.1 <= rt60 <= 0.6:
        raise ConfigurationError(f"rt60 {rt60} s outside [0.1, 0.6]")
    n = int(rt60 * sample_rate)
    t = np.arange(n) / sample_rate
    h = rng.standard_normal(n) * np.exp(-6.9078 * t / rt60) * 0.3
    h[0] = 1.0
    return h / np.linalg.norm(h)


def _rms(x):
    return float(np.sqrt(np.mean(x**2)))


def _fit_length(x, n):
    reps = -(-n // x.size)
    return np.tile(x, reps)[:n]


def augment(w, spec, babble=None):
    """Reverberate (keeping the original RMS) and add noise at ``spec.snr_db``; clip to [-1, 1].

    ``babble`` supplies the source waveforms summed for ``noise_kind="babble"``.
    """
    x = w.samples
    n = x.size
    if spec.rir is None:
        y = x.copy()
    elif spec.rir.size == 1:
        y = x * spec.rir[0]
    else:
        size = 1 << int(np.ceil(np.log2(n + spec.rir.size - 1)))
        y = np.fft.irfft(np.fft.rfft(x, size) * np.fft.rfft(spec.rir, size), size)[:n]
    rms_in = _rms(x)
    silent = rms_in == 0.0
    if silent:
        warnings.warn("augment: silent input, output is noise at unit reference", SilentInputWarning)
    elif _rms(y) > 0:
        y = y * (rms_in / _rms(y))
    if spec.snr_db is not None:
        if spec.noise_kind == "white":
            noise = substream(spec.noise_seed, "noise").standard_normal(n)
        else:
            if not babble:
                raise ConfigurationError("babble noise needs source waveforms")
            noise = np.sum([_fit_length(b.samples, n) for b in babble], axis=0)
        p_signal = 1.0 if silent else np.mean(y**2)
        p_noise = np.mean(noise**2)
        if p_noise > 0:
            y = y + noise * np.sqrt(p_signal / p_noise * 10.0 ** (-spec.snr_db / 10.0))
    return Waveform(np.clip(y, -1.0, 1.0))


def measured_snr(clean, mixed):
    """10 log10 of signal power over residual power."""
    noise = mixed - clean
    return 10.0 * np.log10(np.mean(clean**2) / np.mean(noise**2))


def draw_spec(seed, index, copy):
    rng = substream(seed, "augment", index, copy)
    snr = float(rng.uniform(0.0, 18.0))
    rir = make_rir(float(rng.uniform(0.1, 0.6)), rng)
    kind = "white" if rng.random() < 0.5 else "babble"
    return AugmentSpec(snr, rir, kind, int(rng.integers(0, 2**31)))


def expand_4x(corpus, seed):
    """Original utterances plus three augmented copies each, with labels preserved."""
    out = Corpus()
    names = np.array(corpus.speakers)
    for i, (uid, spk, w) in enumerate(zip(corpus.utt_ids, corpus.speakers, corpus.waveforms)):
        out.utt_ids.append(uid)
        out.speakers.append(spk)
        out.waveforms.append(w)
        others = np.flatnonzero(names != spk)
        for copy in range(1, 4):
            spec = draw_spec(seed, i, copy)
            babble = None
            if spec.noise_kind == "babble":
                pick = substream(seed, "babble", i, copy).choice(others, size=min(4, others.size), replace=False)
                babble = [corpus.waveforms[j] for j in pick]
            out.utt_ids.append(f"{uid}-aug{copy}")
            out.speakers.append(spk)
            out.waveforms.append(augment(w, spec, babble))
    return out


# --- on-disk corpus -----------------------------------------------------------------

MANIFEST = "manifest.txt"


def write_corpus(corpus, out_dir):
    os.makedirs(os.path.join(out_dir, "wav"), exist_ok=True)
    lines = []
    for uid, spk, w in zip(corpus.utt_ids, corpus.speakers, corpus.waveforms):
        rel = os.path.join("wav", f"{uid}.wav")
        save_wav(os.path.join(out_dir, rel), w)
        lines.append(f"{uid} {spk} {rel}\n")
    with open(os.path.join(out_dir, MANIFEST), "w") as f:
        f.writelines(lines)
    return os.path.join(out_dir, MANIFEST)


def read_manifest(data_dir):
    path = os.path.join(data_dir, MANIFEST)
    if not os.path.exists(path):
        raise IngestionError(f"{data_dir}: no {MANIFEST}")
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise IngestionError(f"{path}:{lineno}: expected '<utt_id> <speaker_id> <path>'")
            rows.append(tuple(parts))
    return rows


def read_corpus(data_dir):
    corpus = Corpus()
    for uid, spk, rel in read_manifest(data_dir):
        corpus.utt_ids.append(uid)
        corpus.speakers.append(spk)
        corpus.waveforms.append(load_wav(os.path.join(data_dir, rel)))
    return corpus
