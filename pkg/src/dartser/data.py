"""Feature extraction (pad/truncate, MFCC, time pooling), the SERC1 container, folds, synthetic data."""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import wave
from pathlib import Path
from typing import Sequence

import numpy as np

CLASSES = ("happiness", "sadness", "anger", "neutral")
HEIGHT = WIDTH = 128
MAGIC = b"SERC1\n"


@dataclasses.dataclass
class Utterance:
    waveform: np.ndarray
    sample_rate: int = 16000
    label: int = 0
    speaker_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not 0 <= self.label < len(CLASSES):
            raise ValueError(f"label {self.label} outside 0..{len(CLASSES) - 1}")


@dataclasses.dataclass
class SpectrogramRecord:
    features: np.ndarray
    label: int
    speaker_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.shape != (HEIGHT, WIDTH):
            raise ValueError(f"record features must be {HEIGHT}x{WIDTH}, got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("record features contain non-finite values")
        if not 0 <= self.label < len(CLASSES):
            raise ValueError(f"label {self.label} outside 0..{len(CLASSES) - 1}")


@dataclasses.dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    seconds: float = 8.0
    n_fft: int = 2048
    hop_length: int = 250
    n_mels: int = 128
    n_mfcc: int = 128
    frames: int = 512
    pool: int = 4


# -- feature pipeline --------------------------------------------------------
def pad_or_truncate(u: Utterance, target_seconds: float = 8.0) -> Utterance:
    wav = np.asarray(u.waveform)
    if wav.size == 0:
        raise ValueError("cannot pad an empty waveform")
    target = int(round(target_seconds * u.sample_rate))
    if wav.size >= target:
        out = wav[:target].copy()
    else:
        out = np.concatenate([wav, np.zeros(target - wav.size, dtype=wav.dtype)])
    return dataclasses.replace(u, waveform=out)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mel = f / f_sp
    min_log_hz = 1000.0
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_hz / f_sp + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep, mel)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """[n_mels, n_fft//2 + 1] triangular filters from 0 Hz to Nyquist, each scaled to unit area."""
    bins = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - bins[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis: ``dct_matrix(n) @ x`` transforms along the first axis."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    basis = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    basis[0] /= np.sqrt(2.0)
    return basis


def stft_power(wav: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Power spectrogram [n_fft//2 + 1, frames] of a zero-centre-padded Hann-windowed STFT."""
    padded = np.pad(np.asarray(wav, dtype=np.float64), n_fft // 2)
    count = 1 + (padded.size - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:count]
    window = np.hanning(n_fft + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(frames * window, axis=1)
    return (np.abs(spec) ** 2).T


def log_mel(u: Utterance, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    if u.sample_rate < cfg.n_fft:
        raise ValueError(f"sample rate {u.sample_rate} Hz too low for n_fft={cfg.n_fft}")
    power = stft_power(u.waveform, cfg.n_fft, cfg.hop_length)
    mel = mel_filterbank(u.sample_rate, cfg.n_fft, cfg.n_mels) @ power
    return 10.0 * np.log10(np.maximum(mel, 1e-10))


def mfcc(u: Utterance, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """[n_mfcc, frames] cepstral coefficients; the time axis is cropped or zero-padded to ``cfg.frames``."""
    coeffs = (dct_matrix(cfg.n_mels) @ log_mel(u, cfg))[:cfg.n_mfcc]
    if coeffs.shape[1] >= cfg.frames:
        coeffs = coeffs[:, :cfg.frames]
    else:
        coeffs = np.pad(coeffs, ((0, 0), (0, cfg.frames - coeffs.shape[1])))
    return coeffs.astype(np.float32)


def downsample(m: np.ndarray, pool: int = 4) -> np.ndarray:
    """Max-pool along time with kernel = stride = ``pool``: 128x512 -> 128x128."""
    m = np.asarray(m)
    if m.shape != (HEIGHT, WIDTH * pool):
        raise ValueError(f"downsample expects {HEIGHT}x{WIDTH * pool}, got {m.shape}")
    return m.reshape(HEIGHT, WIDTH, pool).max(axis=2)


def extract(u: Utterance, cfg: FeatureConfig = FeatureConfig()) -> SpectrogramRecord:
    u = pad_or_truncate(u, cfg.seconds)
    return SpectrogramRecord(downsample(mfcc(u, cfg), cfg.pool), u.label, u.speaker_id)


# -- WAV input ---------------------------------------------------------------
def read_wav(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Read a 16-bit PCM mono WAV as float samples in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1 or fh.getsampwidth() != 2 or fh.getcomptype() != "NONE":
                raise ValueError(f"{path}: only 16-bit PCM mono WAV is supported")
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise ValueError(f"{path}: not a PCM WAV file ({exc})") from exc
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def write_wav(path: str | os.PathLike, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def prepare_records(wav_dir: str | os.PathLike, labels_csv: str | os.PathLike,
                    cfg: FeatureConfig = FeatureConfig()) -> list[SpectrogramRecord]:
    """Run the feature pipeline over every row (filename, label, speaker) of ``labels_csv``."""
    wav_dir = Path(wav_dir)
    if not wav_dir.is_dir() or not any(wav_dir.glob("*.wav")):
        raise ValueError(f"{wav_dir}: no .wav files found")
    with open(labels_csv, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows and [c.strip().lower() for c in rows[0]] == ["filename", "label", "speaker"]:
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{labels_csv}: no utterances listed")
    records = []
    for row in rows:
        if len(row) != 3:
            raise ValueError(f"{labels_csv}: expected filename,label,speaker, got {row}")
        name, label, speaker = (c.strip() for c in row)
        if label not in CLASSES:
            raise ValueError(f"unknown label {label!r} for {name}; valid classes: {', '.join(CLASSES)}")
        samples, rate = read_wav(wav_dir / name)
        if rate != cfg.sample_rate:
            raise ValueError(f"{name}: sample rate {rate} Hz differs from configured {cfg.sample_rate} Hz")
        if samples.size == 0:
            raise ValueError(f"{name}: empty waveform")
        records.append(extract(Utterance(samples, rate, CLASSES.index(label), speaker), cfg))
    return records


# -- container ---------------------------------------------------------------
def _header(records: Sequence[SpectrogramRecord]) -> bytes:
    doc = {
        "count": len(records),
        "height": HEIGHT,
        "width": WIDTH,
        "classes": list(CLASSES),
        "records": [{"label": int(r.label), "speaker": str(r.speaker_id)} for r in records],
    }
    return (json.dumps(doc, separators=(",", ":")) + "\n").encode("utf-8")


def encode_container(records: Sequence[SpectrogramRecord]) -> bytes:
    if not records:
        raise ValueError("a container needs at least one record")
    payload = np.stack([r.features for r in records]).astype("<f4")
    return MAGIC + _header(records) + payload.tobytes()


def save_container(records: Sequence[SpectrogramRecord], path: str | os.PathLike) -> None:
    blob = encode_container(records)
    Path(path).write_bytes(blob)


def decode_container(blob: bytes) -> list[SpectrogramRecord]:
    if not blob.startswith(MAGIC):
        raise ValueError("bad magic: not a SERC1 container")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise ValueError("SERC1 header line is not terminated")
    try:
        header = json.loads(blob[len(MAGIC):end])
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed SERC1 header: {exc}") from exc
    count, h, w = header["count"], header["height"], header["width"]
    metas = header["records"]
    if len(metas) != count:
        raise ValueError(f"header lists {len(metas)} records but count is {count}")
    expected = count * h * w * 4
    payload = blob[end + 1:]
    if len(payload) != expected:
        raise ValueError(f"payload length mismatch: expected {expected} bytes, found {len(payload)}")
    for meta in metas:
        if not 0 <= meta["label"] < len(CLASSES):
            raise ValueError(f"label {meta['label']} out of range 0..{len(CLASSES) - 1}")
    feats = np.frombuffer(payload, dtype="<f4").reshape(count, h, w).astype(np.float32)
    return [SpectrogramRecord(feats[i].copy(), int(m["label"]), str(m["speaker"])) for i, m in enumerate(metas)]


def load_container(path: str | os.PathLike) -> list[SpectrogramRecord]:
    return decode_container(Path(path).read_bytes())


def as_arrays(records: Sequence[SpectrogramRecord], indices: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack records into ([N, 1, 128, 128] float32, [N] int64)."""
    chosen = records if indices is None else [records[i] for i in indices]
    if not chosen:
        return np.zeros((0, 1, HEIGHT, WIDTH), np.float32), np.zeros(0, np.int64)
    x = np.stack([r.features for r in chosen])[:, None].astype(np.float32)
    y = np.array([r.label for r in chosen], dtype=np.int64)
    return x, y


# -- folds -------------------------------------------------------------------
@dataclasses.dataclass(frozen=True)
class Fold:
    test_speakers: tuple[str, ...]
    test: tuple[int, ...]
    search: tuple[int, ...]
    train: tuple[int, ...]


@dataclasses.dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]


def make_folds(records: Sequence[SpectrogramRecord], rng: np.random.Generator,
               n_folds: int = 5, search_fraction: float = 0.7) -> FoldPlan:
    """Leave-speakers-out folds; the non-test records of each fold split search/train."""
    speakers = sorted({r.speaker_id for r in records})
    if len(speakers) < n_folds:
        raise ValueError(f"need at least {n_folds} distinct speakers, got {len(speakers)}")
    shuffled = [speakers[i] for i in rng.permutation(len(speakers))]
    groups = np.array_split(np.array(shuffled, dtype=object), n_folds)
    folds = []
    for group in groups:
        test_speakers = tuple(sorted(str(s) for s in group))
        held = set(test_speakers)
        test = tuple(i for i, r in enumerate(records) if r.speaker_id in held)
        rest = np.array([i for i, r in enumerate(records) if r.speaker_id not in held], dtype=np.int64)
        rest = rest[rng.permutation(rest.size)]
        n_search = int(round(search_fraction * rest.size))
        folds.append(Fold(test_speakers, test, tuple(int(i) for i in rest[:n_search]),
                          tuple(int(i) for i in rest[n_search:])))
    return FoldPlan(tuple(folds))


# -- synthetic data ----------------------------------------------------------
def class_pattern(label: int, speaker_index: int = 0) -> np.ndarray:
    """Unit-RMS band-limited 128x128 pattern; the class sets the spatial frequency, the speaker a phase."""
    rows = np.arange(HEIGHT)[:, None] / HEIGHT
    cols = np.arange(WIDTH)[None, :] / WIDTH
    freq_h = 2 + 3 * label
    freq_w = 1 + 2 * label
    phase = 0.35 * speaker_index
    pattern = np.sin(2 * np.pi * freq_h * rows + phase) * np.cos(2 * np.pi * freq_w * cols + phase / 2)
    return pattern / np.sqrt(np.mean(pattern**2))


def synth_dataset(n: int, rng: np.random.Generator, classes: int = 4, speakers: int = 8,
                  snr_db: float = 10.0, noise: bool = True) -> list[SpectrogramRecord]:
    """Balanced class-conditional patterns plus Gaussian noise at ``snr_db``; speakers round-robin."""
    if classes > len(CLASSES):
        raise ValueError(f"at most {len(CLASSES)} classes are supported")
    if n < classes or n % classes:
        raise ValueError(f"cannot balance {n} records over {classes} classes")
    if speakers < 1:
        raise ValueError("need at least one speaker")
    noise_std = 10.0 ** (-snr_db / 20.0) if noise else 0.0
    records = []
    for i in range(n):
        label = i % classes
        spk = (i // classes) % speakers
        features = class_pattern(label, spk)
        if noise_std:
            features = features + noise_std * rng.standard_normal(features.shape)
        records.append(SpectrogramRecord(features, label, f"spk{spk:02d}"))
    return records
