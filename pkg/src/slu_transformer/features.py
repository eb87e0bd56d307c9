"""Log-mel filterbank features, low-frame-rate stacking and global CMVN."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

SAMPLE_RATE = 16000
N_MELS = 80
STACK = 4
SKIP = 3
LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-10
STORE_MAGIC = b"SLUF"
STORE_VERSION = 1
CMVN_MAGIC = b"SLUC"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")


@dataclass
class CmvnStats:
    mean: np.ndarray
    variance: np.ndarray
    frame_count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(CMVN_MAGIC + struct.pack("<I", self.dim))
            fh.write(self.mean.astype("<f8").tobytes())
            fh.write(self.variance.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "CmvnStats":
        buf = Path(path).read_bytes()
        if buf[:4] != CMVN_MAGIC:
            raise ValueError(f"{path}: not a CMVN stats file")
        (dim,) = struct.unpack_from("<I", buf, 4)
        mean = np.frombuffer(buf, "<f8", dim, 8).astype(np.float64)
        var = np.frombuffer(buf, "<f8", dim, 8 + 8 * dim).astype(np.float64)
        # frame count is not part of the file format
        return cls(mean, var, 0)


def samples_per(ms: float, sample_rate: int) -> int:
    return int(round(sample_rate * ms / 1000.0))


def frame_and_window(w: Waveform, win_ms: float = 25.0, hop_ms: float = 10.0) -> np.ndarray:
    """Slice into overlapping frames, each multiplied by a Hamming window."""
    win = samples_per(win_ms, w.sample_rate_hz)
    hop = samples_per(hop_ms, w.sample_rate_hz)
    N = len(w.samples)
    if N < win:
        raise ValueError(f"waveform of {N} samples is shorter than one {win}-sample window")
    count = (N - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(count)[:, None]
    return w.samples[idx] * np.hamming(win)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = 512, sample_rate: int = SAMPLE_RATE,
                   low_hz: float = 20.0, high_hz: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1)."""
    high_hz = sample_rate / 2.0 if high_hz is None else high_hz
    edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - lo) / (mid - lo)
    down = (hi - bins[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def filter_centers(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE, low_hz: float = 20.0) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    return edges[1:-1]


def _fft_size(win: int) -> int:
    return 1 << (win - 1).bit_length()


def log_spectral(frames: np.ndarray, sample_rate: int = SAMPLE_RATE, n_mels: int = N_MELS) -> np.ndarray:
    """Power spectrum -> mel filterbank -> natural log floored at log(1e-10)."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    n_fft = _fft_size(frames.shape[1])
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(n_mels, n_fft, sample_rate).T
    return np.log(np.maximum(energies, LOG_FLOOR))


def stack_frames(f: np.ndarray, stack: int = STACK, skip: int = SKIP) -> np.ndarray:
    """Row i = concat(f[i*skip], ..., f[i*skip + stack - 1]); trailing frames dropped."""
    f = np.asarray(f)
    T = f.shape[0]
    if T < stack:
        raise ValueError(f"need at least {stack} frames to stack, got {T}")
    out_T = (T - stack) // skip + 1
    idx = np.arange(out_T)[:, None] * skip + np.arange(stack)[None, :]
    return f[idx].reshape(out_T, stack * f.shape[1])


def featurize(w: Waveform) -> np.ndarray:
    """Waveform -> stacked (T', 320) log-mel features, before normalization."""
    return stack_frames(log_spectral(frame_and_window(w), w.sample_rate_hz))


def cmvn_fit(features: Iterable[np.ndarray]) -> CmvnStats:
    """Pooled mean and (population) variance over every frame, two passes."""
    mats = [np.asarray(x, dtype=np.float64) for x in features]
    count = sum(m.shape[0] for m in mats)
    if not mats or count < 2:
        raise ValueError("CMVN needs at least 2 frames in total")
    mean = sum(m.sum(axis=0) for m in mats) / count
    var = sum(((m - mean) ** 2).sum(axis=0) for m in mats) / count
    return CmvnStats(mean, var, count)


def cmvn_apply(x: np.ndarray, stats: CmvnStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.mean) / np.sqrt(np.maximum(stats.variance, VAR_FLOOR))


def cmvn_invert(x: np.ndarray, stats: CmvnStats) -> np.ndarray:
    return np.asarray(x) * np.sqrt(np.maximum(stats.variance, VAR_FLOOR)) + stats.mean


# ---------------------------------------------------------------------------
# audio and feature files
# ---------------------------------------------------------------------------

def read_wav(path: str | Path, expected_rate: int = SAMPLE_RATE) -> Waveform:
    """16-bit PCM mono WAV. Other rates are rejected, not resampled."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        if rate != expected_rate:
            raise ValueError(f"{path}: sample rate {rate} Hz, expected {expected_rate}")
        raw = fh.readframes(fh.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate)


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Round onto the 16-bit grid so that a WAV round trip is exact."""
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767) / 32768.0


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate_hz)
        fh.writeframes(pcm.tobytes())


def write_feature_store(path: str | Path, features: Mapping[str, np.ndarray]) -> None:
    """SLUF: magic, u32 version, then (id, T, dim, f32 rows) records."""
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC + struct.pack("<I", STORE_VERSION))
        for uid, x in features.items():
            x = np.asarray(x)
            raw = uid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<II", *x.shape))
            fh.write(x.astype("<f4").tobytes())


def read_feature_store(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != STORE_MAGIC:
        raise ValueError(f"{path}: not a feature store")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != STORE_VERSION:
        raise ValueError(f"{path}: unsupported feature store version {version}")
    out, off = {}, 8
    while off < len(buf):
        (ln,) = struct.unpack_from("<I", buf, off)
        uid = buf[off + 4:off + 4 + ln].decode("utf-8")
        off += 4 + ln
        T, dim = struct.unpack_from("<II", buf, off)
        off += 8
        out[uid] = np.frombuffer(buf, "<f4", T * dim, off).reshape(T, dim).astype(np.float64)
        off += 4 * T * dim
    return out


def to_float32_grid(x: np.ndarray) -> np.ndarray:
    """The values a feature store will hand back for ``x``."""
    return np.asarray(x).astype(np.float32).astype(np.float64)
