"""Audio ingestion and per-second log-mel instance extraction."""

from __future__ import annotations

import struct
import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ClipTooShort,
    InvalidConfig,
    InvalidRange,
    MalformedWav,
    UnsupportedEncoding,
    UnsupportedSampleRate,
)

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10

_PCM = 0x0001
_IEEE_FLOAT = 0x0003
_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class AudioClip:
    id: str
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise UnsupportedSampleRate(
                f"clip {self.id!r}: sample rate {self.sample_rate} Hz, expected {SAMPLE_RATE} Hz"
            )
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise MalformedWav(f"clip {self.id!r}: expected non-empty mono samples")
        if not np.all(np.isfinite(self.samples)):
            raise MalformedWav(f"clip {self.id!r}: non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    n_mels: int = 64
    with_delta: bool = True
    frame_ms: int = 25
    hop_ms: int = 10
    segment_s: int = 1
    n_fft: int = 512
    f_lo: float = 0.0
    f_hi: float = 8000.0

    def __post_init__(self):
        if self.n_mels not in (64, 128):
            raise InvalidConfig(f"n_mels must be 64 or 128, got {self.n_mels}")
        if self.frame_length > self.segment_length or self.frame_length > self.n_fft:
            raise InvalidConfig("frame longer than segment or FFT size")

    @property
    def frame_length(self) -> int:
        return SAMPLE_RATE * self.frame_ms // 1000

    @property
    def hop_length(self) -> int:
        return SAMPLE_RATE * self.hop_ms // 1000

    @property
    def segment_length(self) -> int:
        return SAMPLE_RATE * self.segment_s

    @property
    def n_frames(self) -> int:
        return (self.segment_length - self.frame_length) // self.hop_length + 1

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_mels, self.n_frames, 2 if self.with_delta else 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(**d)


# 128-bin embedding features: no delta channel by default, and a raised lower
# edge so the narrowest low-frequency triangles still cover an FFT bin.
EMBED_FEATURES = FeatureConfig(n_mels=128, with_delta=False, f_lo=250.0)
MIL_FEATURES = FeatureConfig()


def load_wav(path) -> AudioClip:
    """Read a RIFF/WAVE file (16-bit PCM or 32-bit float) as a mono 16 kHz clip."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWav(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            if cid == b"data":
                # tolerate streaming writers that leave the size unpatched
                body = body[: len(body) - len(body) % 4]
            else:
                raise MalformedWav(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            if size < 16:
                raise MalformedWav(f"{path}: short fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _EXTENSIBLE and size >= 26:
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)

    if fmt is None or payload is None:
        raise MalformedWav(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedEncoding(f"{path}: format tag {tag:#06x} with {bits} bits is not supported")
    if rate != SAMPLE_RATE:
        raise UnsupportedSampleRate(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz")
    if channels < 1 or block_align != channels * dtype.itemsize:
        raise MalformedWav(f"{path}: inconsistent channel layout")

    n = len(payload) // block_align
    if n == 0:
        raise MalformedWav(f"{path}: no samples")
    frames = np.frombuffer(payload[: n * block_align], dtype=dtype).reshape(n, channels)
    samples = frames.astype(np.float64) * scale
    if channels > 1:
        samples = samples.mean(axis=1)
    else:
        samples = samples[:, 0]
    return AudioClip(id=path.stem, samples=samples, sample_rate=rate)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write mono 16-bit PCM. Samples are clipped to [-1, 1)."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # n_mels x n_fft_bins
    f_lo: float
    f_hi: float

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    @property
    def n_fft_bins(self) -> int:
        return self.weights.shape[1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, f_lo: float, f_hi: float) -> MelFilterbank:
    if n_mels < 2:
        raise InvalidRange(f"n_mels must be >= 2, got {n_mels}")
    if not (0 <= f_lo < f_hi <= sample_rate / 2):
        raise InvalidRange(f"need 0 <= f_lo < f_hi <= {sample_rate / 2}, got [{f_lo}, {f_hi}]")

    edges = mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    lo, peak, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (peak - lo)
    falling = (hi - freqs) / (hi - peak)
    weights = np.maximum(0.0, np.minimum(rising, falling))

    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if empty.size:
        raise InvalidRange(
            f"{empty.size} of {n_mels} mel filters fall between FFT bins "
            f"(first at {edges[empty[0] + 1]:.1f} Hz); raise f_lo or n_fft"
        )
    return MelFilterbank(weights=weights, f_lo=float(f_lo), f_hi=float(f_hi))


_fbank_cache: dict[tuple, np.ndarray] = {}


def _filterbank_for(cfg: FeatureConfig) -> np.ndarray:
    key = (cfg.n_mels, cfg.n_fft, cfg.f_lo, cfg.f_hi)
    fb = _fbank_cache.get(key)
    if fb is None:
        fb = mel_filterbank(cfg.n_mels, cfg.n_fft, SAMPLE_RATE, cfg.f_lo, cfg.f_hi).weights
        fb.setflags(write=False)
        _fbank_cache[key] = fb
    return fb


def _hann(n: int) -> np.ndarray:
    # periodic form, the usual choice for STFT analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def delta(x: np.ndarray) -> np.ndarray:
    """Symmetric first difference along the last axis, edges replicated."""
    padded = np.concatenate([x[..., :1], x, x[..., -1:]], axis=-1)
    return 0.5 * (padded[..., 2:] - padded[..., :-2])


def segment_features(segment: np.ndarray, cfg: FeatureConfig = MIL_FEATURES) -> np.ndarray:
    """Log-mel (+delta) tensor of shape mel x frames x channels for one segment.

    The segment must hold exactly ``cfg.segment_length`` samples. Both batch
    extraction and the streaming path go through here, so their instance
    features are bit-identical.
    """
    segment = np.asarray(segment, dtype=np.float64)
    if segment.shape != (cfg.segment_length,):
        raise ClipTooShort(f"segment has {segment.shape} samples, expected {cfg.segment_length}")
    frames = np.lib.stride_tricks.sliding_window_view(segment, cfg.frame_length)[:: cfg.hop_length]
    spec = np.fft.rfft(frames * _hann(cfg.frame_length), n=cfg.n_fft, axis=-1)
    power = spec.real**2 + spec.imag**2
    mel = _filterbank_for(cfg) @ power.T  # mel x frames
    logmel = np.log(np.maximum(mel, LOG_FLOOR))
    if cfg.with_delta:
        return np.stack([logmel, delta(logmel)], axis=-1)
    return logmel[..., None]


def split_segments(samples: np.ndarray, cfg: FeatureConfig = MIL_FEATURES) -> list[np.ndarray]:
    """Cut into non-overlapping segments; a remainder of at least half a segment is zero-padded."""
    seg = cfg.segment_length
    n_full, rem = divmod(samples.size, seg)
    if n_full == 0 and rem * 2 < seg:
        raise ClipTooShort(f"{samples.size / SAMPLE_RATE:.3f} s is shorter than half a segment")
    out = [samples[i * seg : (i + 1) * seg] for i in range(n_full)]
    if rem * 2 >= seg:
        out.append(np.concatenate([samples[n_full * seg :], np.zeros(seg - rem)]))
    return out


def extract_instances(clip: AudioClip, cfg: FeatureConfig = MIL_FEATURES) -> list[np.ndarray]:
    return [segment_features(s, cfg) for s in split_segments(clip.samples, cfg)]
