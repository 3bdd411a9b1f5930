"""WAV decoding, resampling and log-mel spectrogram extraction."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

DB_FLOOR = -80.0
_AMIN = 1e-10

_FORMAT_PCM = 0x0001
_FORMAT_FLOAT = 0x0003
_FORMAT_EXTENSIBLE = 0xFFFE

MELF_MAGIC = b"MELF"
MELF_VERSION = 1


class WavError(ValueError):
    """Malformed or unsupported WAV data."""


class DspConfigError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class DspConfig:
    frame_length: int = 2048
    hop: int = 1024
    n_mels: int = 128
    sample_rate: int = 22050
    fmin: float = 0.0
    fmax: Optional[float] = None
    window: str = "hann"

    def __post_init__(self):
        if self.hop <= 0 or self.frame_length <= 0:
            raise DspConfigError("frame_length and hop must be positive")
        if self.hop > self.frame_length:
            raise DspConfigError(f"hop {self.hop} exceeds frame_length {self.frame_length}")
        if self.n_mels < 1:
            raise DspConfigError("n_mels must be >= 1")
        if self.window != "hann":
            raise DspConfigError(f"unsupported window {self.window!r}")
        if not 0 <= self.fmin < self.top_frequency <= self.sample_rate / 2:
            raise DspConfigError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={self.fmin}, "
                f"fmax={self.top_frequency}, sample_rate={self.sample_rate}"
            )

    @property
    def top_frequency(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else float(self.fmax)

    @property
    def n_bins(self) -> int:
        return self.frame_length // 2 + 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DspConfig":
        return cls(**json.loads(text))


@dataclass
class MelSpectrogram:
    values: np.ndarray  # frames x n_mels, dB relative to the clip maximum
    config: DspConfig = field(default_factory=DspConfig)

    @property
    def shape(self) -> tuple:
        return self.values.shape


# --------------------------------------------------------------------- WAV


def _parse_chunks(data: bytes):
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError("not a RIFF/WAVE file")
    fmt = None
    body = None
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        start = pos + 8
        if cid == b"fmt ":
            if size < 16 or start + 16 > len(data):
                raise WavError("truncated fmt chunk")
            tag, channels, rate, _, align, bits = struct.unpack_from("<HHIIHH", data, start)
            if tag == _FORMAT_EXTENSIBLE and size >= 40:
                tag = struct.unpack_from("<H", data, start + 24)[0]
            fmt = (tag, channels, rate, align, bits)
        elif cid == b"data":
            body = (start, min(size, len(data) - start))
        pos = start + size + (size & 1)
    if fmt is None:
        raise WavError("missing fmt chunk")
    if body is None:
        raise WavError("missing data chunk")
    return fmt, body


def _check_format(fmt) -> None:
    tag, channels, rate, align, bits = fmt
    if channels < 1 or rate <= 0:
        raise WavError(f"invalid header: channels={channels}, rate={rate}")
    if not ((tag == _FORMAT_PCM and bits == 16) or (tag == _FORMAT_FLOAT and bits == 32)):
        raise WavError(
            f"unsupported WAV encoding (format tag {tag:#06x}, {bits}-bit); "
            "convert externally to 16-bit PCM or 32-bit float WAV"
        )


def decode_wav(data: bytes) -> AudioClip:
    """Decode 16-bit PCM or 32-bit float WAV bytes; channels are averaged to mono."""
    fmt, (start, size) = _parse_chunks(data)
    _check_format(fmt)
    tag, channels, rate, _, bits = fmt
    width = bits // 8
    n = size // (width * channels)
    raw = data[start:start + n * width * channels]
    if tag == _FORMAT_PCM:
        samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    else:
        samples = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    samples = samples.reshape(n, channels).mean(axis=1)
    return AudioClip(samples, rate)


def read_wav(path: Union[str, Path]) -> AudioClip:
    return decode_wav(Path(path).read_bytes())


def wav_info(path: Union[str, Path]) -> tuple[int, int]:
    """Return ``(sample_rate, n_frames)`` reading only the header region."""
    with open(path, "rb") as fh:
        head = fh.read(1 << 16)
    fmt, (start, _) = _parse_chunks(head)
    _check_format(fmt)
    declared = struct.unpack_from("<I", head, start - 4)[0]
    actual = Path(path).stat().st_size - start
    size = min(declared, actual)
    _, channels, rate, _, bits = fmt
    return rate, size // (channels * bits // 8)


def encode_wav(clip: AudioClip, float32: bool = False) -> bytes:
    """Encode a mono clip as 16-bit PCM (default) or 32-bit float WAV."""
    x = np.clip(clip.samples, -1.0, 1.0)
    if float32:
        payload, tag, bits = x.astype("<f4").tobytes(), _FORMAT_FLOAT, 32
    else:
        pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        payload, tag, bits = pcm.tobytes(), _FORMAT_PCM, 16
    rate = int(clip.sample_rate)
    align = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, tag, 1, rate, rate * align, align, bits,
        b"data", len(payload),
    )
    return header + payload


def write_wav(path: Union[str, Path], clip: AudioClip, float32: bool = False) -> None:
    Path(path).write_bytes(encode_wav(clip, float32=float32))


# --------------------------------------------------------------- resampling


def resample_linear(clip: AudioClip, target_rate: int) -> AudioClip:
    """Linear-interpolation resampling; output length is ``floor(n * target / source)``."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    n = len(clip.samples)
    if n == 0:
        raise ValueError("cannot resample an empty clip")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    m = (n * target_rate) // clip.sample_rate
    pos = np.arange(m, dtype=np.float64) * (clip.sample_rate / target_rate)
    left = np.minimum(np.floor(pos).astype(np.int64), n - 1)
    right = np.minimum(left + 1, n - 1)
    frac = pos - left
    x = clip.samples
    return AudioClip(x[left] * (1.0 - frac) + x[right] * frac, target_rate)


# ---------------------------------------------------------------- spectra


def frame_count(n_samples: int, hop: int) -> int:
    return 1 + n_samples // hop


def hann_window(n: int) -> np.ndarray:
    # periodic form, the usual choice for spectral analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_magnitude(clip: AudioClip, config: DspConfig) -> np.ndarray:
    """Centered, Hann-windowed STFT magnitudes, shape ``frames x (frame_length/2 + 1)``."""
    x = clip.samples
    if len(x) < 1:
        raise ValueError("clip is empty")
    n_fft, hop = config.frame_length, config.hop
    pad = n_fft // 2
    mode = "reflect" if len(x) > 1 else "constant"
    padded = np.pad(x, pad, mode=mode)
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop]
    assert len(frames) == frame_count(len(x), hop)
    return np.abs(np.fft.rfft(frames * hann_window(n_fft), axis=1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: DspConfig) -> np.ndarray:
    """The ``n_mels + 2`` triangle corner frequencies, equally spaced in mel."""
    mels = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.top_frequency), config.n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(config: DspConfig) -> np.ndarray:
    """Triangular, area-normalized mel filters, shape ``n_mels x (frame_length/2 + 1)``."""
    corners = mel_center_frequencies(config)
    bins = np.arange(config.n_bins) * config.sample_rate / config.frame_length
    lo, mid, hi = corners[:-2, None], corners[1:-1, None], corners[2:, None]
    rising = (bins[None, :] - lo) / (mid - lo)
    falling = (hi - bins[None, :]) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(~weights.any(axis=1))
    if empty.size:
        raise DspConfigError(
            f"n_mels={config.n_mels} is too large for frame_length={config.frame_length}: "
            f"{empty.size} filter(s) cover no FFT bin"
        )
    weights *= (2.0 / (hi - lo))
    return weights


def mel_power(stft_mag: np.ndarray, filterbank: np.ndarray) -> np.ndarray:
    """Project power spectra onto the mel filters, ``frames x n_mels``."""
    if stft_mag.shape[1] != filterbank.shape[1]:
        raise ValueError(
            f"STFT has {stft_mag.shape[1]} bins but filterbank expects {filterbank.shape[1]}"
        )
    return (stft_mag ** 2) @ filterbank.T


def power_to_db(power: np.ndarray, floor: float = DB_FLOOR) -> np.ndarray:
    peak = power.max() if power.size else 0.0
    if peak <= 0:
        return np.full(power.shape, floor)
    db = 10.0 * np.log10(np.maximum(power, _AMIN) / peak)
    return np.maximum(db, floor)


def log_mel(stft_mag: np.ndarray, filterbank: np.ndarray, config: Optional[DspConfig] = None) -> MelSpectrogram:
    return MelSpectrogram(power_to_db(mel_power(stft_mag, filterbank)), config or DspConfig())


def standardize(values: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance; constant inputs map to all zeros."""
    values = np.asarray(values, dtype=np.float64)
    std = values.std()
    if std == 0:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def preprocess_clip(clip: AudioClip, config: DspConfig = DspConfig(),
                    filterbank: Optional[np.ndarray] = None,
                    standardized: bool = False) -> MelSpectrogram:
    """Resample to the config rate and compute the dB log-mel spectrogram.

    Feature caches store dB values; per-spectrogram standardization is normally
    applied at batching time, or here when ``standardized`` is set.
    """
    if clip.sample_rate != config.sample_rate:
        clip = resample_linear(clip, config.sample_rate)
    if len(clip.samples) < config.frame_length:
        raise ValueError(
            f"clip has {len(clip.samples)} samples, shorter than one frame ({config.frame_length})"
        )
    fb = mel_filterbank(config) if filterbank is None else filterbank
    spec = log_mel(stft_magnitude(clip, config), fb, config)
    if standardized:
        spec = MelSpectrogram(standardize(spec.values), config)
    return spec


# -------------------------------------------------------------- MELF files


def encode_melf(spec: MelSpectrogram) -> bytes:
    values = np.ascontiguousarray(spec.values, dtype="<f4")
    frames, mels = values.shape
    head = MELF_MAGIC + struct.pack("<HII", MELF_VERSION, frames, mels)
    return head + values.tobytes() + spec.config.to_json().encode("utf-8")


def decode_melf(data: bytes) -> MelSpectrogram:
    if data[:4] != MELF_MAGIC:
        raise ValueError("not a MELF feature file")
    version, frames, mels = struct.unpack_from("<HII", data, 4)
    if version != MELF_VERSION:
        raise ValueError(f"unsupported MELF version {version}")
    start = 14
    end = start + frames * mels * 4
    if len(data) < end:
        raise ValueError("truncated MELF payload")
    values = np.frombuffer(data[start:end], dtype="<f4").reshape(frames, mels).astype(np.float32)
    config = DspConfig.from_json(data[end:].decode("utf-8"))
    return MelSpectrogram(values, config)


def write_melf(path: Union[str, Path], spec: MelSpectrogram) -> None:
    Path(path).write_bytes(encode_melf(spec))


def read_melf(path: Union[str, Path]) -> MelSpectrogram:
    return decode_melf(Path(path).read_bytes())
