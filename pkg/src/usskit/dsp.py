"""STFT analysis/synthesis, log-mel features and complex ratio masks.

The kernels work on torch tensors with arbitrary leading batch axes so that
the separator can backpropagate through the inverse transform. Thin wrappers
accept and return :class:`AudioClip` / :class:`Spectrogram` values for
everything else.

Framing is centred with reflect padding and produces ``ceil(n / hop)``
frames, so a 2 s clip at 32 kHz with hop 320 gives exactly 200 frames.
Synthesis is weighted overlap-add normalised by the summed squared window.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 1024
    hop_size: int = 320
    sample_rate: int = 32000
    pad_to_frames: int | None = None
    window: str = "hann"

    def __post_init__(self):
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if self.window_size < 2 or self.window_size % 2:
            raise ValueError("window_size must be an even number >= 2")
        if not 0 < self.hop_size <= self.window_size:
            raise ValueError("hop_size must satisfy 0 < hop <= window_size")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.pad_to_frames is not None and self.pad_to_frames < 1:
            raise ValueError("pad_to_frames must be positive")

    @property
    def n_bins(self) -> int:
        return self.window_size // 2 + 1

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_size

    def n_frames(self, n_samples: int) -> int:
        """Frames produced for a signal before any padding frames are added."""
        return -(-n_samples // self.hop_size)

    def padded_frames(self, n_samples: int) -> int:
        t = self.n_frames(n_samples)
        if self.pad_to_frames is None:
            return t
        if self.pad_to_frames < t:
            raise ValueError(
                f"pad_to_frames={self.pad_to_frames} is below the {t} frames "
                f"produced by {n_samples} samples"
            )
        return self.pad_to_frames


FULL_RATE_STFT = StftConfig(1024, 320, 32000, pad_to_frames=224)


@dataclass
class Spectrogram:
    """Complex (T, F) matrix plus the configuration that produced it."""

    values: np.ndarray
    config: StftConfig

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.config.n_bins:
            raise ValueError(
                f"spectrogram must be (T, {self.config.n_bins}), got {self.values.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)


@dataclass
class ComplexMask:
    magnitude: np.ndarray
    cos: np.ndarray
    sin: np.ndarray
    magnitude_cap: float = 2.0

    def __post_init__(self):
        if not (self.magnitude.shape == self.cos.shape == self.sin.shape):
            raise ValueError("mask components must share one shape")
        if np.any(self.magnitude < 0) or np.any(self.magnitude > self.magnitude_cap):
            raise ValueError(f"mask magnitude must lie in [0, {self.magnitude_cap}]")
        if not np.allclose(self.cos**2 + self.sin**2, 1.0, atol=1e-6):
            raise ValueError("mask phase must be unit-norm (cos, sin) pairs")

    @classmethod
    def from_polar(cls, magnitude, phase, magnitude_cap: float = 2.0) -> "ComplexMask":
        magnitude = np.asarray(magnitude, dtype=np.float64)
        phase = np.broadcast_to(np.asarray(phase, dtype=np.float64), magnitude.shape)
        return cls(magnitude, np.cos(phase), np.sin(phase), magnitude_cap)

    @property
    def shape(self):
        return self.magnitude.shape


# --------------------------------------------------------------------------
# Tensor kernels


@lru_cache(maxsize=16)
def _hann(n: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def hann_window(n: int, dtype=torch.float64) -> torch.Tensor:
    return torch.from_numpy(_hann(n)).to(dtype)


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def stft_tensor(x: torch.Tensor, config: StftConfig, pad: bool = True) -> torch.Tensor:
    """(..., N) real signal → (..., T, F) complex spectrum."""
    n = x.shape[-1]
    if n < 1:
        raise ValueError("cannot analyse an empty signal")
    half = config.window_size // 2
    xp = x[..., torch.from_numpy(_reflect_indices(n, half))]
    frames = xp.unfold(-1, config.window_size, config.hop_size)
    frames = frames[..., : config.n_frames(n), :]
    win = hann_window(config.window_size, x.dtype)
    spec = torch.fft.rfft(frames * win, dim=-1)
    if pad and config.pad_to_frames is not None:
        extra = config.padded_frames(n) - spec.shape[-2]
        if extra:
            spec = F.pad(spec, (0, 0, 0, extra))
    return spec


@lru_cache(maxsize=32)
def _ola_norm(window_size: int, hop: int, n_frames: int) -> np.ndarray:
    w2 = _hann(window_size) ** 2
    total = (n_frames - 1) * hop + window_size
    norm = np.zeros(total)
    for t in range(n_frames):
        norm[t * hop : t * hop + window_size] += w2
    return norm


def istft_tensor(spec: torch.Tensor, config: StftConfig, length: int) -> torch.Tensor:
    """(..., T, F) complex spectrum → (..., length) signal.

    Frames beyond ``ceil(length / hop)`` are padding and are dropped before
    synthesis so that they do not enter the window-power normalisation.
    """
    if spec.shape[-1] != config.n_bins:
        raise ValueError(f"expected {config.n_bins} bins, got {spec.shape[-1]}")
    n_frames = config.n_frames(length)
    if spec.shape[-2] < n_frames:
        raise ValueError(
            f"{spec.shape[-2]} frames cannot cover {length} samples (need {n_frames})"
        )
    spec = spec[..., :n_frames, :]
    half = config.window_size // 2
    norm = _ola_norm(config.window_size, config.hop_size, n_frames)[half : half + length]
    if norm.min() < 1e-10:
        raise ValueError("window-power normalisation vanishes; degenerate STFT config")
    real_dtype = spec.real.dtype
    win = hann_window(config.window_size, real_dtype)
    frames = torch.fft.irfft(spec, n=config.window_size, dim=-1) * win
    lead = frames.shape[:-2]
    frames = frames.reshape(-1, n_frames, config.window_size).transpose(1, 2)
    total = (n_frames - 1) * config.hop_size + config.window_size
    signal = F.fold(
        frames,
        output_size=(1, total),
        kernel_size=(1, config.window_size),
        stride=(1, config.hop_size),
    ).reshape(*lead, total)
    signal = signal[..., half : half + length]
    return signal / torch.from_numpy(norm).to(real_dtype)


# --------------------------------------------------------------------------
# Clip-level wrappers


def _samples_tensor(samples) -> torch.Tensor:
    arr = np.asarray(samples)
    if arr.ndim != 1:
        raise ValueError("expected a mono (1-D) signal")
    if arr.size == 0:
        raise ValueError("cannot analyse an empty signal")
    return torch.from_numpy(arr.astype(np.float64, copy=False))


def stft(clip, config: StftConfig) -> Spectrogram:
    """STFT of an :class:`~usskit.data.AudioClip` (or a bare 1-D array)."""
    samples = getattr(clip, "samples", clip)
    spec = stft_tensor(_samples_tensor(samples), config)
    return Spectrogram(spec.numpy(), config)


def istft(spec: Spectrogram, target_len: int):
    from .data import AudioClip

    out = istft_tensor(torch.from_numpy(spec.values), spec.config, target_len)
    return AudioClip(out.numpy(), spec.config.sample_rate)


def apply_mask(mix_spec: Spectrogram, mask: ComplexMask) -> Spectrogram:
    if mask.shape != mix_spec.shape:
        raise ValueError(f"mask shape {mask.shape} != spectrogram shape {mix_spec.shape}")
    rot = mask.magnitude * (mask.cos + 1j * mask.sin)
    return Spectrogram(rot * mix_spec.values, mix_spec.config)


def apply_mask_tensor(spec: torch.Tensor, magnitude, cos, sin) -> torch.Tensor:
    """Complex product of ``spec`` with the polar mask, on real tensors."""
    re, im = spec.real, spec.imag
    mr, mi = magnitude * cos, magnitude * sin
    return torch.complex(re * mr - im * mi, re * mi + im * mr)


# --------------------------------------------------------------------------
# Mel features


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    lin = f * 3.0 / 200.0
    log = 15.0 + np.log(np.maximum(f, 1e-12) / 1000.0) * 27.0 / np.log(6.4)
    return np.where(f >= 1000.0, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    lin = m * 200.0 / 3.0
    log = 1000.0 * np.exp((m - 15.0) * np.log(6.4) / 27.0)
    return np.where(m >= 15.0, log, lin)


@lru_cache(maxsize=16)
def mel_filterbank(sample_rate: int, window_size: int, n_mels: int) -> np.ndarray:
    """(n_mels, F) triangular filters spanning 0 Hz to Nyquist, unit area each."""
    n_bins = window_size // 2 + 1
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if n_mels > n_bins:
        raise ValueError(f"n_mels={n_mels} exceeds the {n_bins} STFT bins")
    fft_hz = np.linspace(0.0, sample_rate / 2.0, n_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        rise = (fft_hz - lo) / (mid - lo)
        fall = (hi - fft_hz) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(rise, fall)) * (2.0 / (hi - lo))
    fb.setflags(write=False)
    return fb


def log_mel_tensor(x: torch.Tensor, config: StftConfig, n_mels: int) -> torch.Tensor:
    """(..., N) signal → (..., T, n_mels) log mel power (no padding frames)."""
    spec = stft_tensor(x, config, pad=False)
    power = spec.real**2 + spec.imag**2
    fb = torch.from_numpy(np.array(mel_filterbank(config.sample_rate, config.window_size, n_mels)))
    mel = power @ fb.to(power.dtype).T
    return torch.log(mel + LOG_FLOOR)


def mel_spectrogram(clip, n_mels: int, config: StftConfig) -> np.ndarray:
    samples = getattr(clip, "samples", clip)
    return log_mel_tensor(_samples_tensor(samples), config, n_mels).numpy()


# --------------------------------------------------------------------------
# Spectrogram dump (for external plotting)

DUMP_MAGIC = "USSKIT-SPEC 1"


def dump_spectrogram(spec: Spectrogram, path) -> None:
    """Header line + row-major interleaved (real, imag) little-endian doubles."""
    t, f = spec.shape
    header = {"T": t, "F": f, "config": asdict(spec.config)}
    body = np.empty((t, f, 2), dtype="<f8")
    body[..., 0] = spec.values.real
    body[..., 1] = spec.values.imag
    data = f"{DUMP_MAGIC} {json.dumps(header, sort_keys=True)}\n".encode() + body.tobytes()
    Path(path).write_bytes(data)


def load_spectrogram(path) -> Spectrogram:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    line = data[:nl].decode()
    if not line.startswith(DUMP_MAGIC + " "):
        raise ValueError(f"{path}: not a spectrogram dump")
    header = json.loads(line[len(DUMP_MAGIC) + 1 :])
    t, f = header["T"], header["F"]
    body = np.frombuffer(data, dtype="<f8", offset=nl + 1)
    if body.size != t * f * 2:
        raise ValueError(f"{path}: payload holds {body.size} doubles, expected {t * f * 2}")
    body = body.reshape(t, f, 2)
    return Spectrogram(body[..., 0] + 1j * body[..., 1], StftConfig(**header["config"]))

