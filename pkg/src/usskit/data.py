"""Synthetic sound corpus, WAV I/O, manifests and resampling.

Six generator families stand in for a weakly labelled audio dataset. Each
clip holds events of a single class separated by true silence, and carries
the frame-level activity track used to synthesise it (100 frames/s), which
doubles as ground-truth event detection output.

Default classes occupy separate regions of the 0-4 kHz band so that they
survive resampling to 8 kHz:

    sine            steady tone, 400-600 Hz
    chirp           linear upward sweep inside 1200-2000 Hz
    square          odd harmonics of a 100-160 Hz fundamental (1/n roll-off)
    am_noise        2600-3400 Hz noise band, 3-6 Hz amplitude modulation
    filtered_noise  700-1000 Hz noise band, steady
    click_train     8-20 Hz train of 2 ms decaying broadband clicks
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

logger = logging.getLogger(__name__)

SUPPORTED_RATES = (8000, 16000, 22050, 24000, 32000, 44100, 48000)
ACTIVITY_RATE = 100.0

WAVE_FORMAT_PCM = 1
WAVE_FORMAT_IEEE_FLOAT = 3
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    label: int | None = None
    activity: np.ndarray | None = None
    activity_rate: float = ACTIVITY_RATE
    name: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise ValueError(f"AudioClip must be mono, got shape {self.samples.shape}")
        if self.sample_rate not in SUPPORTED_RATES:
            raise ValueError(f"unsupported sample rate {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if len(self) else 0.0


# --------------------------------------------------------------------------
# WAV I/O


def write_wav(clip: AudioClip, path, fmt: str = "float32") -> None:
    """RIFF/WAVE writer for mono PCM16 or IEEE float32."""
    path = Path(path)
    if fmt == "float32":
        data = clip.samples.astype("<f4").tobytes()
        code, bits = WAVE_FORMAT_IEEE_FLOAT, 32
    elif fmt == "pcm16":
        scaled = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767.0)
        data = scaled.astype("<i2").tobytes()
        code, bits = WAVE_FORMAT_PCM, 16
    else:
        raise ValueError(f"unsupported WAV format {fmt!r}")
    block = bits // 8
    fmt_chunk = struct.pack(
        "<HHIIHH", code, 1, clip.sample_rate, clip.sample_rate * block, block, bits
    )
    chunks = b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk
    if code == WAVE_FORMAT_IEEE_FLOAT:
        chunks += b"fact" + struct.pack("<II", 4, len(clip))
    chunks += b"data" + struct.pack("<I", len(data)) + data
    if len(data) % 2:
        chunks += b"\x00"
    riff = b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(riff)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_wav(path) -> AudioClip:
    """Read PCM16 or float32 WAV, 1-2 channels; stereo is averaged to mono."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4 : pos + 8])
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavError(f"{path}: chunk {cid!r} truncated")
        if cid == b"fmt ":
            if size < 16:
                raise WavError(f"{path}: fmt chunk too short ({size} bytes)")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == WAVE_FORMAT_EXTENSIBLE and size >= 40:
                (sub,) = struct.unpack("<H", body[24:26])
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            data = body
        pos += 8 + size + (size % 2)
    if fmt is None:
        raise WavError(f"{path}: missing fmt chunk")
    if data is None:
        raise WavError(f"{path}: missing data chunk")
    code, channels, rate, _, block_align, bits = fmt
    if channels not in (1, 2):
        raise WavError(f"{path}: {channels} channels not supported (1 or 2)")
    if code == WAVE_FORMAT_PCM and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float32) / 32768.0
    elif code == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float32)
    else:
        raise WavError(f"{path}: unsupported codec (format {code}, {bits} bits)")
    if samples.size % channels:
        raise WavError(f"{path}: data size not a multiple of the frame size")
    if channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1, dtype=np.float32)
    if rate not in SUPPORTED_RATES:
        raise WavError(f"{path}: unsupported sample rate {rate}")
    return AudioClip(np.ascontiguousarray(samples), rate, name=path.stem)


# --------------------------------------------------------------------------
# Resampling


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase windowed-sinc resampling between supported rates."""
    if target_rate not in SUPPORTED_RATES or clip.sample_rate not in SUPPORTED_RATES:
        raise ValueError(f"unsupported ratio {clip.sample_rate} -> {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), target_rate, clip.label, clip.activity,
                         clip.activity_rate, clip.name)
    ratio = Fraction(target_rate, clip.sample_rate)
    out = resample_poly(clip.samples.astype(np.float64), ratio.numerator, ratio.denominator,
                        padtype="line")
    n_out = int(round(len(clip) * target_rate / clip.sample_rate))
    if out.shape[0] < n_out:
        out = np.pad(out, (0, n_out - out.shape[0]))
    out = out[:n_out].astype(clip.samples.dtype if clip.samples.dtype.kind == "f" else np.float64)
    return AudioClip(out, target_rate, clip.label, clip.activity, clip.activity_rate, clip.name)


# --------------------------------------------------------------------------
# Manifest


@dataclass
class ManifestRecord:
    path: str
    class_id: int
    class_name: str
    sample_rate: int
    duration: float


@dataclass
class Manifest:
    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def n_classes(self) -> int:
        return len({r.class_id for r in self.records})

    def class_names(self) -> dict[int, str]:
        return {r.class_id: r.class_name for r in self.records}

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def save(self, path) -> None:
        path = Path(path)
        lines = [
            json.dumps(
                {
                    "path": r.path,
                    "class_id": r.class_id,
                    "class_name": r.class_name,
                    "sample_rate": r.sample_rate,
                    "duration": r.duration,
                }
            )
            for r in self.records
        ]
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, check_paths: bool = True) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        records = []
        for ln, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                records.append(
                    ManifestRecord(d["path"], int(d["class_id"]), d["class_name"],
                                   int(d["sample_rate"]), float(d["duration"]))
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{ln}: bad manifest record ({exc})") from None
        man = cls(records, path.parent)
        ids = sorted({r.class_id for r in records})
        if ids != list(range(len(ids))):
            raise ValueError(f"{path}: class ids are not dense in [0, K): {ids}")
        if check_paths:
            missing = [r.path for r in records if not man.resolve(r).exists()]
            if missing:
                raise FileNotFoundError(f"{path}: {len(missing)} missing clips, e.g. {missing[0]}")
        return man


def activity_path(wav_path: Path) -> Path:
    return wav_path.with_suffix(".activity.npy")


def load_clip(manifest: Manifest, record: ManifestRecord) -> AudioClip:
    """Load one manifest entry together with its activity track, if present."""
    wav = manifest.resolve(record)
    clip = read_wav(wav)
    clip.label = record.class_id
    clip.name = Path(record.path).stem
    act = activity_path(wav)
    if act.exists():
        clip.activity = np.load(act)
    return clip


# --------------------------------------------------------------------------
# Synthesis


@dataclass(frozen=True)
class SynthClass:
    name: str
    kind: str
    params: dict = field(default_factory=dict, hash=False)
    duty: tuple[float, float] = (0.4, 0.8)

    KINDS = ("sine", "chirp", "square", "am_noise", "filtered_noise", "click_train")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        lo, hi = self.duty
        if not 0.3 <= lo <= hi <= 0.9:
            raise ValueError("duty cycle must lie within [0.3, 0.9]")


DEFAULT_CLASSES = (
    SynthClass("sine", "sine", {"freq": (400.0, 600.0)}),
    SynthClass("chirp", "chirp", {"start": (1200.0, 1400.0), "stop": (1800.0, 2000.0)}),
    SynthClass("square", "square", {"f0": (100.0, 160.0), "max_hz": 3600.0}),
    SynthClass("am_noise", "am_noise", {"band": (2600.0, 3400.0), "rate": (3.0, 6.0)}),
    SynthClass("filtered_noise", "filtered_noise", {"band": (700.0, 1000.0)}),
    SynthClass("click_train", "click_train", {"rate": (8.0, 20.0), "decay_s": 0.002,
                                               "max_hz": 3800.0}),
)


def _band_noise(rng, n: int, sr: int, lo: float, hi: float) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spec, n)


def _event_signal(cls: SynthClass, rng, n: int, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    p = cls.params
    if cls.kind == "sine":
        f = rng.uniform(*p["freq"])
        return np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    if cls.kind == "chirp":
        f0, f1 = rng.uniform(*p["start"]), rng.uniform(*p["stop"])
        dur = max(t[-1], 1.0 / sr)
        phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / dur * t**2)
        return np.sin(phase)
    if cls.kind == "square":
        f0 = rng.uniform(*p["f0"])
        out = np.zeros(n)
        k = 1
        while k * f0 <= p["max_hz"]:
            out += np.sin(2 * np.pi * k * f0 * t) / k
            k += 2
        return out
    if cls.kind == "am_noise":
        carrier = _band_noise(rng, n, sr, *p["band"])
        rate = rng.uniform(*p["rate"])
        env = (1.0 + 0.9 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))) / 1.9
        return carrier * env
    if cls.kind == "filtered_noise":
        return _band_noise(rng, n, sr, *p["band"])
    # click_train
    rate = rng.uniform(*p["rate"])
    period = int(sr / rate)
    click_len = min(n, int(10 * p["decay_s"] * sr))
    out = np.zeros(n)
    start = int(rng.integers(0, max(period, 1)))
    for pos in range(start, n, period):
        m = min(click_len, n - pos)
        burst = rng.standard_normal(m) * np.exp(-np.arange(m) / (p["decay_s"] * sr))
        out[pos : pos + m] += burst
    spec = np.fft.rfft(out)
    spec[np.fft.rfftfreq(n, 1.0 / sr) > p["max_hz"]] = 0.0
    return np.fft.irfft(spec, n)


def _activity_track(rng, n_frames: int, duty: tuple[float, float]) -> np.ndarray:
    """0/1 track with 1-3 events covering a duty-cycle fraction of frames."""
    frac = rng.uniform(*duty)
    active = int(round(frac * n_frames))
    k = int(rng.integers(1, 4))
    min_event = 30
    k = max(1, min(k, active // min_event))
    ev = min_event + np.floor(rng.dirichlet(np.ones(k)) * (active - k * min_event)).astype(int)
    ev[0] += active - ev.sum()
    gaps = np.floor(rng.dirichlet(np.ones(k + 1)) * (n_frames - active)).astype(int)
    gaps[-1] += (n_frames - active) - gaps.sum()
    track = np.zeros(n_frames, dtype=np.uint8)
    pos = 0
    for i in range(k):
        pos += gaps[i]
        track[pos : pos + ev[i]] = 1
        pos += ev[i]
    return track


def synthesize_clip(cls: SynthClass, class_id: int, rng, clip_len_s: float,
                    sample_rate: int) -> AudioClip:
    n = int(round(clip_len_s * sample_rate))
    hop = int(round(sample_rate / ACTIVITY_RATE))
    n_frames = -(-n // hop)
    track = _activity_track(rng, n_frames, cls.duty)
    out = np.zeros(n)
    fade = max(1, int(0.01 * sample_rate))
    edges = np.flatnonzero(np.diff(np.concatenate([[0], track, [0]])))
    for on, off in zip(edges[::2], edges[1::2]):
        a, b = on * hop, min(off * hop, n)
        if b <= a:
            continue
        sig = _event_signal(cls, rng, b - a, sample_rate)
        env = np.ones(b - a)
        f = min(fade, (b - a) // 2)
        if f:
            ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(f) / f)
            env[:f] = ramp
            env[-f:] = ramp[::-1]
        sig = sig * env
        peak = np.max(np.abs(sig))
        if peak > 0:
            out[a:b] = sig / peak * rng.uniform(0.3, 0.9)
    return AudioClip(out.astype(np.float32), sample_rate, class_id, track, ACTIVITY_RATE)


def synthesize_corpus(
    classes,
    clips_per_class: int,
    clip_len_s: float,
    seed: int,
    out_dir,
    sample_rate: int = 32000,
    fmt: str = "pcm16",
    manifest_name: str = "manifest.jsonl",
) -> Manifest:
    """Write ``clips_per_class`` clips of every class plus a JSON-lines manifest.

    Clip ``j`` of class ``k`` is drawn from its own generator seeded with
    ``(seed, k, j)``, so output is reproducible bit for bit.
    """
    classes = list(classes)
    if len(classes) < 2:
        raise ValueError("a corpus needs at least 2 classes")
    if clip_len_s < 2.0:
        raise ValueError("clips must be at least as long as a 2 s anchor")
    out_dir = Path(out_dir)
    records = []
    for k, cls in enumerate(classes):
        for j in range(clips_per_class):
            rng = np.random.default_rng([seed, k, j])
            clip = synthesize_clip(cls, k, rng, clip_len_s, sample_rate)
            rel = Path(cls.name) / f"{cls.name}_{j:04d}.wav"
            wav = out_dir / rel
            write_wav(clip, wav, fmt)
            np.save(activity_path(wav), clip.activity)
            records.append(ManifestRecord(rel.as_posix(), k, cls.name, sample_rate,
                                          clip_len_s))
    manifest = Manifest(records, out_dir)
    manifest.save(out_dir / manifest_name)
    logger.info("wrote %d clips to %s", len(records), out_dir)
    return manifest
