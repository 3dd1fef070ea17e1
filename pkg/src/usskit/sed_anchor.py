"""Frame-wise event probabilities and anchor-segment mining."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import AudioClip

DEFAULT_FRAME_RATE = 100.0
ANCHOR_FRAMES = 200
# Window sums closer than this are treated as ties (earliest start wins).
TIE_TOLERANCE = 1e-9


@dataclass
class ProbabilityMap:
    probs: np.ndarray  # (T, K)
    frame_rate: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError("probability map must be (T, K)")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def n_frames(self) -> int:
        return self.probs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]


@dataclass
class AnchorSegment:
    clip_path: str
    class_id: int
    start_frame: int
    length_frames: int
    score: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def resample_activity(activity: np.ndarray, src_rate: float, dst_rate: float) -> np.ndarray:
    """Nearest-frame resampling: each output frame takes the source frame
    that contains its centre time."""
    activity = np.asarray(activity)
    if src_rate == dst_rate:
        return activity.astype(np.float64)
    n_out = int(round(len(activity) * dst_rate / src_rate))
    centres = (np.arange(n_out) + 0.5) / dst_rate
    # the epsilon keeps centres that land exactly on a frame edge in the later frame
    idx = np.minimum(np.floor(centres * src_rate + 1e-9).astype(np.int64), len(activity) - 1)
    return activity[idx].astype(np.float64)


def oracle_sed(clip: AudioClip, n_classes: int, frame_rate: float = DEFAULT_FRAME_RATE) -> ProbabilityMap:
    """Probability map read straight off the clip's synthesis activity track."""
    if clip.activity is None:
        raise ValueError(f"clip {clip.name!r} has no activity track")
    if clip.label is None or not 0 <= clip.label < n_classes:
        raise ValueError(f"clip {clip.name!r} has no usable label")
    track = resample_activity(clip.activity, clip.activity_rate, frame_rate)
    probs = np.zeros((len(track), n_classes))
    probs[:, clip.label] = track
    return ProbabilityMap(probs, frame_rate)


def window_means(column: np.ndarray, window: int) -> np.ndarray:
    """Mean of every length-``window`` run, via prefix sums (O(T))."""
    csum = np.concatenate([[0.0], np.cumsum(column, dtype=np.float64)])
    return (csum[window:] - csum[:-window]) / window


def mine_anchor(
    pmap: ProbabilityMap,
    class_id: int,
    window_frames: int = ANCHOR_FRAMES,
    clip_path: str = "",
) -> AnchorSegment | None:
    """Window with the highest mean probability for ``class_id``.

    Returns ``None`` when the class column is all zero; callers skip the
    clip. Ties go to the earliest start.
    """
    if not 0 <= class_id < pmap.n_classes:
        raise ValueError(f"class {class_id} outside map with {pmap.n_classes} classes")
    if not 1 <= window_frames <= pmap.n_frames:
        raise ValueError(f"window of {window_frames} frames does not fit {pmap.n_frames} frames")
    col = pmap.probs[:, class_id]
    if not np.any(col > 0):
        return None
    means = window_means(col, window_frames)
    best = means.max()
    start = int(np.flatnonzero(means >= best - TIE_TOLERANCE)[0])
    return AnchorSegment(clip_path, class_id, start, window_frames, float(means[start]))


def extract_segment(clip: AudioClip, anchor: AnchorSegment,
                    frame_rate: float = DEFAULT_FRAME_RATE) -> AudioClip:
    """Waveform under the anchor window, zero-padded to full length at the tail."""
    hop = clip.sample_rate / frame_rate
    start = int(round(anchor.start_frame * hop))
    length = int(round(anchor.length_frames * hop))
    if anchor.start_frame < 0 or start >= len(clip):
        raise ValueError(
            f"anchor start frame {anchor.start_frame} outside clip of {len(clip)} samples"
        )
    seg = clip.samples[start : start + length]
    if seg.shape[0] < length:
        seg = np.pad(seg, (0, length - seg.shape[0]))
    return AudioClip(np.array(seg), clip.sample_rate, anchor.class_id,
                     name=f"{clip.name}@{anchor.start_frame}")


def save_anchors(anchors, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(a.to_json() + "\n" for a in anchors))


def load_anchors(path) -> list[AnchorSegment]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"anchor list not found: {path}")
    out = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if line.strip():
            try:
                out.append(AnchorSegment(**json.loads(line)))
            except (TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{ln}: bad anchor record ({exc})") from None
    return out
