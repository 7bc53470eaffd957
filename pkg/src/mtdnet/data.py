"""Videos with frame-level intensity labels, clip extraction and dataset I/O.

On-disk layout::

    root/<subject_id>/<video_id>/frames.mtd5   # tensor of shape (1, C, T, H, W)
    root/<subject_id>/<video_id>/labels.csv    # header "frame,intensity", one row per frame
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError
from .tensor import load_tensor, save_tensor

log = logging.getLogger(__name__)

MAX_INTENSITY = 15.0
PERIODS = (4.0, 16.0, 64.0)


@dataclass
class VideoSample:
    subject_id: str
    video_id: str
    frames: np.ndarray  # (1, C, T, H, W)
    labels: np.ndarray  # (T,)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.frames.ndim != 5 or self.frames.shape[0] != 1:
            raise ValueError(f"{self.key}: frames must have shape (1, C, T, H, W)")
        if len(self.labels) != self.n_frames:
            raise ValueError(
                f"{self.key}: {len(self.labels)} labels for {self.n_frames} frames")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() > MAX_INTENSITY):
            raise ValueError(f"{self.key}: labels outside [0, {MAX_INTENSITY:g}]")

    @property
    def key(self) -> str:
        return f"{self.subject_id}/{self.video_id}"

    @property
    def n_frames(self) -> int:
        return self.frames.shape[2]


@dataclass
class Clip:
    frames: np.ndarray  # (1, C, depth, H, W), a view into the video
    target: float
    subject_id: str
    video_id: str
    offset: int  # first frame of the window
    frame: int  # labelled (centre) frame


def extract_clips(video: VideoSample, depth: int = 32, stride: int = 1) -> list[Clip]:
    """Sliding windows of ``depth`` frames; each targets its centre frame label.

    Videos shorter than ``depth`` yield no clips (a warning is logged).
    """
    if depth < 1 or stride < 1:
        raise ValueError("depth and stride must be >= 1")
    if video.n_frames < depth:
        log.warning("skipping %s: %d frames < clip depth %d", video.key, video.n_frames, depth)
        return []
    centre = depth // 2
    return [
        Clip(video.frames[:, :, s:s + depth], float(video.labels[s + centre]),
             video.subject_id, video.video_id, s, s + centre)
        for s in range(0, video.n_frames - depth + 1, stride)
    ]


def clips_from_samples(samples: Iterable[VideoSample], depth: int = 32,
                       stride: int = 1) -> tuple[list[Clip], int]:
    """All clips of all videos plus the number of videos skipped as too short."""
    clips, skipped = [], 0
    for v in samples:
        got = extract_clips(v, depth, stride)
        skipped += not got
        clips.extend(got)
    return clips, skipped


def stack_clips(clips: Sequence[Clip]) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([c.frames for c in clips], axis=0)
    y = np.array([c.target for c in clips], dtype=np.float64)
    return x, y


def subjects_of(samples: Iterable[VideoSample]) -> list[str]:
    return sorted({s.subject_id for s in samples})


def split_leave_one_subject_out(samples: Sequence[VideoSample], held_out: str):
    if held_out not in {s.subject_id for s in samples}:
        raise ValueError(f"unknown subject {held_out!r}")
    train = [s for s in samples if s.subject_id != held_out]
    test = [s for s in samples if s.subject_id == held_out]
    return train, test


# -- synthetic multi-timescale videos ----------------------------------------------

@dataclass
class SyntheticSpec:
    subjects: int = 25
    videos_per_subject: int = 8
    frames_per_video: int = 200
    spatial: tuple[int, int] = (16, 16)
    timescale_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.spatial = tuple(int(s) for s in self.spatial)
        self.timescale_mix = tuple(float(w) for w in self.timescale_mix)

    def validate(self) -> None:
        if min(self.subjects, self.videos_per_subject, self.frames_per_video) < 1:
            raise ValueError("subjects, videos_per_subject and frames_per_video must be >= 1")
        if len(self.timescale_mix) != 3 or min(self.timescale_mix) < 0:
            raise ValueError("timescale_mix needs three non-negative weights")
        if not math.isclose(sum(self.timescale_mix), 1.0, abs_tol=1e-9):
            raise ValueError(f"timescale_mix must sum to 1, got {sum(self.timescale_mix)}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def latent_intensity(t: np.ndarray, mix, phases) -> np.ndarray:
    """Weighted sum of sinusoids with periods 4, 16 and 64 frames, mapped to [0, 15]."""
    s = sum(w * np.sin(2 * np.pi * t / p + ph) for w, p, ph in zip(mix, PERIODS, phases))
    return np.clip(0.5 * MAX_INTENSITY * (1.0 + s), 0.0, MAX_INTENSITY)


def _render(labels: np.ndarray, geometry: dict, spatial, noise_std: float, rng) -> np.ndarray:
    H, W = spatial
    T = len(labels)
    t = np.arange(T)[:, None, None]
    yy = np.arange(H)[None, :, None]
    xx = np.arange(W)[None, None, :]
    g = geometry
    cy = g["cy"] + g["orbit"] * np.sin(2 * np.pi * t / g["orbit_period"] + g["orbit_phase"])
    cx = g["cx"] + g["orbit"] * np.cos(2 * np.pi * t / g["orbit_period"] + g["orbit_phase"])
    e = labels[:, None, None] / MAX_INTENSITY
    # intensity stretches the blob along its major axis and squeezes the minor one
    sx = g["sx"] * (1.0 + 0.8 * e)
    sy = g["sy"] * (1.0 - 0.1 * e)
    c, s = math.cos(g["angle"]), math.sin(g["angle"])
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    img = g["amp"] * np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)[None, None]


def generate_synthetic(spec: SyntheticSpec) -> list[VideoSample]:
    """Deterministic synthetic dataset; subject identity lives in blob geometry and phase."""
    spec.validate()
    H, W = spec.spatial
    scale = min(H, W) / 16.0
    root = np.random.SeedSequence(spec.seed)
    samples = []
    for si, subject_seq in enumerate(root.spawn(spec.subjects)):
        srng = np.random.Generator(np.random.PCG64(subject_seq))
        geometry = {
            "cy": (H - 1) / 2 + srng.uniform(-1, 1) * scale,
            "cx": (W - 1) / 2 + srng.uniform(-1, 1) * scale,
            "sx": srng.uniform(1.8, 2.2) * scale,
            "sy": srng.uniform(1.8, 2.2) * scale,
            "angle": np.pi / 4 + srng.uniform(-0.25, 0.25),
            "amp": srng.uniform(0.8, 0.95),
            "orbit": srng.uniform(0.5, 1.5) * scale,
            "orbit_period": srng.uniform(40, 90),
        }
        subject_phase = srng.uniform(0, 2 * np.pi, size=3)
        for vi, video_seq in enumerate(subject_seq.spawn(spec.videos_per_subject)):
            vrng = np.random.Generator(np.random.PCG64(video_seq))
            phases = subject_phase + vrng.uniform(-np.pi / 2, np.pi / 2, size=3)
            geometry["orbit_phase"] = vrng.uniform(0, 2 * np.pi)
            labels = latent_intensity(np.arange(spec.frames_per_video), spec.timescale_mix, phases)
            frames = _render(labels, geometry, spec.spatial, spec.noise_std, vrng)
            samples.append(VideoSample(f"s{si + 1:02d}", f"v{vi + 1:02d}", frames, labels))
    return samples


# -- dataset I/O -------------------------------------------------------------------

def save_dataset(samples: Iterable[VideoSample], root) -> None:
    root = Path(root)
    for s in samples:
        d = root / s.subject_id / s.video_id
        d.mkdir(parents=True, exist_ok=True)
        save_tensor(d / "frames.mtd5", s.frames)
        with open(d / "labels.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["frame", "intensity"])
            for i, lab in enumerate(s.labels):
                w.writerow([i, repr(float(lab))])


def _read_labels(path: Path, key: str) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or [c.strip() for c in rows[0]] != ["frame", "intensity"]:
        raise FormatError(f"{key}: labels.csv must start with header 'frame,intensity'")
    values = []
    for n, row in enumerate(rows[1:]):
        try:
            frame, value = int(row[0]), float(row[1])
        except (IndexError, ValueError) as exc:
            raise FormatError(f"{key}: bad labels row {n + 2}: {row}") from exc
        if frame != n:
            raise FormatError(f"{key}: labels row {n + 2} has frame {frame}, expected {n}")
        values.append(value)
    return np.array(values, dtype=np.float64)


def load_dataset(root) -> list[VideoSample]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    samples = []
    for subject in sorted(p for p in root.iterdir() if p.is_dir()):
        for video in sorted(p for p in subject.iterdir() if p.is_dir()):
            key = f"{subject.name}/{video.name}"
            frames_path, labels_path = video / "frames.mtd5", video / "labels.csv"
            if not labels_path.is_file():
                raise FormatError(f"{key}: missing labels.csv")
            if not frames_path.is_file():
                raise FormatError(f"{key}: missing frames.mtd5")
            frames = load_tensor(frames_path)
            labels = _read_labels(labels_path, key)
            if frames.shape[0] != 1 or len(labels) != frames.shape[2]:
                raise FormatError(
                    f"{key}: {len(labels)} labels for frames of shape {frames.shape}")
            try:
                samples.append(VideoSample(subject.name, video.name, frames, labels))
            except ValueError as exc:
                raise FormatError(str(exc)) from exc
    return samples
