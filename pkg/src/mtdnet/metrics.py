"""Frame-level evaluation: MSE, Pearson, ICC(3,1), rounded accuracy, LOSO protocol."""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .data import MAX_INTENSITY, VideoSample, clips_from_samples, split_leave_one_subject_out, stack_clips, subjects_of
from .errors import UndefinedMetricError
from .network import NetworkSpec, build_network, with_seed
from .optim import Sgd, SgdConfig, fit, init_output_bias
from .tensor import derive_seed, make_rng


def _pair(pred, target, min_len: int = 1):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions, {target.size} targets")
    if pred.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {pred.size}")
    return pred, target


def mse(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.mean((pred - target) ** 2))


def pearson(pred, target) -> float:
    pred, target = _pair(pred, target, 2)
    a, b = pred - pred.mean(), target - target.mean()
    sa, sb = np.sqrt(np.mean(a * a)), np.sqrt(np.mean(b * b))
    if sa == 0 or sb == 0:
        raise UndefinedMetricError("Pearson correlation undefined for a constant vector")
    return float(np.clip(np.mean(a * b) / (sa * sb), -1.0, 1.0))


def icc_matrix(ratings) -> float:
    """ICC(3,1): two-way mixed, consistency, single measure.

    ``ratings`` is (n targets, k raters). Uses the ANOVA mean squares
    (BMS - EMS) / (BMS + (k - 1) * EMS).
    """
    Y = np.asarray(ratings, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] < 2 or Y.shape[1] < 2:
        raise ValueError(f"need at least 2 targets and 2 raters, got shape {Y.shape}")
    n, k = Y.shape
    grand = Y.mean()
    ss_rows = k * np.sum((Y.mean(axis=1) - grand) ** 2)
    ss_cols = n * np.sum((Y.mean(axis=0) - grand) ** 2)
    ss_err = np.sum((Y - grand) ** 2) - ss_rows - ss_cols
    bms = ss_rows / (n - 1)
    ems = max(ss_err, 0.0) / ((n - 1) * (k - 1))
    if bms == 0:
        raise UndefinedMetricError("ICC undefined: no between-target variance")
    return float((bms - ems) / (bms + (k - 1) * ems))


def icc(pred, target) -> float:
    pred, target = _pair(pred, target, 2)
    return icc_matrix(np.column_stack([pred, target]))


def accuracy(pred, target) -> float:
    """Fraction of frames whose clamped, rounded prediction equals the rounded target."""
    pred, target = _pair(pred, target)
    hit = np.rint(np.clip(pred, 0.0, MAX_INTENSITY)) == np.rint(target)
    return float(np.mean(hit))


# -- reports -----------------------------------------------------------------------

class PredictionRow(NamedTuple):
    subject: str
    video: str
    frame: int
    target: float
    prediction: float


@dataclass
class SubjectCount:
    subject: str
    correct: int
    total: int


@dataclass
class EvalReport:
    mse: float
    pcc: float | None
    icc: float | None
    accuracy: float
    per_subject: list[SubjectCount]
    skipped_videos: int = 0
    undefined: dict[str, str] = field(default_factory=dict)
    predictions: list[PredictionRow] = field(default_factory=list, repr=False)

    @property
    def frames(self) -> int:
        return sum(s.total for s in self.per_subject)

    def as_row(self) -> dict[str, str]:
        fmt = lambda v: "undefined" if v is None else repr(float(v))  # noqa: E731
        return {"mse": fmt(self.mse), "pcc": fmt(self.pcc), "icc": fmt(self.icc),
                "accuracy": fmt(self.accuracy), "frames": str(self.frames),
                "skipped_videos": str(self.skipped_videos)}

    def to_text(self, title: str = "evaluation") -> str:
        row = self.as_row()
        lines = [title, "-" * len(title)]
        lines += [f"{k:<15}{v}" for k, v in row.items()]
        for name, why in self.undefined.items():
            lines.append(f"note: {name} undefined ({why})")
        lines.append("")
        lines.append(f"{'subject':<10}{'correct':>9}{'total':>9}")
        lines += [f"{s.subject:<10}{s.correct:>9}{s.total:>9}" for s in self.per_subject]
        return "\n".join(lines) + "\n"


def report_from_rows(rows: Sequence[PredictionRow], skipped_videos: int = 0) -> EvalReport:
    """Metrics as a pure function of a prediction dump."""
    if not rows:
        raise ValueError("no predictions to evaluate")
    pred = np.array([r.prediction for r in rows])
    target = np.array([r.target for r in rows])
    undefined = {}
    values = {}
    for name, fn in (("pcc", pearson), ("icc", icc)):
        try:
            values[name] = fn(pred, target)
        except (UndefinedMetricError, ValueError) as exc:
            values[name] = None
            undefined[name] = str(exc)
    hits = np.rint(np.clip(pred, 0.0, MAX_INTENSITY)) == np.rint(target)
    per_subject = []
    subjects = np.array([r.subject for r in rows])
    for s in sorted(set(subjects)):
        mask = subjects == s
        per_subject.append(SubjectCount(s, int(hits[mask].sum()), int(mask.sum())))
    return EvalReport(mse(pred, target), values["pcc"], values["icc"], accuracy(pred, target),
                      per_subject, skipped_videos, undefined, list(rows))


def evaluate(net, samples: Sequence[VideoSample], depth: int | None = None, stride: int = 1,
             batch_size: int = 64) -> EvalReport:
    if not samples:
        raise ValueError("no samples to evaluate")
    depth = net.spec.input_temporal_depth if depth is None else depth
    clips, skipped = clips_from_samples(samples, depth, stride)
    if not clips:
        raise ValueError("no clip could be extracted from the samples")
    x, _ = stack_clips(clips)
    pred = net.predict(x, batch_size)
    rows = [PredictionRow(c.subject_id, c.video_id, c.frame, c.target, float(p))
            for c, p in zip(clips, pred)]
    return report_from_rows(rows, skipped)


# -- files -------------------------------------------------------------------------

DUMP_HEADER = ["subject", "video", "frame", "target", "prediction"]


def write_predictions(rows: Iterable[PredictionRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(DUMP_HEADER)
        for r in rows:
            w.writerow([r.subject, r.video, r.frame, repr(float(r.target)), repr(float(r.prediction))])


def read_predictions(path) -> list[PredictionRow]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != DUMP_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [PredictionRow(s, v, int(fr), float(t), float(p)) for s, v, fr, t, p in reader]


def write_report(report: EvalReport, out_dir, stem: str = "report", title: str = "evaluation") -> None:
    out = Path(out_dir)
    (out / f"{stem}.txt").write_text(report.to_text(title))
    row = report.as_row()
    with open(out / f"{stem}.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(row))
        w.writerow(list(row.values()))
    with open(out / f"{stem}_per_subject.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["subject", "correct", "total"])
        for s in report.per_subject:
            w.writerow([s.subject, s.correct, s.total])


# -- leave-one-subject-out -------------------------------------------------------------

@dataclass
class LosoResult:
    folds: list[tuple[str, EvalReport]]
    pooled: EvalReport


def train_network(spec: NetworkSpec, samples: Sequence[VideoSample], cfg: SgdConfig,
                  seed: int, clip_stride: int = 1):
    clips, _ = clips_from_samples(samples, spec.input_temporal_depth, clip_stride)
    if not clips:
        raise ValueError("no training clips")
    x, y = stack_clips(clips)
    net = build_network(with_seed(spec, derive_seed(seed, "init")))
    init_output_bias(net, y, cfg)
    opt = Sgd(net.parameters(), cfg)
    fit(net, x, y, opt, make_rng(derive_seed(seed, "shuffle")))
    return net


def run_fold(spec: NetworkSpec, samples: Sequence[VideoSample], subject: str, cfg: SgdConfig,
             seed: int, clip_stride: int = 1) -> EvalReport:
    """Train a fresh network without ``subject`` and evaluate on it."""
    train, test = split_leave_one_subject_out(samples, subject)
    net = train_network(spec, train, cfg, derive_seed(seed, "fold", subject), clip_stride)
    return evaluate(net, test, spec.input_temporal_depth, clip_stride)


def run_loso(spec: NetworkSpec, samples: Sequence[VideoSample], cfg: SgdConfig, seed: int = 0,
             clip_stride: int = 1, jobs: int = 1) -> LosoResult:
    subjects = subjects_of(samples)
    if len(subjects) < 2:
        raise ValueError("leave-one-subject-out needs at least two subjects")
    args = [(spec, samples, s, cfg, seed, clip_stride) for s in subjects]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(run_fold, *zip(*args)))
    else:
        reports = [run_fold(*a) for a in args]
    folds = list(zip(subjects, reports))
    rows = [r for _, rep in folds for r in rep.predictions]
    pooled = report_from_rows(rows, sum(rep.skipped_videos for _, rep in folds))
    return LosoResult(folds, pooled)
