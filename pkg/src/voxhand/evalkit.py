"""Good-frame fractions and per-joint mean errors for predicted joint sets."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import EmptyEvaluation, InvalidSpec, JointMismatch

TABLE_THRESHOLDS = (20.0, 40.0, 50.0)
CURVE_MAX = 80.0


@dataclass(frozen=True, eq=False)
class FrameErrors:
    names: tuple
    errors: np.ndarray

    def __post_init__(self):
        e = np.array(self.errors, dtype=np.float64).reshape(-1)
        if len(e) != len(self.names):
            raise JointMismatch(f"{len(self.names)} names but {len(e)} errors")
        if np.any(~np.isfinite(e)) or np.any(e < 0):
            raise InvalidSpec("joint errors must be finite and >= 0")
        e.setflags(write=False)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "errors", e)

    @property
    def max(self):
        return float(self.errors.max()) if len(self.errors) else 0.0


@dataclass(frozen=True)
class EvalSummary:
    thresholds: tuple
    fractions: tuple
    joint_names: tuple
    joint_means: tuple
    overall: float
    overall_pooled: float
    num_frames: int

    def fraction_at(self, t):
        return self.fractions[self.thresholds.index(t)]


def frame_errors(pred, gt):
    if pred.names != gt.names:
        diff = sorted(set(pred.names) ^ set(gt.names))
        detail = f"differing names {diff}" if diff else "same names in a different order"
        raise JointMismatch(f"prediction and ground truth joint lists differ: {detail}")
    return FrameErrors(gt.names, np.linalg.norm(pred.positions - gt.positions, axis=1))


def _check(frames):
    if not frames:
        raise EmptyEvaluation("no frames to evaluate")
    names = frames[0].names
    for i, f in enumerate(frames):
        if f.names != names:
            raise JointMismatch(f"frame {i} joint list differs from frame 0")
    return names


def fraction_good_frames(frames, thresholds):
    """Fraction of frames whose worst joint error is <= each threshold."""
    _check(frames)
    worst = np.sort([f.max for f in frames])
    t = np.asarray(thresholds, dtype=np.float64)
    return np.searchsorted(worst, t, side="right") / len(worst)


def per_joint_mean_error(frames):
    """Per-joint means and their unweighted average."""
    names = _check(frames)
    means = np.mean([f.errors for f in frames], axis=0)
    return dict(zip(names, means.tolist())), float(means.mean())


def summarize(frames, step=1.0, max_threshold=CURVE_MAX):
    if not step > 0:
        raise InvalidSpec(f"curve step must be > 0, got {step}")
    names = _check(frames)
    n = int(np.floor(max_threshold / step + 1e-9))
    ts = sorted(set(np.round(np.arange(n + 1) * step, 9).tolist()) | set(TABLE_THRESHOLDS))
    fr = fraction_good_frames(frames, ts)
    joint, overall = per_joint_mean_error(frames)
    pooled = float(np.concatenate([f.errors for f in frames]).mean())
    return EvalSummary(tuple(ts), tuple(fr.tolist()), names, tuple(joint[n] for n in names), overall, pooled,
                       len(frames))


def evaluate(preds, gts, step=1.0):
    if len(preds) != len(gts):
        raise JointMismatch(f"{len(preds)} predicted frames but {len(gts)} ground-truth frames")
    return summarize([frame_errors(p, g) for p, g in zip(preds, gts)], step)


def _csv(rows):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def emit_csv(summary, curve_resolution=1.0, method="ours"):
    """Return (curve, table, per-joint) CSV texts.

    The curve is sampled every ``curve_resolution`` mm on [0, 80]; each sample
    must be one of the summary's thresholds (summarise with a step that
    divides the resolution).
    """
    lookup = dict(zip(summary.thresholds, summary.fractions))
    n = int(np.floor(CURVE_MAX / curve_resolution + 1e-9))
    curve = [["threshold_mm", "fraction"]]
    for k in range(n + 1):
        t = round(k * curve_resolution, 9)
        if t not in lookup:
            raise InvalidSpec(f"threshold {t} not in summary; summarise with a compatible step")
        curve.append([f"{t:g}", f"{lookup[t]:.6g}"])
    table = [["method"] + [f"{t:g}" for t in TABLE_THRESHOLDS],
             [method] + [f"{lookup[t]:.6g}" for t in TABLE_THRESHOLDS]]
    joints = [["joint", "mean_error_mm"]]
    joints += [[n, f"{m:.6g}"] for n, m in zip(summary.joint_names, summary.joint_means)]
    joints += [["overall", f"{summary.overall:.6g}"], ["overall_pooled", f"{summary.overall_pooled:.6g}"]]
    return _csv(curve), _csv(table), _csv(joints)


def parse_curve_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["threshold_mm", "fraction"]:
        raise InvalidSpec("curve CSV must start with 'threshold_mm,fraction'")
    return [(float(t), float(f)) for t, f in rows[1:]]


def parse_table_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    ts = [float(t) for t in rows[0][1:]]
    return {r[0]: dict(zip(ts, map(float, r[1:]))) for r in rows[1:]}
