"""Pose and classification metrics, curve export and paired run comparison."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .train.loop import CURVE_COLUMNS
from .pam import HIPS, SHOULDERS, PoseAnnotation, pam_diagonal

logger = logging.getLogger(__name__)


class MetricsError(ValueError):
    """Invalid metric inputs."""


def _coords(p) -> np.ndarray:
    return p.coords if isinstance(p, PoseAnnotation) else np.asarray(p, dtype=np.float64)


def keypoint_error(pred, truth) -> float:
    """Mean Euclidean distance over keypoints, in normalized coordinates."""
    a, b = _coords(pred), _coords(truth)
    if a.shape != b.shape:
        raise MetricsError(f"keypoint count mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, axis=-1).mean())


def torso_diameter(coords: np.ndarray) -> np.ndarray:
    """Distance between the mean shoulder and the mean hip point; works on batches."""
    c = np.asarray(coords)
    sh = c[..., list(SHOULDERS), :].mean(axis=-2)
    hp = c[..., list(HIPS), :].mean(axis=-2)
    return np.linalg.norm(sh - hp, axis=-1)


@dataclass(frozen=True)
class PckResult:
    value: float
    evaluated: int
    skipped: int


def pck_details(preds, truths, threshold: float = 0.2) -> PckResult:
    """Fraction of keypoints within ``threshold * torso diameter`` of the truth.

    The torso is measured on the ground truth; samples whose torso has zero
    length are skipped and counted.
    """
    P = np.stack([_coords(p) for p in preds])
    T = np.stack([_coords(t) for t in truths])
    if P.shape != T.shape:
        raise MetricsError(f"prediction/truth shape mismatch: {P.shape} vs {T.shape}")
    if T.shape[1] <= max(SHOULDERS + HIPS):
        raise MetricsError("poses lack the shoulder/hip keypoints needed for PCK")
    diam = torso_diameter(T)
    ok = diam > 0
    skipped = int((~ok).sum())
    if skipped:
        logger.warning("pck: skipped %d samples with a degenerate torso", skipped)
    if not ok.any():
        raise MetricsError("every sample has a degenerate torso")
    d = np.linalg.norm(P[ok] - T[ok], axis=-1)
    hits = d <= threshold * diam[ok][:, None]
    return PckResult(float(hits.mean()), int(ok.sum()), skipped)


def pck(preds, truths, threshold: float = 0.2) -> float:
    return pck_details(preds, truths, threshold).value


@dataclass
class MetricsReport:
    n_samples: int
    class_accuracy: float
    per_class_accuracy: dict[str, float] = field(default_factory=dict)
    mean_keypoint_error: float | None = None
    pck_at_0_2: float | None = None
    pck_skipped: int = 0
    per_class_keypoint_error: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n_samples <= 0:
            raise MetricsError("a report needs at least one sample")
        for name in ("class_accuracy", "pck_at_0_2"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise MetricsError(f"{name} must lie in [0, 1], got {v}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def classification_metrics(logits: np.ndarray, labels: np.ndarray) -> tuple[float, dict[str, float]]:
    pred = np.asarray(logits).argmax(axis=1)
    labels = np.asarray(labels)
    per = {str(c): float((pred[labels == c] == c).mean()) for c in np.unique(labels)}
    return float((pred == labels).mean()), per


def pose_report(pams: np.ndarray, logits: np.ndarray, coords: np.ndarray, labels: np.ndarray,
                meta: dict | None = None) -> MetricsReport:
    """Report for student outputs: decoded PAM diagonals versus ground-truth keypoints."""
    pred = np.clip(pam_diagonal(pams), 0.0, 1.0)
    errs = np.linalg.norm(pred - coords, axis=-1).mean(axis=-1)
    acc, per = classification_metrics(logits, labels)
    pk = pck_details(pred, coords)
    per_err = {str(c): float(errs[labels == c].mean()) for c in np.unique(labels)}
    return MetricsReport(len(labels), acc, per, float(errs.mean()), pk.value, pk.skipped, per_err, meta or {})


# -- curves ------------------------------------------------------------------------------------


def _row(r) -> dict:
    return r if isinstance(r, dict) else {c: getattr(r, c) for c in CURVE_COLUMNS}


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow([int(r[c]) if c in ("epoch", "batch") else repr(float(r[c])) for c in CURVE_COLUMNS])


def read_curves(path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        head = next(rd, None)
        if head is None or tuple(head) != CURVE_COLUMNS:
            raise MetricsError(f"{path}: expected header {','.join(CURVE_COLUMNS)}")
        out = []
        for n, vals in enumerate(rd, start=2):
            if len(vals) != len(CURVE_COLUMNS):
                raise MetricsError(f"{path} line {n}: expected {len(CURVE_COLUMNS)} fields")
            out.append({c: int(v) if c in ("epoch", "batch") else float(v) for c, v in zip(CURVE_COLUMNS, vals)})
    return out


def epoch_curve(rows: list[dict]) -> list[dict]:
    """Batch means per epoch; the ``batch`` column holds the batch count."""
    out = []
    for e in sorted({r["epoch"] for r in rows}):
        sel = [r for r in rows if r["epoch"] == e]
        m = {"epoch": e, "batch": len(sel)}
        for c in CURVE_COLUMNS[2:]:
            m[c] = float(np.mean([r[c] for r in sel]))
        out.append(m)
    return out


def recomposition_error(rows: list[dict]) -> float:
    """Max |ckd_total - (tkd + ckd_weight * skd)| relative to max(1, |ckd_total|)."""
    return max((abs(r["ckd_total"] - (r["tkd"] + r["ckd_weight"] * r["skd"])) / max(1.0, abs(r["ckd_total"]))
                for r in rows), default=0.0)


def export_curves(history, path) -> dict:
    """Write ``curves_batch.csv``, ``curves_epoch.csv`` and ``curves_summary.json`` under ``path``."""
    rows = [_row(r) for r in history]
    if not rows:
        raise MetricsError("cannot export an empty loss history")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    epochs = epoch_curve(rows)
    _write_csv(out / "curves_batch.csv", rows)
    _write_csv(out / "curves_epoch.csv", epochs)
    first, last = epochs[0]["total"], epochs[-1]["total"]
    summary = {
        "epochs": len(epochs),
        "batches": len(rows),
        "first_epoch_total": first,
        "last_epoch_total": last,
        "last_over_first": last / first if first != 0 else math.inf,
        "max_recomposition_error": recomposition_error(rows),
    }
    (out / "curves_summary.json").write_text(json.dumps(summary, indent=2))
    return summary


# -- paired comparison ---------------------------------------------------------------------


def sign_test_p(wins: int, n: int) -> float:
    """Two-sided exact binomial sign test p-value at p = 0.5."""
    if n == 0:
        return 1.0
    k = min(wins, n - wins)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2**n
    return min(1.0, 2 * tail)


@dataclass
class Comparison:
    seeds: list[int]
    keypoint_error_delta: list[float]  # baseline - ckd: positive means CKD is better
    pck_delta: list[float]  # ckd - baseline: positive means CKD is better
    wins: int
    losses: int
    ties: int
    sign_test_p: float

    @property
    def all_better(self) -> bool:
        return self.wins == len(self.seeds)

    def to_json(self) -> str:
        d = asdict(self)
        d["mean_keypoint_error_delta"] = float(np.mean(self.keypoint_error_delta))
        return json.dumps(d, indent=2)


def compare_runs(ckd_reports: dict[int, MetricsReport], baseline_reports: dict[int, MetricsReport]) -> Comparison:
    """Per-seed paired deltas; wins/losses count keypoint-error improvements."""
    if set(ckd_reports) != set(baseline_reports):
        raise MetricsError(f"seed sets differ: {sorted(ckd_reports)} vs {sorted(baseline_reports)}")
    if not ckd_reports:
        raise MetricsError("no runs to compare")
    seeds = sorted(ckd_reports)
    dk, dp = [], []
    for s in seeds:
        c, b = ckd_reports[s], baseline_reports[s]
        if c.mean_keypoint_error is None or b.mean_keypoint_error is None:
            raise MetricsError(f"seed {s}: reports lack keypoint error")
        dk.append(b.mean_keypoint_error - c.mean_keypoint_error)
        dp.append((c.pck_at_0_2 or 0.0) - (b.pck_at_0_2 or 0.0))
    wins = sum(d > 0 for d in dk)
    losses = sum(d < 0 for d in dk)
    ties = len(dk) - wins - losses
    return Comparison(seeds, dk, dp, wins, losses, ties, sign_test_p(wins, wins + losses))
