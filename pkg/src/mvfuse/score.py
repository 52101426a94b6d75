"""Detection confidence, ADD error, verdict bands and precision-recall."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from .fusion import PoseHypothesis
from .geometry import RigidTransform
from .object_model import KeypointModel

CORRECT_FRACTION = 0.10
INTERMEDIATE_FRACTION = 0.30


class Verdict(str, enum.Enum):
    CORRECT = "correct"
    INTERMEDIATE = "intermediate"
    INCORRECT = "incorrect"


@dataclass(frozen=True)
class Detection:
    hypothesis: PoseHypothesis
    confidence: float
    object_id: str
    scene_id: str = ""

    @property
    def pose(self) -> RigidTransform:
        return self.hypothesis.pose


@dataclass(frozen=True)
class EvalRecord:
    detection: Detection
    matched_gt: Optional[int]
    add_error: Optional[float]
    verdict: Verdict
    # ADD to the closest ground-truth pose, claimed or not; None without ground truth
    nearest_add: Optional[float] = None
    gt_visible: bool = False

    @property
    def counts_for_recall(self) -> bool:
        return self.verdict is Verdict.CORRECT and self.gt_visible


@dataclass(frozen=True)
class SceneSummary:
    scene_id: str
    n_ground_truth: int
    n_visible: int
    n_correct: int
    n_false_positive: int

    @property
    def detection_rate(self) -> float:
        return self.n_correct / self.n_visible if self.n_visible else 0.0


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    kept: int


def confidence(keypoint_uncertainty: float, icp_rms: float, model: KeypointModel, n_views: int,
               weights: tuple[float, float] = (1.0, 1.0)) -> float:
    """Lower is better.

    The keypoint term is nats per keypoint per view; the ICP term is RMS
    in units of 1% of the object diameter.
    """
    if keypoint_uncertainty < 0 or icp_rms < 0:
        raise ValueError("inputs must be non-negative")
    w_u, w_icp = weights
    k_n = model.n_keypoints * max(n_views, 1)
    return float(w_u * keypoint_uncertainty / k_n + w_icp * icp_rms / (0.01 * model.diameter))


def add_error(pred: RigidTransform, gt: RigidTransform, surface) -> float:
    """Mean distance between surface points under the two poses."""
    v = np.asarray(surface, dtype=float)
    if len(v) == 0:
        raise ValueError("surface must be non-empty")
    return float(np.mean(np.linalg.norm(pred.apply(v) - gt.apply(v), axis=1)))


def verdict(add: float, diameter: float) -> Verdict:
    if not diameter > 0:
        raise ValueError("diameter must be positive")
    if add < CORRECT_FRACTION * diameter:
        return Verdict.CORRECT
    if add < INTERMEDIATE_FRACTION * diameter:
        return Verdict.INTERMEDIATE
    return Verdict.INCORRECT


def evaluate_scene(detections: Sequence[Detection], ground_truth_poses: Sequence[RigidTransform],
                   model: KeypointModel, visibility: Optional[Sequence[float]] = None,
                   visibility_floor: float = 0.6, scene_id: str = "") -> tuple[list[EvalRecord], SceneSummary]:
    """Greedy matching in ascending confidence order, each detection claiming
    the unclaimed ground-truth pose of minimal ADD.
    """
    for d in detections:
        if d.object_id != model.object_id:
            raise ValueError(f"detection object {d.object_id!r} does not match model {model.object_id!r}")
    n_gt = len(ground_truth_poses)
    vis = np.ones(n_gt) if visibility is None else np.asarray(visibility, dtype=float)
    visible = vis >= visibility_floor
    surf = model.surface_points
    order = sorted(range(len(detections)), key=lambda i: detections[i].confidence)
    claimed = np.zeros(n_gt, dtype=bool)
    records: list[Optional[EvalRecord]] = [None] * len(detections)
    for i in order:
        det = detections[i]
        adds = np.array([add_error(det.pose, g, surf) for g in ground_truth_poses])
        nearest = float(adds.min()) if n_gt else None
        free = np.flatnonzero(~claimed)
        if len(free) == 0:
            records[i] = EvalRecord(det, None, None, Verdict.INCORRECT, nearest, False)
            continue
        j = int(free[np.argmin(adds[free])])
        claimed[j] = True
        a = float(adds[j])
        records[i] = EvalRecord(det, j, a, verdict(a, model.diameter), nearest, bool(visible[j]))
    recs = [r for r in records if r is not None]
    summary = SceneSummary(
        scene_id,
        n_gt,
        int(visible.sum()),
        sum(r.counts_for_recall for r in recs),
        sum(r.matched_gt is None for r in recs),
    )
    return recs, summary


def pr_curve(confidences, correct, recall_hits, thresholds, total_visible: int) -> list[PRPoint]:
    """Array form of :func:`precision_recall`."""
    conf = np.asarray(confidences, dtype=float)
    correct = np.asarray(correct, dtype=bool)
    recall_hit = np.asarray(recall_hits, dtype=bool)
    out = []
    for tau in sorted(float(t) for t in thresholds):
        keep = conf <= tau
        n = int(keep.sum())
        precision = float(correct[keep].sum() / n) if n else 1.0
        recall = float(recall_hit[keep].sum() / total_visible) if total_visible else 0.0
        out.append(PRPoint(tau, precision, recall, n))
    return out


def precision_recall(records: Sequence[EvalRecord], thresholds, total_visible: int) -> list[PRPoint]:
    """Precision and recall when keeping detections with confidence <= each threshold.

    With nothing kept, precision is reported as 1.0.
    """
    if len(records) == 0:
        raise ValueError("records must be non-empty")
    return pr_curve([r.detection.confidence for r in records], [r.verdict is Verdict.CORRECT for r in records],
                    [r.counts_for_recall for r in records], thresholds, total_visible)


def spearman(x, y) -> float:
    if len(x) < 3:
        return float("nan")
    return float(spearmanr(x, y).statistic)


def confidence_add_correlation(records: Sequence[EvalRecord]) -> float:
    """Spearman rank correlation between confidence and ADD to the nearest ground truth."""
    pairs = [(r.detection.confidence, r.nearest_add) for r in records if r.nearest_add is not None]
    if not pairs:
        return float("nan")
    c, a = zip(*pairs)
    return spearman(c, a)


def histogram_by_verdict(confidences, verdicts, bins) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Counts per verdict in confidence bins, plus the bin edges."""
    conf = np.asarray(confidences, dtype=float)
    labels = np.array([Verdict(v).value for v in verdicts], dtype=object)
    edges = np.histogram_bin_edges(conf, bins=bins)
    return {v.value: np.histogram(conf[labels == v.value], bins=edges)[0] for v in Verdict}, edges


def verdict_histogram(records: Sequence[EvalRecord], bins) -> dict[str, np.ndarray]:
    """Counts per verdict in confidence bins (the data behind an uncertainty histogram)."""
    counts, _ = histogram_by_verdict([r.detection.confidence for r in records], [r.verdict for r in records], bins)
    return counts
