"""Querying the map and scoring it against ground truth.

Queries are unit vectors in the descriptor space (e.g. text embeddings of
"This is a photo of a {category}").  Evaluation assigns every segment its
best class, carries those class labels onto ground-truth vertices by
nearest-neighbor transfer and scores the result with intersection-over-union
style metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import WorldMap
from .fusion import normalize_descriptor

UNCLASSIFIED = -1
TRANSFER_NEIGHBORS = 5


@dataclass
class ClassTable:
    """Query classes: unique names paired with unit embedding rows.

    ``frequencies`` optionally records per-class ground-truth point counts.
    """

    names: list[str]
    embeddings: np.ndarray  # (C, D) float64, unit rows
    frequencies: np.ndarray | None = None  # (C,) uint64

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if len(self.names) != self.embeddings.shape[0]:
            raise ValueError("names/embeddings length mismatch")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if len(norms) and np.abs(norms - 1.0).max() > 1e-5:
            raise ValueError("class embeddings must be unit rows")
        if self.frequencies is not None:
            self.frequencies = np.asarray(self.frequencies, dtype=np.uint64)
            if self.frequencies.shape != (len(self.names),):
                raise ValueError("frequencies length mismatch")

    def __len__(self) -> int:
        return len(self.names)


def rank_segments(
    world: WorldMap, query: np.ndarray, k: int | None = None
) -> list[tuple[int, float]]:
    """Segments ranked by cosine similarity to the query, best first.

    Ties order by lower label.  Segments without a descriptor are skipped.
    """
    q = normalize_descriptor(query)
    scored = [
        (seg.label, float(np.dot(seg.descriptor, q)))
        for seg in world.segments
        if seg.descriptor is not None
    ]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored if k is None else scored[:k]


def classify_segments(world: WorldMap, classes: ClassTable) -> np.ndarray:
    """Best class index per segment; -1 for segments without a descriptor.

    Exact similarity ties resolve to the lower class index.
    """
    out = np.full(len(world.segments), UNCLASSIFIED, dtype=np.int64)
    if not len(classes):
        return out
    for seg in world.segments:
        if seg.descriptor is None:
            continue
        sims = classes.embeddings @ seg.descriptor
        out[seg.label] = int(np.argmax(sims))  # argmax takes the first maximum
    return out


def transfer_labels(
    points: np.ndarray,
    point_labels: np.ndarray,
    vertices: np.ndarray,
    k: int = TRANSFER_NEIGHBORS,
) -> np.ndarray:
    """Label each vertex by the mode over its k nearest points' labels.

    Neighbors are ranked by Euclidean distance.  When several labels tie for
    the mode, the tied label appearing earliest in distance order wins (so the
    nearest neighbor's label wins whenever it is part of the tie).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    point_labels = np.asarray(point_labels).astype(np.int64)
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if not len(points):
        raise ValueError("cannot transfer labels from an empty point cloud")
    if len(points) != len(point_labels):
        raise ValueError("points/labels length mismatch")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, len(points))
    tree = cKDTree(points)
    _, idx = tree.query(vertices, k=k)
    idx = np.atleast_2d(idx.reshape(len(vertices), k))
    neighbor_labels = point_labels[idx]  # (M, k), nearest first
    out = np.empty(len(vertices), dtype=np.int64)
    for i, labs in enumerate(neighbor_labels):
        counts: dict[int, int] = {}
        for lab in labs.tolist():
            counts[lab] = counts.get(lab, 0) + 1
        best = max(counts.values())
        for lab in labs.tolist():  # distance order breaks mode ties
            if counts[lab] == best:
                out[i] = lab
                break
    return out


@dataclass
class EvalReport:
    """Per-class and aggregate scores.

    ``confusion`` is (C, C+1): rows are ground-truth classes, columns are
    predicted classes with the extra last column counting unlabeled (-1)
    predictions.  Per-class entries are NaN for classes absent from the
    ground truth; aggregate means cover only the present classes.
    """

    confusion: np.ndarray
    per_class_iou: np.ndarray
    per_class_acc: np.ndarray
    evaluated: np.ndarray  # (C,) bool: class present in the ground truth
    miou: float
    macc: float
    f_miou: float
    f_macc: float
    tertiles: dict[str, list[int]] = field(default_factory=dict)
    tertile_miou: dict[str, float] = field(default_factory=dict)
    tertile_macc: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "macc": self.macc,
            "f_miou": self.f_miou,
            "f_macc": self.f_macc,
            "per_class_iou": [None if np.isnan(x) else float(x) for x in self.per_class_iou],
            "per_class_acc": [None if np.isnan(x) else float(x) for x in self.per_class_acc],
            "evaluated": [bool(b) for b in self.evaluated],
            "tertiles": self.tertiles,
            "tertile_miou": {k: float(v) for k, v in self.tertile_miou.items()},
            "tertile_macc": {k: float(v) for k, v in self.tertile_macc.items()},
            "confusion": self.confusion.tolist(),
        }


TERTILE_NAMES = ("head", "common", "tail")


def compute_metrics(pred: np.ndarray, gt: np.ndarray, classes: ClassTable) -> EvalReport:
    """Score predicted vertex classes against the ground truth.

    IoU_c = TP / (TP + FP + FN) and Acc_c = TP / (TP + FN), averaged over the
    classes present in the ground truth.  The f-variants weight each class by
    its ground-truth frequency (weights summing to one over the present
    classes).  Tertiles split the present classes into head/common/tail by
    descending frequency, group sizes as equal as possible with remainders
    going to the earlier groups.

    Vertices with a negative ground-truth label are ignored.  Unlabeled
    predictions (-1) count as false negatives for the ground-truth class and
    never as false positives.
    """
    pred = np.asarray(pred).astype(np.int64).ravel()
    gt = np.asarray(gt).astype(np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError("pred/gt length mismatch")
    c = len(classes)
    if len(gt) and gt.max() >= c:
        raise ValueError("ground-truth label out of range")
    if len(pred) and pred.max() >= c:
        raise ValueError("predicted label out of range")

    keep = gt >= 0
    pred = pred[keep]
    gt = gt[keep]
    pred_col = np.where(pred < 0, c, pred)  # last column = unlabeled
    confusion = np.zeros((c, c + 1), dtype=np.int64)
    np.add.at(confusion, (gt, pred_col), 1)

    gt_counts = confusion.sum(axis=1)
    tp = np.diagonal(confusion[:, :c]).astype(np.float64)
    fn = gt_counts - tp
    fp = confusion[:, :c].sum(axis=0) - tp

    evaluated = gt_counts > 0
    iou = np.full(c, np.nan)
    acc = np.full(c, np.nan)
    with np.errstate(invalid="ignore", divide="ignore"):
        denom = tp + fp + fn
        iou_all = np.where(denom > 0, tp / denom, 0.0)
        acc_all = np.where(gt_counts > 0, tp / np.maximum(gt_counts, 1), 0.0)
    iou[evaluated] = iou_all[evaluated]
    acc[evaluated] = acc_all[evaluated]

    if evaluated.any():
        miou = float(iou[evaluated].mean())
        macc = float(acc[evaluated].mean())
        w = gt_counts[evaluated].astype(np.float64)
        w /= w.sum()
        f_miou = float((w * iou[evaluated]).sum())
        f_macc = float((w * acc[evaluated]).sum())
    else:
        miou = macc = f_miou = f_macc = float("nan")

    present = np.nonzero(evaluated)[0]
    order = sorted(present.tolist(), key=lambda ci: (-int(gt_counts[ci]), ci))
    n = len(order)
    base, rem = divmod(n, 3)
    sizes = [base + (1 if i < rem else 0) for i in range(3)]
    tertiles: dict[str, list[int]] = {}
    tertile_miou: dict[str, float] = {}
    tertile_macc: dict[str, float] = {}
    lo = 0
    for name, size in zip(TERTILE_NAMES, sizes):
        members = order[lo : lo + size]
        lo += size
        tertiles[name] = members
        tertile_miou[name] = float(iou[members].mean()) if members else float("nan")
        tertile_macc[name] = float(acc[members].mean()) if members else float("nan")

    return EvalReport(
        confusion=confusion,
        per_class_iou=iou,
        per_class_acc=acc,
        evaluated=evaluated,
        miou=miou,
        macc=macc,
        f_miou=f_miou,
        f_macc=f_macc,
        tertiles=tertiles,
        tertile_miou=tertile_miou,
        tertile_macc=tertile_macc,
    )
