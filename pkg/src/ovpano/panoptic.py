"""Instances from edge affinities, text queries, and semantic/panoptic metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .cloud import PointCloud, save_cloud
from .embed import DEFAULT_LOGIT_SCALE, normalize, things_stuff
from .pseudolabel import renumber_by_first_member


def cluster_instances(n_superpoints: int, edges: np.ndarray, affinity: np.ndarray,
                      threshold: float = 0.5, thing_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Connected components of thing superpoints joined by edges with affinity above ``threshold``.

    Ids follow the lowest superpoint index of each component; stuff gets ``-1``.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    affinity = np.asarray(affinity, dtype=np.float64)
    if len(affinity) != len(edges):
        raise ValueError(f"{len(affinity)} affinities for {len(edges)} edges")
    things = np.ones(n_superpoints, bool) if thing_mask is None else np.asarray(thing_mask, bool)
    keep = (affinity > threshold) & things[edges[:, 0]] & things[edges[:, 1]]
    e = edges[keep]
    graph = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n_superpoints, n_superpoints))
    _, comp = connected_components(graph, directed=False)
    comp = np.where(things, comp, -1)
    return renumber_by_first_member(comp)


def cosine_to_text(vectors: np.ndarray, text_vec: np.ndarray) -> np.ndarray:
    v = normalize(np.asarray(vectors, dtype=np.float64))
    t = normalize(np.asarray(text_vec, dtype=np.float64))
    if v.shape[-1] != t.shape[-1]:
        raise ValueError(f"vector dimension {v.shape[-1]} != text dimension {t.shape[-1]}")
    return v @ t


def query(vectors: np.ndarray, text: str, provider, threshold: float = 0.5,
          hit_count: Optional[np.ndarray] = None):
    """Cosine similarity of every point to ``text`` and the mask ``sim > threshold``."""
    sim = cosine_to_text(vectors, provider.text_embed(text))
    mask = sim > threshold
    if hit_count is not None:
        mask &= np.asarray(hit_count) > 0
    return sim, mask


def classify_points(vectors: np.ndarray, label_set: Sequence[str], provider,
                    valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Index of the most similar label embedding; ties take the lower index; invalid rows get -1."""
    if len(label_set) == 0:
        raise ValueError("label set is empty")
    texts = normalize(np.array([provider.text_embed(t) for t in label_set]))
    sims = normalize(np.asarray(vectors, dtype=np.float64)) @ texts.T
    out = np.argmax(sims, axis=1).astype(np.int64)
    if valid is not None:
        out[~np.asarray(valid, bool)] = -1
    return out


@dataclass
class PanopticPrediction:
    vectors: np.ndarray  # (N, C)
    instance: np.ndarray  # (N,), -1 for stuff
    classes: Optional[np.ndarray] = None  # (N,), -1 unlabeled
    valid: Optional[np.ndarray] = None


def superpoint_things(pred_vec: np.ndarray, provider, logit_scale: float = DEFAULT_LOGIT_SCALE) -> np.ndarray:
    """Things/stuff verdict on each predicted superpoint vector."""
    return np.array([things_stuff(v, provider, logit_scale) == "thing" for v in pred_vec], dtype=bool)


def predict_points(assignment: np.ndarray, pred_vec: np.ndarray, sp_instance: np.ndarray,
                   label_set: Optional[Sequence[str]] = None, provider=None) -> PanopticPrediction:
    """Broadcast level-1 superpoint predictions to their points."""
    assignment = np.asarray(assignment, dtype=np.int64)
    vecs = np.asarray(pred_vec, dtype=np.float64)[assignment]
    inst = np.asarray(sp_instance, dtype=np.int64)[assignment]
    classes = classify_points(vecs, label_set, provider) if label_set else None
    return PanopticPrediction(vecs, inst, classes, np.ones(len(assignment), bool))


# ------------------------------------------------------------------ metrics

@dataclass
class SemanticScores:
    miou: float
    macc: float
    iou: List[Optional[float]]
    acc: List[Optional[float]]


def eval_semantic(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> SemanticScores:
    """IoU and recall per class (percent); means over classes present in ``gt``.

    Points with ``gt == -1`` are ignored. Predictions of ``-1`` count as misses.
    """
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in length")
    keep = gt >= 0
    if not keep.any():
        raise ValueError("no ground-truth labeled points to evaluate")
    if gt.max() >= n_classes or pred.max(initial=-1) >= n_classes:
        raise ValueError("class id out of range")
    p, g = pred[keep], gt[keep]
    iou: List[Optional[float]] = []
    acc: List[Optional[float]] = []
    for c in range(n_classes):
        tp = np.count_nonzero((p == c) & (g == c))
        fp = np.count_nonzero((p == c) & (g != c))
        fn = np.count_nonzero((p != c) & (g == c))
        if tp + fn == 0:
            iou.append(None)
            acc.append(None)
            continue
        iou.append(100.0 * tp / (tp + fp + fn))
        acc.append(100.0 * tp / (tp + fn))
    present = [v for v in iou if v is not None]
    recalls = [v for v in acc if v is not None]
    return SemanticScores(float(np.mean(present)), float(np.mean(recalls)), iou, acc)


@dataclass
class ClassPanoptic:
    pq: float
    rq: float
    sq: float
    tp: int
    fp: int
    fn: int


@dataclass
class PanopticScores:
    pq: float
    rq: float
    sq: float
    miou: float
    macc: float
    per_class: Dict[int, ClassPanoptic] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): asdict(v) for k, v in self.per_class.items()}
        return d


def _segments(classes: np.ndarray, inst: np.ndarray) -> Dict[tuple, np.ndarray]:
    """Point sets keyed by ``(class, instance)``; instance -1 is the class's stuff segment."""
    out: Dict[tuple, np.ndarray] = {}
    ok = classes >= 0
    keys = np.stack([classes[ok], inst[ok]], 1)
    idx = np.flatnonzero(ok)
    if len(keys) == 0:
        return out
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    for j, (c, i) in enumerate(uniq):
        out[(int(c), int(i))] = idx[inv == j]
    return out


def panoptic_quality(pred_sem, pred_inst, gt_sem, gt_inst, n_classes: int) -> Dict[int, ClassPanoptic]:
    """Per-class PQ, RQ and SQ (percent) for classes present in the ground truth.

    Segments match within a class when their IoU exceeds 0.5. Points with
    ground-truth class -1 are excluded from every segment.
    """
    gt_sem = np.asarray(gt_sem, dtype=np.int64)
    keep = gt_sem >= 0
    ps = np.where(keep, np.asarray(pred_sem, dtype=np.int64), -1)
    pi = np.asarray(pred_inst, dtype=np.int64)
    gi = np.asarray(gt_inst, dtype=np.int64)
    pred_segs = _segments(ps, pi)
    gt_segs = _segments(gt_sem, gi)
    result: Dict[int, ClassPanoptic] = {}
    for c in range(n_classes):
        gts = [v for k, v in gt_segs.items() if k[0] == c]
        if not gts:
            continue
        preds = [v for k, v in pred_segs.items() if k[0] == c]
        matched_p = set()
        ious = []
        for g in gts:
            for j, p in enumerate(preds):
                inter = len(np.intersect1d(g, p, assume_unique=True))
                union = len(g) + len(p) - inter
                if inter and inter / union > 0.5:
                    ious.append(inter / union)
                    matched_p.add(j)
                    break
        tp = len(ious)
        fp = len(preds) - len(matched_p)
        fn = len(gts) - tp
        denom = tp + 0.5 * fp + 0.5 * fn
        sq = sum(ious) / tp if tp else 0.0
        rq = tp / denom if denom else 0.0
        result[c] = ClassPanoptic(100.0 * sq * rq, 100.0 * rq, 100.0 * sq, tp, fp, fn)
    return result


def eval_panoptic(pred_sem, pred_inst, gt_sem, gt_inst, n_classes: int) -> PanopticScores:
    per = panoptic_quality(pred_sem, pred_inst, gt_sem, gt_inst, n_classes)
    sem = eval_semantic(pred_sem, gt_sem, n_classes)
    vals = list(per.values())
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0  # noqa: E731
    return PanopticScores(mean([v.pq for v in vals]), mean([v.rq for v in vals]),
                          mean([v.sq for v in vals]), sem.miou, sem.macc, per)


@dataclass
class OracleScores:
    miou: float
    macc: float
    labeled_fraction: float


def eval_oracle(z_pc: np.ndarray, class_repr: np.ndarray, gt_sem: np.ndarray,
                label_set: Sequence[str], provider) -> OracleScores:
    """Score the pseudo-classes alone: each point takes the label nearest its class representative.

    Only points the pipeline labeled take part.
    """
    z_pc = np.asarray(z_pc, dtype=np.int64)
    labeled = z_pc >= 0
    if not labeled.any():
        raise ValueError("no point carries a pseudo-class")
    per_class = classify_points(class_repr, label_set, provider)
    pred = np.where(labeled, per_class[np.maximum(z_pc, 0)], -1)
    gt = np.where(labeled, gt_sem, -1)
    sem = eval_semantic(pred, gt, len(label_set))
    return OracleScores(sem.miou, sem.macc, float(labeled.mean()))


# ------------------------------------------------------------------ export

def similarity_colors(sim: np.ndarray) -> np.ndarray:
    """Gray for non-positive similarity, shading to pure red at 1."""
    t = np.clip(np.asarray(sim, dtype=np.float64), 0.0, 1.0)[:, None]
    gray = np.full((len(t), 3), 0.5)
    return gray * (1 - t) + np.array([1.0, 0.0, 0.0]) * t


def write_query_ply(path, cloud: PointCloud, sim: np.ndarray, mask: Optional[np.ndarray] = None) -> None:
    out = PointCloud(cloud.positions, similarity_colors(sim))
    extra = {"sim": np.asarray(sim, dtype=np.float32)}
    if mask is not None:
        extra["mask"] = np.asarray(mask, dtype=np.uint8)
    save_cloud(out, path, extra=extra)


def _rounded(obj, digits: int = 6):
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: _rounded(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v, digits) for v in obj]
    return obj


def scores_json(scores: dict) -> str:
    return json.dumps(_rounded(scores), indent=1, sort_keys=True) + "\n"
