"""Clip-level aggregation, mAP (overall and by polyphony) and supervised silhouette."""

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import kernels

POLYPHONY_COLUMNS = ("p1", "p2", "p3")


def aggregate_max_per_slot(probs):
    """Keep each slot's top class score, zero the rest, then max over slots.

    ``probs`` (..., k, l) softmax rows -> (..., l). Argmax ties go to the
    lowest class index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    top = probs.argmax(axis=-1)
    kept = np.zeros_like(probs)
    np.put_along_axis(kept, top[..., None], np.take_along_axis(probs, top[..., None], -1), -1)
    return kept.max(axis=-2)


def average_precision(scores, relevance):
    """Step-wise AP: sum over distinct score thresholds of recall gain times precision.

    Tied scores form one threshold, so a constant score gives the positive
    rate. ``None`` if nothing is relevant.
    """
    scores = np.asarray(scores, dtype=np.float64)
    rel = np.asarray(relevance, dtype=bool)
    if not rel.any():
        return None
    order = np.argsort(-scores, kind="stable")
    s, hits = scores[order], rel[order]
    tp = np.cumsum(hits)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]  # final index of each tie group
    tp, n = tp[last], last + 1
    gain = np.diff(np.r_[0, tp])
    return float(np.sum(gain * (tp / n)) / tp[-1])


def _macro_map(scores, labels):
    aps = [average_precision(scores[:, c], labels[:, c]) for c in range(labels.shape[1])]
    valid = [a for a in aps if a is not None]
    return (float(np.mean(valid)) if valid else None), aps


def mean_average_precision(clip_scores, labels, polyphony=None):
    """Macro mAP over classes with at least one positive.

    Returns ``{"all", "p1", "p2", "p3", "per_class_ap"}``; a polyphony
    column with no clips is ``None``.
    """
    clip_scores = np.asarray(clip_scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if clip_scores.shape != labels.shape:
        raise ValueError(f"scores {clip_scores.shape} vs labels {labels.shape}")
    overall, per_class = _macro_map(clip_scores, labels)
    out = {"all": overall}
    poly = labels.sum(axis=1) if polyphony is None else np.asarray(polyphony)
    for i, col in enumerate(POLYPHONY_COLUMNS, start=1):
        sel = poly == i
        out[col] = _macro_map(clip_scores[sel], labels[sel])[0] if sel.any() else None
    out["per_class_ap"] = per_class
    return out


def chance_map(labels):
    """Expected mAP of a label-independent random ranking: mean positive rate."""
    labels = np.asarray(labels, dtype=bool)
    rates = [labels[:, c].mean() for c in range(labels.shape[1]) if labels[:, c].any()]
    return float(np.mean(rates)) if rates else None


def supervised_silhouette(slot_embeddings, assignments, labels, sample_cap=10000, seed=0):
    """Silhouette of matched slot embeddings labeled by their matched class.

    ``slot_embeddings`` (N, k, d); ``assignments`` (N, m) matched slot per
    label (-1 pad); ``labels`` (N, m) class ids (-1 pad). Unmatched slots are
    excluded. Returns ``None`` when fewer than two classes are present.
    """
    emb = np.asarray(slot_embeddings, dtype=np.float64)
    cols = np.asarray(assignments)
    labels = np.asarray(labels)
    rows, pos = np.nonzero((cols >= 0) & (labels >= 0))
    points = emb[rows, cols[rows, pos]]
    classes = labels[rows, pos]
    return silhouette_score(points, classes, sample_cap, seed)


def silhouette_score(points, classes, sample_cap=10000, seed=0):
    points = np.asarray(points, dtype=np.float64)
    classes = np.asarray(classes)
    if len(np.unique(classes)) < 2:
        return None
    if len(points) > sample_cap:
        keep = np.sort(np.random.default_rng(seed).choice(len(points), sample_cap, replace=False))
        points, classes = points[keep], classes[keep]
        if len(np.unique(classes)) < 2:
            return None
    return float(np.mean(kernels.silhouette_samples(points, classes)))


@dataclass
class EvalReport:
    map: dict
    silhouette: Optional[float]
    per_class_ap: list
    config_hash: str = ""
    dataset_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self):
        doc = asdict(self)
        if not doc["extra"]:
            doc.pop("extra")
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(**doc)


def build_report(scores_map, silhouette, config_hash="", dataset_hash="", extra=None):
    m = {k: scores_map[k] for k in ("all", *POLYPHONY_COLUMNS)}
    return EvalReport(m, silhouette, scores_map["per_class_ap"], config_hash, dataset_hash, extra or {})


def fmt(x, digits=3):
    return "--" if x is None else f"{x:.{digits}f}"


def render_table(header, rows):
    """Aligned plain-text table; ``rows`` are lists of already-formatted cells."""
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    line = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    rule = "-" * len(line(cells[0]))
    return "\n".join([rule, line(cells[0]), rule, *(line(r) for r in cells[1:]), rule])
