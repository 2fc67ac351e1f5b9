"""Slot classifier, permutation-invariant matching and the CARL loss terms."""

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import kernels


@dataclass
class SlotPredictions:
    logits: torch.Tensor  # (..., k, l)

    @property
    def probs_softmax(self):
        return self.logits.softmax(dim=-1)

    @property
    def probs_sigmoid(self):
        return torch.sigmoid(self.logits)


@dataclass
class MatchAssignment:
    pairs: list  # [(label_index, slot_index)]
    total_cost: float

    def slot_of(self, label_index):
        return dict(self.pairs)[label_index]


@dataclass
class LossWeights:
    w_ce: float = 1.0
    w_recon: float = 0.1
    w_sparsity: float = 0.1
    w_disjoint: float = 100.0

    def __post_init__(self):
        for name, w in self.as_dict().items():
            if not (np.isfinite(w) and w >= 0):
                raise ValueError(f"loss weight {name}={w} must be finite and >= 0")

    def as_dict(self):
        return {"w_ce": self.w_ce, "w_recon": self.w_recon,
                "w_sparsity": self.w_sparsity, "w_disjoint": self.w_disjoint}

    def ablate(self, term):
        key = {"reconstruction": "w_recon", "disjointedness": "w_disjoint",
               "sparsity": "w_sparsity", "none": None}[term]
        out = LossWeights(**self.as_dict())
        if key:
            setattr(out, key, 0.0)
        return out


SUPERVISED = LossWeights(1.0, 0.1, 0.1, 100.0)
UNSUPERVISED = LossWeights(0.0, 1.0, 0.0, 0.01)


class SlotClassifier(nn.Linear):
    """One linear head shared by every slot: (..., k, d_s) -> (..., k, l)."""


def classify_slots(slots, head):
    return SlotPredictions(head(slots))


def hungarian_match(cost):
    """Minimum-cost injective map from labels (rows) to slots (columns).

    Ties resolve to the lexicographically smallest slot sequence.
    """
    cost = np.asarray(cost.detach().cpu() if isinstance(cost, torch.Tensor) else cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a (labels, slots) matrix")
    if cost.shape[0] > cost.shape[1]:
        raise ValueError(f"{cost.shape[0]} labels cannot be matched to {cost.shape[1]} slots")
    if not np.isfinite(cost).all():
        raise ValueError("matching costs must be finite")
    cols, total = kernels.solve_assignment(cost)
    return MatchAssignment([(r, int(c)) for r, c in enumerate(cols)], float(total))


def pad_labels(label_sets, width=None):
    """Lists of class ids -> (B, width) int64 array padded with -1."""
    width = width or max((len(s) for s in label_sets), default=0)
    out = np.full((len(label_sets), width), -1, dtype=np.int64)
    for i, labels in enumerate(label_sets):
        out[i, : len(labels)] = list(labels)
    return out


def pit_cross_entropy(logits, labels):
    """Batched permutation-invariant cross-entropy.

    ``logits`` (B, k, l); ``labels`` (B, m) int class ids padded with -1.
    The cost of (label c, slot i) is ``-log softmax(logits[i])[c]``; each clip
    uses its best injective assignment (held fixed for backprop) and averages
    the matched costs. Unmatched slots contribute nothing. Returns
    ``(loss, cols)`` with ``cols`` (B, m) the matched slot per label, -1 pad.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    valid = labels >= 0
    n_labels = valid.sum(dim=1)
    if (n_labels == 0).any():
        raise ValueError("every clip needs at least one label")
    logp = logits.log_softmax(dim=-1)  # (B, k, l)
    safe = labels.clamp_min(0)
    cost = -torch.gather(logp.transpose(1, 2), 1, safe[..., None].expand(-1, -1, logp.shape[1]))
    cost_np = cost.detach().double().cpu().numpy()
    cost_np[~valid.numpy()] = 0.0
    cols, _ = kernels.match_batch(cost_np, n_labels.numpy())
    cols_t = torch.from_numpy(cols)
    matched = torch.gather(cost, 2, cols_t.clamp_min(0)[..., None])[..., 0]
    per_clip = (matched * valid).sum(dim=1) / n_labels
    return per_clip.mean(), cols


def pit_cross_entropy_clip(logits, labels):
    """Single clip: ``logits`` (k, l), ``labels`` iterable of ids -> (loss, MatchAssignment)."""
    labels = list(labels)
    if not labels:
        raise ValueError("empty label set")
    if len(labels) > logits.shape[0]:
        raise ValueError(f"{len(labels)} labels cannot be matched to {logits.shape[0]} slots")
    loss, cols = pit_cross_entropy(logits[None], pad_labels([labels]))
    row = cols[0]
    cost = -logits.detach().double().log_softmax(-1)[:, labels].T
    pairs = [(r, int(row[r])) for r in range(len(labels))]
    return loss, MatchAssignment(pairs, float(sum(float(cost[r, c]) for r, c in pairs)))


def matched_mask(cols, k):
    """(B, m) assignment -> (B, k) bool mask of slots that carry a label."""
    cols = np.asarray(cols)
    mask = np.zeros((cols.shape[0], k), dtype=bool)
    rows, pos = np.nonzero(cols >= 0)
    mask[rows, cols[rows, pos]] = True
    return torch.from_numpy(mask)


def sparsity_penalty(logits):
    """Mean over slots of the L1 norm of sigmoid class scores, averaged over clips."""
    return torch.sigmoid(logits).sum(dim=-1).mean()


def disjointedness_penalty(slots, projection=None, matched=None, diagnostics=None):
    """Sum over slot pairs i<j of max(0, cos(P s_i, P s_j)), averaged over clips.

    With ``matched`` (B, k) only pairs of matched slots count. Zero-norm
    projected slots give cosine 0.
    """
    squeeze = slots.dim() == 2
    if squeeze:
        slots = slots[None]
        matched = None if matched is None else torch.as_tensor(matched)[None]
    z = slots if projection is None else projection(slots)
    norms = z.norm(dim=-1, keepdim=True)
    if diagnostics is not None:
        diagnostics["zero_norm_slots"] = diagnostics.get("zero_norm_slots", 0) + int((norms == 0).sum())
    unit = z / norms.clamp_min(1e-12)
    cos = F.relu(unit @ unit.transpose(1, 2))
    k = slots.shape[1]
    pair = torch.ones(k, k, dtype=torch.bool, device=slots.device).triu(1)
    if matched is not None:
        m = torch.as_tensor(matched, dtype=torch.bool)
        pair = pair & m[:, :, None] & m[:, None, :]
    per_clip = (cos * pair).sum(dim=(1, 2))
    return per_clip[0] if squeeze else per_clip.mean()


def combined_loss(parts, weights):
    """Weighted sum over whichever of ``ce, recon, sparsity, disjoint`` are present."""
    if isinstance(weights, dict):
        weights = LossWeights(**weights)
    w = {"ce": weights.w_ce, "recon": weights.w_recon,
         "sparsity": weights.w_sparsity, "disjoint": weights.w_disjoint}
    total = 0.0
    for name, value in parts.items():
        if value is None:
            continue
        if name not in w:
            raise KeyError(f"unknown loss term {name!r}")
        if w[name]:
            total = total + w[name] * value
    return total
