import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from carl import losses
from carl.losses import (LossWeights, combined_loss, disjointedness_penalty, hungarian_match,
                         pit_cross_entropy, pit_cross_entropy_clip, sparsity_penalty)


def pit_oracle(logits, labels):
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    k = logits.shape[0]
    return min(np.mean([-logp[s, c] for s, c in zip(perm, labels)])
               for perm in itertools.permutations(range(k), len(labels)))


def test_hungarian_match_known_case():
    cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0]])
    m = hungarian_match(cost)
    assert m.pairs == [(0, 1), (1, 0)] and m.total_cost == 3.0
    assert m.slot_of(1) == 0


def test_hungarian_match_errors():
    with pytest.raises(ValueError):
        hungarian_match(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        hungarian_match(np.array([[0.0, np.nan]]))


def test_pit_matches_exhaustive_oracle(rng):
    for _ in range(200):
        k, n_cls = 4, 6
        m = int(rng.integers(1, 5))
        logits = rng.normal(size=(k, n_cls)) * 2
        labels = rng.choice(n_cls, size=m, replace=False).tolist()
        loss, match = pit_cross_entropy_clip(torch.from_numpy(logits), labels)
        assert float(loss) == pytest.approx(pit_oracle(logits, labels), abs=1e-12)
        assert float(loss) == pytest.approx(match.total_cost / m, abs=1e-12)


def test_pit_batched_equals_per_clip_mean(rng):
    logits = torch.from_numpy(rng.normal(size=(5, 4, 7)))
    sets = [[1], [0, 3], [2, 4, 6], [5], [0, 1, 2, 3]]
    loss, cols = pit_cross_entropy(logits, losses.pad_labels(sets))
    per = [pit_oracle(logits[i].numpy(), s) for i, s in enumerate(sets)]
    assert float(loss) == pytest.approx(np.mean(per), abs=1e-12)
    assert (cols[0, 1:] == -1).all()


def test_pit_known_value():
    logits = torch.tensor([[0.0, 0.0], [10.0, 0.0]], dtype=torch.float64)
    loss, m = pit_cross_entropy_clip(logits, [0])
    assert m.pairs == [(0, 1)]
    assert float(loss) == pytest.approx(math.log(1 + math.exp(-10)))


def test_pit_rejects_bad_label_sets():
    logits = torch.zeros(2, 3)
    with pytest.raises(ValueError):
        pit_cross_entropy_clip(logits, [])
    with pytest.raises(ValueError):
        pit_cross_entropy_clip(logits, [0, 1, 2])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**9))
def test_pit_upper_bounds_and_permutation_invariance(seed):
    g = np.random.default_rng(seed)
    k = int(g.integers(2, 7))
    m = int(g.integers(1, min(k, 4) + 1))
    logits = torch.from_numpy(g.normal(size=(k, 8)) * 3)
    labels = g.choice(8, size=m, replace=False).tolist()
    loss, _ = pit_cross_entropy_clip(logits, labels)
    identity = -logits.log_softmax(-1)[torch.arange(m), labels].mean()
    assert float(loss) <= float(identity) + 1e-12
    perm = torch.from_numpy(g.permutation(k))
    assert float(pit_cross_entropy_clip(logits[perm], labels)[0]) == float(loss)


def test_sparsity_oracle(rng):
    logits = rng.normal(size=(3, 4, 5))
    want = np.mean((1 / (1 + np.exp(-logits))).sum(-1))
    assert float(sparsity_penalty(torch.from_numpy(logits))) == pytest.approx(want, rel=1e-12)


def disjoint_oracle(slots, mask=None):
    total = 0.0
    for b in range(slots.shape[0]):
        for i in range(slots.shape[1]):
            for j in range(i + 1, slots.shape[1]):
                if mask is not None and not (mask[b, i] and mask[b, j]):
                    continue
                u, v = slots[b, i], slots[b, j]
                total += max(0.0, u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
    return total / slots.shape[0]


def test_disjointedness_oracle_all_pairs_and_matched(rng):
    slots = rng.normal(size=(4, 5, 6))
    got = float(disjointedness_penalty(torch.from_numpy(slots)))
    assert got == pytest.approx(disjoint_oracle(slots), rel=1e-12)
    mask = rng.random((4, 5)) < 0.5
    got = float(disjointedness_penalty(torch.from_numpy(slots), matched=torch.from_numpy(mask)))
    assert got == pytest.approx(disjoint_oracle(slots, mask), rel=1e-12, abs=1e-15)


def test_disjointedness_extremes_and_projection():
    same = torch.ones(1, 3, 4, dtype=torch.float64)
    assert float(disjointedness_penalty(same)) == pytest.approx(3.0)
    eye = torch.eye(3, dtype=torch.float64)[None]
    assert float(disjointedness_penalty(eye)) == 0.0
    assert float(disjointedness_penalty(-same[:, :2] * torch.tensor([[1.0], [-1.0]]))) == 0.0
    proj = torch.nn.Linear(4, 2, bias=False).double()
    diag = {}
    zero = torch.zeros(1, 2, 4, dtype=torch.float64)
    assert float(disjointedness_penalty(zero, proj, diagnostics=diag).detach()) == 0.0
    assert diag["zero_norm_slots"] == 2


def test_matched_mask():
    m = losses.matched_mask(np.array([[2, -1], [0, 1]]), 3)
    assert m.tolist() == [[False, False, True], [True, True, False]]


def test_loss_weights():
    assert losses.SUPERVISED.as_dict() == {"w_ce": 1.0, "w_recon": 0.1, "w_sparsity": 0.1, "w_disjoint": 100.0}
    assert losses.SUPERVISED.ablate("disjointedness").w_disjoint == 0.0
    assert losses.SUPERVISED.w_disjoint == 100.0
    with pytest.raises(ValueError):
        LossWeights(w_ce=-1.0)
    with pytest.raises(ValueError):
        LossWeights(w_recon=float("nan"))


def test_combined_loss_weighted_sum():
    parts = {"ce": torch.tensor(2.0), "recon": torch.tensor(3.0), "sparsity": torch.tensor(5.0),
             "disjoint": torch.tensor(0.5)}
    assert float(combined_loss(parts, losses.SUPERVISED)) == pytest.approx(2 + 0.3 + 0.5 + 50)
    assert float(combined_loss({"recon": torch.tensor(3.0), "disjoint": torch.tensor(1.0)},
                               losses.UNSUPERVISED)) == pytest.approx(3.01)
    with pytest.raises(KeyError):
        combined_loss({"bogus": torch.tensor(1.0)}, losses.SUPERVISED)


def test_shared_head_applies_per_slot(rng):
    head = losses.SlotClassifier(6, 4).double()
    slots = torch.from_numpy(rng.normal(size=(2, 3, 6)))
    preds = losses.classify_slots(slots, head)
    torch.testing.assert_close(preds.logits[1, 2], head(slots[1, 2]))
    torch.testing.assert_close(preds.probs_softmax.sum(-1), torch.ones(2, 3, dtype=torch.float64))
    assert ((preds.probs_sigmoid > 0) & (preds.probs_sigmoid < 1)).all()
