"""Analytic gradients against central finite differences (float64, step 1e-5)."""

import numpy as np
import pytest
import torch

from carl.decoders import AutoregressiveDecoder, CNNBroadcastDecoder, MLPBroadcastDecoder
from carl.layers import positional_encoding
from carl.losses import disjointedness_penalty, pad_labels, pit_cross_entropy, sparsity_penalty
from carl.slots import SlotTransformer, slot_transform

from _fd import TOL, projector, relative_error


@pytest.mark.parametrize("attention", ["inverted", "standard"])
def test_slot_transform_gradients(attention):
    torch.manual_seed(0)
    model = SlotTransformer(8, d_s=8, k=3, layers=2, heads=2, attention=attention).double()
    e = torch.randn(2, 4, 8, dtype=torch.float64, requires_grad=True)
    pe = positional_encoding((2, 2), 8)
    w = projector((2, 3, 8))
    fn = lambda: (slot_transform(e, model, pe).values * w).sum()
    leaves = [e, model.queries, model.input_proj.weight, model.layers[0].cross_attn.k.weight,
              model.layers[1].ff.fc1.weight]
    assert relative_error(fn, leaves) < TOL


@pytest.mark.parametrize("alpha", [True, False])
def test_mlp_decoder_gradients(alpha):
    torch.manual_seed(0)
    dec = MLPBroadcastDecoder(8, 4, (2, 2), hidden=8, layers=3, alpha=alpha).double()
    slots = torch.randn(2, 3, 8, dtype=torch.float64, requires_grad=True)
    w = projector((2, 4, 4))
    fn = lambda: (dec(slots).composite * w).sum()
    assert relative_error(fn, [slots, dec.first.weight, dec.out.weight]) < TOL


@pytest.mark.parametrize("alpha", [True, False])
def test_cnn_decoder_gradients(alpha):
    torch.manual_seed(0)
    dec = CNNBroadcastDecoder(4, 16, 16, channels=3, alpha=alpha).double()
    slots = torch.randn(1, 2, 4, dtype=torch.float64, requires_grad=True)
    w = projector((1, 16, 16))
    fn = lambda: (dec(slots).composite * w).sum()
    assert relative_error(fn, [slots, dec.proj.weight, dec.up[1].weight, dec.head.weight]) < TOL


def test_autoregressive_decoder_gradients():
    torch.manual_seed(0)
    dec = AutoregressiveDecoder(8, 4, (2, 2), width=8, layers=1, heads=2).double()
    slots = torch.randn(1, 3, 8, dtype=torch.float64, requires_grad=True)
    target = torch.randn(1, 4, 4, dtype=torch.float64, requires_grad=True)
    w = projector((1, 4, 4))
    fn = lambda: (dec(slots, target).composite * w).sum()
    assert relative_error(fn, [slots, target, dec.bos, dec.layers[0].cross_attn.v.weight]) < TOL


def test_pit_cross_entropy_gradients():
    logits = torch.from_numpy(np.random.default_rng(2).normal(size=(3, 4, 5))).requires_grad_(True)
    labels = pad_labels([[0, 3], [1], [4, 2, 0]])
    fn = lambda: pit_cross_entropy(logits, labels)[0]
    assert relative_error(fn, [logits]) < TOL


def test_sparsity_gradients():
    logits = torch.from_numpy(np.random.default_rng(3).normal(size=(2, 3, 5))).requires_grad_(True)
    assert relative_error(lambda: sparsity_penalty(logits), [logits]) < TOL


@pytest.mark.parametrize("matched", [False, True])
def test_disjointedness_gradients(matched):
    torch.manual_seed(0)
    proj = torch.nn.Linear(6, 4, bias=False).double()
    slots = torch.from_numpy(np.random.default_rng(4).normal(size=(2, 4, 6))).requires_grad_(True)
    mask = torch.tensor([[True, True, False, True], [True, False, True, True]]) if matched else None
    fn = lambda: disjointedness_penalty(slots, proj, mask)
    assert fn() > 0
    assert relative_error(fn, [slots, proj.weight]) < TOL
