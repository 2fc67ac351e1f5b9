"""The ten acceptance criteria, one test each; every test prints one PASS/FAIL line.

Criteria 6 to 8 train on a toy dataset (10 seen classes, polyphony up to 3,
20k training clips) generated once per session. Set ``CARL_ACCEPTANCE_DATA``
to a directory to keep the dataset and its feature cache between sessions.
"""

import itertools
import json
import os
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from carl import checkpoint, config, pipelines, synth
from carl.decoders import (AutoregressiveDecoder, CNNBroadcastDecoder, MLPBroadcastDecoder,
                           composite_features, composite_log_spectrogram)
from carl.encoder import state_digest
from carl.layers import positional_encoding
from carl.losses import (disjointedness_penalty, hungarian_match, pad_labels, pit_cross_entropy,
                         sparsity_penalty)
from carl.metrics import aggregate_max_per_slot, average_precision, silhouette_score
from carl.slots import SlotTransformer, slot_transform

from _fd import TOL, projector, relative_error


# --------------------------------------------------------------------------- 1-5: oracles and properties

def test_matching_oracle(verdict):
    rng = np.random.default_rng(0)
    mismatches = 0
    t0 = time.perf_counter()
    for _ in range(1000):
        k = int(rng.integers(1, 7))
        m = int(rng.integers(1, min(4, k) + 1))
        cost = rng.random((m, k))
        if rng.random() < 0.3:  # integer costs exercise ties
            cost = np.floor(cost * 4)
        best = min(sum(cost[r, c] for r, c in enumerate(p)) for p in itertools.permutations(range(k), m))
        got = hungarian_match(cost)
        cols = [c for _, c in got.pairs]
        if len(set(cols)) != m or sum(cost[r, c] for r, c in enumerate(cols)) != best:
            mismatches += 1
    elapsed = time.perf_counter() - t0
    verdict(1, "matching equals exhaustive minimum", mismatches == 0 and elapsed < 10.0,
            f"{mismatches} mismatches / 1000, {elapsed:.2f} s")


def test_pit_properties(verdict):
    rng = np.random.default_rng(1)
    above_identity, not_invariant = 0, 0
    for _ in range(500):
        b, k, n_cls = int(rng.integers(1, 5)), int(rng.integers(1, 7)), int(rng.integers(2, 9))
        logits = torch.from_numpy(rng.normal(scale=3.0, size=(b, k, n_cls)))
        label_sets = [rng.choice(n_cls, int(rng.integers(1, min(k, n_cls, 4) + 1)), replace=False).tolist()
                      for _ in range(b)]
        labels = pad_labels(label_sets)
        loss, _ = pit_cross_entropy(logits, labels)
        logp = logits.log_softmax(-1)
        identity = np.mean([-np.mean([float(logp[i, j, c]) for j, c in enumerate(s)])
                            for i, s in enumerate(label_sets)])
        if float(loss) > identity + 1e-12:
            above_identity += 1
        perm = torch.from_numpy(rng.permutation(k))
        permuted, _ = pit_cross_entropy(logits[:, perm], labels)
        if float(permuted) != float(loss):
            not_invariant += 1
    verdict(2, "PIT <= identity assignment and exactly slot-permutation invariant",
            above_identity == 0 and not_invariant == 0,
            f"{above_identity} above identity, {not_invariant} not invariant / 500")


def _gradient_errors():
    torch.manual_seed(0)
    errs = {}
    for attention in ("inverted", "standard"):
        st = SlotTransformer(8, d_s=8, k=3, layers=2, heads=2, attention=attention).double()
        e = torch.randn(2, 4, 8, dtype=torch.float64, requires_grad=True)
        pe, w = positional_encoding((2, 2), 8), projector((2, 3, 8))
        errs[f"slot_transform/{attention}"] = relative_error(
            lambda: (slot_transform(e, st, pe).values * w).sum(),
            [e, st.queries, st.input_proj.weight, st.layers[1].cross_attn.q.weight])
    for alpha in (True, False):
        mlp = MLPBroadcastDecoder(8, 4, (2, 2), hidden=8, layers=3, alpha=alpha).double()
        s = torch.randn(2, 3, 8, dtype=torch.float64, requires_grad=True)
        w = projector((2, 4, 4))
        errs[f"mlp/alpha={alpha}"] = relative_error(lambda: (mlp(s).composite * w).sum(), [s, mlp.first.weight])
        cnn = CNNBroadcastDecoder(4, 16, 16, channels=3, alpha=alpha).double()
        s2 = torch.randn(1, 2, 4, dtype=torch.float64, requires_grad=True)
        w2 = projector((1, 16, 16))
        errs[f"cnn/alpha={alpha}"] = relative_error(lambda: (cnn(s2).composite * w2).sum(),
                                                    [s2, cnn.proj.weight, cnn.head.weight])
    ar = AutoregressiveDecoder(8, 4, (2, 2), width=8, layers=1, heads=2).double()
    s3 = torch.randn(1, 3, 8, dtype=torch.float64, requires_grad=True)
    target = torch.randn(1, 4, 4, dtype=torch.float64)
    w3 = projector((1, 4, 4))
    errs["autoregressive"] = relative_error(lambda: (ar(s3, target).composite * w3).sum(), [s3, ar.bos])
    logits = torch.from_numpy(np.random.default_rng(2).normal(size=(3, 4, 5))).requires_grad_(True)
    labels = pad_labels([[0, 3], [1], [4, 2, 0]])
    errs["pit_cross_entropy"] = relative_error(lambda: pit_cross_entropy(logits, labels)[0], [logits])
    errs["sparsity"] = relative_error(lambda: sparsity_penalty(logits), [logits])
    proj = torch.nn.Linear(6, 4, bias=False).double()
    slots = torch.from_numpy(np.random.default_rng(4).normal(size=(2, 4, 6))).requires_grad_(True)
    mask = torch.tensor([[True, True, False, True], [True, False, True, True]])
    errs["disjointedness/all"] = relative_error(lambda: disjointedness_penalty(slots, proj), [slots, proj.weight])
    errs["disjointedness/matched"] = relative_error(lambda: disjointedness_penalty(slots, proj, mask),
                                                    [slots, proj.weight])
    return errs


def test_gradient_suite(verdict):
    errs = _gradient_errors()
    worst = max(errs, key=errs.get)
    verdict(3, "analytic vs finite-difference gradients", all(v < TOL for v in errs.values()),
            f"{len(errs)} components, worst {worst} rel err {errs[worst]:.2e}")


def test_compositing_invariants(verdict):
    torch.manual_seed(0)
    checks = {}
    mlp = MLPBroadcastDecoder(8, 4, (3, 2), hidden=16, alpha=True).double()
    cnn = CNNBroadcastDecoder(8, 16, 8, channels=4, alpha=True).double()
    slots = torch.randn(2, 5, 8, dtype=torch.float64)
    with torch.no_grad():
        checks["mlp alpha sum"] = float((mlp(slots).alpha.sum(dim=1) - 1).abs().max())
        checks["cnn alpha sum"] = float((cnn(slots).alpha.sum(dim=1) - 1).abs().max())

    per_slot = torch.randn(2, 4, 6, 3, dtype=torch.float64)
    alpha_raw = torch.zeros(2, 4, 6, 1, dtype=torch.float64)
    alpha_raw[:, 2] = 60.0
    checks["feature saturation"] = float((composite_features(per_slot, alpha_raw) - per_slot[:, 2]).abs().max())
    log_slots = torch.randn(2, 4, 5, 7, dtype=torch.float64)
    spec_alpha = torch.zeros_like(log_slots)
    spec_alpha[:, 1] = 60.0
    comp, _ = composite_log_spectrogram(log_slots, spec_alpha)
    checks["spectrogram saturation"] = float((comp - log_slots[:, 1]).abs().max())
    tol = {k: 1e-6 for k in checks}

    half = torch.full((1, 2, 3, 3), np.log(0.5), dtype=torch.float64)
    with_alpha, _ = composite_log_spectrogram(half, torch.randn(1, 2, 3, 3, dtype=torch.float64))
    without, _ = composite_log_spectrogram(half)
    checks["k=2 log(0.5) with alpha"] = float((with_alpha - np.log(0.5)).abs().max())
    checks["k=2 log(0.5) without alpha"] = float((without - np.log(1.0)).abs().max())
    tol.update({"k=2 log(0.5) with alpha": 1e-9, "k=2 log(0.5) without alpha": 1e-9})
    bad = [k for k in checks if not checks[k] <= tol[k]]
    verdict(4, "compositing invariants", not bad,
            ", ".join(f"{k} {v:.1e}" for k, v in checks.items()))


def test_metric_oracles(verdict):
    ap = average_precision([0.9, 0.8, 0.1], [1, 0, 1])
    ap_ok = abs(ap - 5 / 6) < 1e-9 and round(ap, 4) == 0.8333
    pts = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [50.0, 50.0], [50.0, 50.0]])
    ss = silhouette_score(pts, [0, 0, 0, 1, 1])
    ss_ok = abs(ss - 1.0) < 1e-9

    rng = np.random.default_rng(5)
    agg_bad = 0
    for _ in range(100):
        k, n_cls = int(rng.integers(1, 7)), int(rng.integers(2, 12))
        probs = rng.random((k, n_cls))
        if rng.random() < 0.3:
            probs = np.round(probs, 1)  # ties
        probs /= probs.sum(axis=1, keepdims=True)
        kept = np.zeros_like(probs)  # step 1: per slot keep only its top score
        for i in range(k):
            top = 0
            for c in range(n_cls):
                if probs[i, c] > probs[i, top]:
                    top = c
            kept[i, top] = probs[i, top]
        clip = np.array([max(kept[i, c] for i in range(k)) for c in range(n_cls)])  # step 2: max over slots
        if not np.array_equal(aggregate_max_per_slot(probs), clip):
            agg_bad += 1
    verdict(5, "metric oracles", ap_ok and ss_ok and agg_bad == 0,
            f"AP {ap:.10f}, silhouette {ss:.12f}, aggregation mismatches {agg_bad}/100")


# --------------------------------------------------------------------------- 6-8: toy-scale reproduction

TOY = {
    "dataset": {"n_seen": 10, "n_unseen": 0, "sizes": {"train": 20000, "val": 200, "eval": 2000},
                "polyphony_dist": [0.34, 0.33, 0.33], "root_seed": 0},
    "encoder": {"d_p": 64, "depth": 2, "heads": 4, "pretrain_steps": 0},
    "slots": {"k": 4, "d_s": 128, "layers": 2, "heads": 4},
    "decoder": {"hidden": 128, "cnn_channels": 8},
    "optimizer": {"steps": 1500, "probe_steps": 1500},
}
TOY_RUNS = {
    "mlp_ds128": {"decoder.kind": "mlp", "decoder.target": "features", "decoder.alpha": False},
    "mlp_ds64": {"decoder.kind": "mlp", "decoder.target": "features", "decoder.alpha": False, "slots.d_s": 64},
    "mlp_ds16": {"decoder.kind": "mlp", "decoder.target": "features", "decoder.alpha": False, "slots.d_s": 16},
    "cnn_ds128": {"decoder.kind": "cnn", "decoder.target": "spectrogram", "decoder.alpha": False},
}


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    t0 = time.time()
    root = os.environ.get("CARL_ACCEPTANCE_DATA") or str(tmp_path_factory.mktemp("toy") / "data")
    doc = {k: dict(v) for k, v in TOY.items()}
    doc["dataset"]["path"] = os.path.abspath(root)
    cfg = config.resolve(doc)
    ds = cfg["dataset"]
    if not os.path.exists(os.path.join(root, "dataset_meta.json")):
        vocab = synth.build_vocabulary(ds["root_seed"], ds["n_seen"], ds["n_unseen"])
        synth.make_dataset(vocab, ds["sizes"], ds["polyphony_dist"], ds["root_seed"], root, force=True)
    data = pipelines.prepare_data(cfg)
    reports = {"baseline": pipelines.baseline_mixture_copy(cfg, None, data).eval_report}
    for name, overrides in TOY_RUNS.items():
        run_cfg = config.with_overrides(cfg, {**overrides, "experiment.mode": "unsupervised"})
        reports[name] = pipelines.train_unsupervised(run_cfg, None, data, name).eval_report
    untrained = config.with_overrides(cfg, {**TOY_RUNS["mlp_ds128"], "experiment.mode": "unsupervised"})
    reports["random_slots"] = pipelines.train_probe_stage2(pipelines.build_model(untrained, data), untrained,
                                                           data, run_id="random_slots")[2]
    for name, rep in reports.items():
        print(f"toy {name}: " + " ".join(f"{c}={rep.map[c]:.3f}" for c in ("all", "p1", "p2", "p3")))
    return reports, time.time() - t0


@pytest.mark.slow
def test_slots_beat_clip_level_at_high_polyphony(toy, verdict):
    reports, elapsed = toy
    base = reports["baseline"].map
    best = max((n for n in reports if n in TOY_RUNS), key=lambda n: reports[n].map["all"])
    m = reports[best].map
    d2, d3 = m["p2"] - base["p2"], m["p3"] - base["p3"]
    verdict(6, "best CARL beats mixture-copy on p2 and p3 by >= 0.05",
            d2 >= 0.05 and d3 >= 0.05 and elapsed < 3600,
            f"best {best}: p2 {m['p2']:.3f} vs {base['p2']:.3f} (+{d2:.3f}), "
            f"p3 {m['p3']:.3f} vs {base['p3']:.3f} (+{d3:.3f}); toy session {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_feature_target_beats_spectrogram_target(toy, verdict):
    reports, _ = toy
    mlp, cnn = reports["mlp_ds128"].map["all"], reports["cnn_ds128"].map["all"]
    verdict(7, "unsupervised MLP/features probe mAP >= CNN/spectrogram", mlp >= cnn,
            f"MLP {mlp:.3f}, CNN {cnn:.3f}, margin {mlp - cnn:+.3f}")


@pytest.mark.slow
def test_slot_width_monotonicity(toy, verdict):
    reports, _ = toy
    widths = (128, 64, 16)
    maps = [reports[f"mlp_ds{w}"].map["all"] for w in widths]
    rises = [b - a for a, b in zip(maps, maps[1:]) if b > a]
    ok = len(rises) == 0 or (len(rises) == 1 and rises[0] <= 0.02)
    verdict(8, "probe mAP non-increasing as slot width shrinks", ok,
            ", ".join(f"d_s={w}: {v:.3f}" for w, v in zip(widths, maps)))


@pytest.mark.slow
def test_trained_slots_beat_random_slots(toy):
    reports, _ = toy
    trained, untrained = reports["mlp_ds128"].map["all"], reports["random_slots"].map["all"]
    print(f"probe mAP trained stage 1 {trained:.3f} vs frozen random slots {untrained:.3f}")
    assert trained > untrained


# --------------------------------------------------------------------------- 9-10: purity and determinism

def _without_labels(data, scramble_seed=None):
    """Same audio; labels scrambled, or removed entirely when ``scramble_seed`` is None."""
    rng = np.random.default_rng(scramble_seed)
    splits = {}
    for name, split in data.splits.items():
        labels = np.full_like(split.labels, -1)
        if scramble_seed is not None:
            valid = split.labels >= 0
            labels[valid] = rng.integers(0, data.n_seen, size=int(valid.sum()))
        splits[name] = replace(split, labels=labels)
    return replace(data, splits=splits)


def _stage1_bytes(cfg, data):
    model, _, _ = pipelines.train_unsupervised_stage1(cfg, data)
    meta = pipelines._meta("carl", cfg, data, stage="stage1", n_classes=data.n_seen)
    return checkpoint.dumps(meta, pipelines._tensors(data, model=model))


def test_two_stage_purity(tiny_cfg, tiny_data, verdict, monkeypatch):
    cfg = config.with_overrides(tiny_cfg, {"experiment.mode": "unsupervised"})
    reference = _stage1_bytes(cfg, tiny_data)
    toggled = [_stage1_bytes(cfg, _without_labels(tiny_data)), _stage1_bytes(cfg, _without_labels(tiny_data, 7))]
    identical = all(b == reference for b in toggled)

    # every pipeline finishes with its audits and leaves the encoder untouched
    enc_digest = state_digest(tiny_data.encoder)
    sup = pipelines.train_supervised(tiny_cfg, None, tiny_data)
    pipelines.train_unsupervised(cfg, None, tiny_data)
    pipelines.baseline_mixture_copy(tiny_cfg, None, tiny_data)
    pipelines.generalization_probe(sup.model, tiny_cfg, None, tiny_data)
    untouched = state_digest(tiny_data.encoder) == enc_digest

    # and the audits do fire when a frozen module is changed behind their back
    real = pipelines._optimize

    def tampering(*args, **kwargs):
        rows = real(*args, **kwargs)
        with torch.no_grad():
            next(tiny_data.encoder.parameters()).add_(1e-3)
        return rows

    monkeypatch.setattr(pipelines, "_optimize", tampering)
    caught = 0
    for run in (lambda: pipelines.train_supervised(tiny_cfg, None, tiny_data),
                lambda: pipelines.train_unsupervised_stage1(cfg, tiny_data)):
        state = {k: v.clone() for k, v in tiny_data.encoder.state_dict().items()}
        try:
            run()
        except pipelines.FrozenModuleError:
            caught += 1
        finally:
            tiny_data.encoder.load_state_dict(state)
    verdict(9, "stage 1 label-free and frozen audits pass", identical and untouched and caught == 2,
            f"label toggles bitwise identical: {identical}, encoder untouched: {untouched}, "
            f"tampering caught {caught}/2")


def test_determinism(tiny_cfg, tmp_path, verdict):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(json.dumps(config.with_overrides(tiny_cfg, {"experiment.mode": "unsupervised"})))
    outs = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        proc = subprocess.run([sys.executable, "-m", "carl", "train", "--config", str(cfg_path), "--seed", "3",
                               "--out", str(out), "--quiet"], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append((out / "eval_report.json").read_bytes())
    verdict(10, "identical config and seed give byte-equal EvalReport JSON", outs[0] == outs[1],
            f"{len(outs[0])} bytes, two separate processes")
