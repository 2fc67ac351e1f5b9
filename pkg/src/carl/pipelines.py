"""Training and evaluation orchestration.

Every routine takes a resolved config and an optional ``PreparedData`` (the
frozen encoder plus cached spectrograms/features), so suites can share one
encoder pass over the dataset.
"""

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import checkpoint, config as cfgmod
from .decoders import build_decoder, reconstruction_loss
from .encoder import (build_encoder, clip_embedding, encode, encoder_from, load_encoder,
                      pretrain_masked, save_encoder, state_digest)
from .frontend import log_mel, n_frames
from .layers import positional_encoding
from .losses import (SlotClassifier, combined_loss, disjointedness_penalty, matched_mask,
                     pad_labels, pit_cross_entropy, sparsity_penalty)
from .metrics import (EvalReport, aggregate_max_per_slot, build_report, chance_map,
                      mean_average_precision, supervised_silhouette)
from .slots import SlotTransformer
from .synth import dataset_hash, load_manifest, load_vocab, load_waveform

log = logging.getLogger("carl")

LOSS_COLUMNS = ("step", "ce", "recon", "sparsity", "disjoint", "total")


class TrainingDiverged(FloatingPointError):
    pass


class FrozenModuleError(RuntimeError):
    pass


# --------------------------------------------------------------------------- data

@dataclass
class SplitData:
    name: str
    mel: np.ndarray  # (N, t, f) cropped to whole patches
    feats: np.ndarray  # (N, n, d_p)
    labels: np.ndarray  # (N, m) padded with -1
    polyphony: np.ndarray
    probe_split: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, name=None):
        idx = np.asarray(idx)
        return SplitData(name or self.name, self.mel[idx], self.feats[idx], self.labels[idx],
                         self.polyphony[idx], None if self.probe_split is None else self.probe_split[idx])

    def multi_hot(self, n_classes):
        out = np.zeros((len(self), n_classes), dtype=bool)
        rows, pos = np.nonzero(self.labels >= 0)
        out[rows, self.labels[rows, pos]] = True
        return out


@dataclass
class PreparedData:
    root: str
    dataset_hash: str
    encoder: nn.Module
    n_seen: int
    n_unseen: int
    grid: tuple
    spec_shape: tuple
    splits: dict

    @property
    def d_p(self):
        return self.encoder.d_p

    def eval_seen(self):
        """Eval clips whose labels are all seen classes."""
        ev = self.splits["eval"]
        keep = np.all((ev.labels < self.n_seen), axis=1)
        return ev.subset(np.nonzero(keep)[0], "eval_seen")


def _frontend_key(ds_cfg):
    return f"{ds_cfg['n_mels']}_{ds_cfg['win_length']}_{ds_cfg['hop_length']}_{ds_cfg['n_fft']}"


def _split_mel(root, split, ds_cfg, records):
    cache = os.path.join(root, "cache", f"mel_{split}_{_frontend_key(ds_cfg)}.npy")
    if os.path.exists(cache):
        mel = np.load(cache, mmap_mode="r")
        if len(mel) == len(records):
            return np.asarray(mel)
    t = n_frames(16000, ds_cfg["win_length"], ds_cfg["hop_length"])
    mel = np.empty((len(records), t, ds_cfg["n_mels"]), dtype=np.float32)
    for start in range(0, len(records), 256):
        chunk = records[start:start + 256]
        waves = np.stack([load_waveform(root, r) for r in chunk])
        mel[start:start + len(chunk)] = log_mel(waves, ds_cfg["n_mels"], ds_cfg["win_length"],
                                                ds_cfg["hop_length"], ds_cfg["n_fft"])
    os.makedirs(os.path.dirname(cache), exist_ok=True)
    np.save(cache, mel)
    return mel


def _encoder_for(cfg, root, train_mel):
    enc_cfg = cfg["encoder"]
    if enc_cfg["checkpoint"]:
        return load_encoder(enc_cfg["checkpoint"])
    key = hashlib.sha256(cfgmod.canonical_json(
        {k: v for k, v in enc_cfg.items() if k != "checkpoint"}).encode()).hexdigest()[:12]
    cached = os.path.join(root, "cache", f"encoder_{key}.ckpt")
    if os.path.exists(cached):
        return load_encoder(cached)
    enc = build_encoder(enc_cfg)
    if enc_cfg["pretrain_steps"] > 0:
        enc, _ = pretrain_masked(enc, train_mel, enc_cfg["mask_ratio"], enc_cfg["pretrain_steps"],
                                 enc_cfg["pretrain_lr"], enc_cfg["pretrain_batch_size"],
                                 seed=enc_cfg["seed"], log=log.info)
    else:
        stats = np.asarray(train_mel, dtype=np.float64)
        enc.set_input_stats(stats.mean(), stats.std())
        enc.freeze()
    os.makedirs(os.path.dirname(cached), exist_ok=True)
    save_encoder(cached, enc)
    return enc


def prepare_data(cfg, root=None, splits=("train", "eval"), encoder=None):
    """Load manifests, compute/cache log-mels and frozen-encoder features."""
    root = root or cfg["dataset"]["path"]
    if not root or not os.path.isdir(root):
        raise FileNotFoundError(f"dataset directory not found: {root}")
    ds_cfg = cfg["dataset"]
    vocab = load_vocab(root)
    n_seen = sum(c.split == "seen" for c in vocab)
    records = {s: load_manifest(root, s) for s in splits}
    mels = {s: _split_mel(root, s, ds_cfg, records[s]) for s in splits}
    if encoder is None:
        train_mel = mels["train"] if "train" in mels else _split_mel(
            root, "train", ds_cfg, load_manifest(root, "train"))
        encoder = _encoder_for(cfg, root, train_mel)
    encoder.freeze()
    p_t, p_f = encoder.patch_size
    some = next(iter(mels.values()))
    grid = encoder.grid_for(*some.shape[1:])
    spec_shape = (grid[0] * p_t, grid[1] * p_f)
    digest = state_digest(encoder)[:16]
    out = {}
    for s in splits:
        cache = os.path.join(root, "cache", f"feat_{s}_{_frontend_key(ds_cfg)}_{digest}.npy")
        if os.path.exists(cache) and len(np.load(cache, mmap_mode="r")) == len(records[s]):
            feats = np.load(cache)
        else:
            feats = encode(mels[s], encoder).values.numpy()
            np.save(cache, feats)
        recs = records[s]
        max_poly = max(len(r["labels"]) for r in recs)
        labels = pad_labels([r["labels"] for r in recs], max_poly)
        probe = np.array([r.get("probe_split", "") for r in recs]) if s == "eval" else None
        out[s] = SplitData(s, mels[s][:, : spec_shape[0], : spec_shape[1]], feats, labels,
                           np.array([r["polyphony"] for r in recs]), probe)
    return PreparedData(root, dataset_hash(root), encoder, n_seen, len(vocab) - n_seen,
                        grid, spec_shape, out)


# --------------------------------------------------------------------------- model

class CARLModel(nn.Module):
    """Slot transformer, reconstruction decoder, shared slot classifier and disjointedness projection."""

    def __init__(self, cfg, d_p, grid, spec_shape, n_classes):
        super().__init__()
        s = cfg["slots"]
        self.slots = SlotTransformer(d_p, s["d_s"], s["k"], s["layers"], s["heads"], s["attention"])
        self.decoder = build_decoder(cfg["decoder"], s["d_s"], d_p, grid, spec_shape)
        self.classifier = SlotClassifier(s["d_s"], n_classes)
        d_proj = cfg["disjoint"]["d_proj"]
        self.projection = nn.Linear(s["d_s"], d_proj, bias=False) if d_proj else nn.Identity()
        self.register_buffer("pe", positional_encoding(grid, d_p).float())
        self.target = cfg["decoder"]["target"]
        self.autoregressive = cfg["decoder"]["kind"] == "transformer"

    def embed(self, feats):
        return self.slots(feats, self.pe)

    def reconstruct(self, slots, feats, mel):
        target = feats if self.target == "features" else mel
        recon = self.decoder(slots, target) if self.autoregressive else self.decoder(slots)
        return recon, target


def build_model(cfg, data, n_classes=None):
    torch.manual_seed(cfg["optimizer"]["seed"])
    return CARLModel(cfg, data.d_p, data.grid, data.spec_shape, n_classes or data.n_seen)


@torch.no_grad()
def embed_all(model, feats, batch_size=256):
    model.eval()
    out = [model.embed(torch.from_numpy(np.asarray(feats[i:i + batch_size])))
           for i in range(0, len(feats), batch_size)]
    model.train()
    return torch.cat(out)


# --------------------------------------------------------------------------- optimization

def _batches(rng, n, batch_size):
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield perm[i:i + batch_size]


def _optimize(params, step_fn, n_items, steps, lr, batch_size, grad_clip, seed, tag, on_step=None):
    """Adam with cosine decay and global-norm clipping. Returns loss rows."""
    params = [p for p in params if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: 0.5 * (1.0 + math.cos(math.pi * min(s, steps) / max(1, steps))))
    batches = _batches(np.random.default_rng(seed), n_items, min(batch_size, n_items))
    rows = []
    for step in range(steps):
        idx = next(batches)
        total, parts = step_fn(idx)
        parts = {k: (None if v is None else float(v.detach())) for k, v in parts.items()}
        bad = [k for k, v in parts.items() if v is not None and not math.isfinite(v)]
        if bad or not torch.isfinite(total):
            raise TrainingDiverged(f"{tag}: non-finite loss at step {step} (terms: {bad or ['total']})")
        opt.zero_grad(set_to_none=True)
        total.backward()
        if grad_clip:
            torch.nn.utils.clip_grad_norm_(params, grad_clip)
        opt.step()
        sched.step()
        row = {"step": step, "total": float(total.detach())}
        row.update({k: (float("nan") if v is None else float(v)) for k, v in parts.items()})
        rows.append(row)
        if on_step is not None:
            on_step(step)
        if step % 200 == 0 or step == steps - 1:
            log.info("%s step %d/%d total %.4f", tag, step, steps, row["total"])
    return rows


def _supervised_step(model, split, weights, diagnostics):
    labels_all = split.labels

    def step(idx):
        feats = torch.from_numpy(np.asarray(split.feats[idx]))
        mel = torch.from_numpy(np.asarray(split.mel[idx]))
        slots = model.embed(feats)
        logits = model.classifier(slots)
        ce, cols = pit_cross_entropy(logits, labels_all[idx])
        parts = {"ce": ce, "sparsity": sparsity_penalty(logits)}
        parts["disjoint"] = disjointedness_penalty(
            slots, model.projection, matched_mask(cols, slots.shape[1]), diagnostics)
        with torch.set_grad_enabled(weights["w_recon"] > 0):
            recon, target = model.reconstruct(slots, feats, mel)
            parts["recon"] = reconstruction_loss(recon, target)
        diagnostics["clamped"] = diagnostics.get("clamped", 0) + recon.n_clamped
        return combined_loss(parts, weights), parts

    return step


def _stage1_step(model, feats_all, mel_all, weights, diagnostics):
    # labels are deliberately out of reach here
    def step(idx):
        feats = torch.from_numpy(np.asarray(feats_all[idx]))
        mel = torch.from_numpy(np.asarray(mel_all[idx]))
        slots = model.embed(feats)
        recon, target = model.reconstruct(slots, feats, mel)
        parts = {"recon": reconstruction_loss(recon, target),
                 "disjoint": disjointedness_penalty(slots, model.projection, None, diagnostics)}
        diagnostics["clamped"] = diagnostics.get("clamped", 0) + recon.n_clamped
        return combined_loss(parts, weights), parts

    return step


def train_head(slot_embs, labels, n_classes, cfg, seed=None, tag="probe"):
    """Fit a fresh shared linear head on frozen slot embeddings with PIT cross-entropy."""
    opt_cfg = cfg["optimizer"]
    seed = opt_cfg["seed"] if seed is None else seed
    torch.manual_seed(seed + 1)
    head = SlotClassifier(slot_embs.shape[-1], n_classes)
    slot_embs = torch.as_tensor(slot_embs)

    def step(idx):
        ce, _ = pit_cross_entropy(head(slot_embs[idx]), labels[idx])
        return ce, {"ce": ce}

    rows = _optimize(head.parameters(), step, len(labels), opt_cfg["probe_steps"], opt_cfg["probe_lr"],
                     opt_cfg["probe_batch_size"], opt_cfg["grad_clip"], seed + 1, tag)
    return head, rows


# --------------------------------------------------------------------------- evaluation

@torch.no_grad()
def evaluate_slots(slot_embs, head, split, n_classes, cfg, config_hash="", data_hash="", extra=None):
    """EvalReport from slot embeddings (N, k, d) and a shared head."""
    slot_embs = torch.as_tensor(slot_embs)
    logits = head(slot_embs)
    probs = logits.softmax(-1).double().numpy()
    clip_scores = aggregate_max_per_slot(probs)
    scores = mean_average_precision(clip_scores, split.multi_hot(n_classes), split.polyphony)
    _, cols = pit_cross_entropy(logits, split.labels)
    sil = supervised_silhouette(slot_embs.double().numpy(), cols, split.labels,
                                cfg["experiment"]["silhouette_cap"], seed=cfg["optimizer"]["seed"])
    return build_report(scores, sil, config_hash, data_hash, extra)


@dataclass
class RunRecord:
    run_id: str
    kind: str
    config_hash: str
    dataset_hash: str
    eval_report: Optional[EvalReport]
    curves: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    extra: dict = field(default_factory=dict)
    model: Optional[nn.Module] = field(default=None, repr=False, compare=False)

    def summary(self):
        return {"run_id": self.run_id, "kind": self.kind, "config_hash": self.config_hash,
                "dataset_hash": self.dataset_hash, "checkpoints": self.checkpoints,
                "wall_clock_s": round(self.wall_clock_s, 3), "extra": self.extra,
                "eval_report": None if self.eval_report is None else json.loads(self.eval_report.to_json())}


def _write_curves(path, rows, columns=LOSS_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([r["step"]] + [f"{r.get(c, float('nan')):.6g}" for c in columns[1:]])


def _finish(record, cfg, out_dir, stage_tensors):
    """Persist config, curves, checkpoints, report and run summary under ``out_dir``."""
    if out_dir is None:
        return record
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
    for name, rows in record.curves.items():
        _write_curves(os.path.join(out_dir, f"{name}.csv"), rows,
                      LOSS_COLUMNS if name == "losses" else ("step", "ce", "total"))
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    for fname, (meta, tensors) in stage_tensors.items():
        path = os.path.join(ckpt_dir, fname)
        checkpoint.save(path, meta, tensors)
        record.checkpoints.append(os.path.relpath(path, out_dir))
    if record.eval_report is not None:
        with open(os.path.join(out_dir, "eval_report.json"), "w") as fh:
            fh.write(record.eval_report.to_json() + "\n")
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(record.summary(), fh, indent=1, sort_keys=True)
    return record


def _meta(kind, cfg, data, **extra):
    meta = {"kind": kind, "config": cfg, "config_hash": cfgmod.config_hash(cfg),
            "dataset_hash": data.dataset_hash, "encoder": data.encoder.header(),
            "grid": list(data.grid), "spec_shape": list(data.spec_shape)}
    meta.update(extra)
    return meta


def _tensors(data, **modules):
    out = checkpoint.prefixed(data.encoder.state_dict(), "encoder.")
    for prefix, mod in modules.items():
        out.update(checkpoint.prefixed(mod.state_dict(), prefix + "."))
    return out


def _cadence(cfg, out_dir, data, model, stage, saved):
    """Periodic checkpoint callback, or None when disabled."""
    every = cfg["experiment"]["checkpoint_every"]
    if not every or out_dir is None:
        return None

    def on_step(step):
        if (step + 1) % every == 0:
            path = os.path.join(out_dir, "checkpoints", f"{stage}_step{step + 1:07d}.ckpt")
            os.makedirs(os.path.dirname(path), exist_ok=True)
            checkpoint.save(path, _meta("carl", cfg, data, stage=stage, step=step + 1, n_classes=data.n_seen),
                            _tensors(data, model=model))
            saved.append(os.path.relpath(path, out_dir))

    return on_step


def _audit(module, before, what):
    if state_digest(module) != before:
        raise FrozenModuleError(f"frozen {what} weights changed during training")


# --------------------------------------------------------------------------- pipelines

def train_supervised(cfg, out_dir=None, data=None, run_id="supervised"):
    """Joint training of slots, decoder, classifier and projection with the combined loss."""
    t0 = time.time()
    cfg = cfgmod.with_overrides(cfg, {"experiment.mode": "supervised"})
    data = data or prepare_data(cfg)
    weights = cfgmod.loss_weights(cfg)
    model = build_model(cfg, data)
    enc_before = state_digest(data.encoder)
    diagnostics = {}
    opt = cfg["optimizer"]
    train = data.splits["train"]
    saved = []
    rows = _optimize(model.parameters(), _supervised_step(model, train, weights, diagnostics), len(train),
                     opt["steps"], opt["lr"], opt["batch_size"], opt["grad_clip"], opt["seed"], run_id,
                     _cadence(cfg, out_dir, data, model, "supervised", saved))
    _audit(data.encoder, enc_before, "encoder")
    ev = data.eval_seen()
    chash = cfgmod.config_hash(cfg)
    report = evaluate_slots(embed_all(model, ev.feats), model.classifier, ev, data.n_seen, cfg,
                            chash, data.dataset_hash)
    record = RunRecord(run_id, "supervised", chash, data.dataset_hash, report, {"losses": rows}, saved,
                       wall_clock_s=time.time() - t0, model=model,
                       extra={"diagnostics": diagnostics, "weights": weights})
    return _finish(record, cfg, out_dir, {
        "model.ckpt": (_meta("carl", cfg, data, stage="supervised", n_classes=data.n_seen),
                       _tensors(data, model=model))})


def train_unsupervised_stage1(cfg, data, run_id="stage1", out_dir=None, saved=None):
    """Reconstruction + all-pairs disjointedness; never reads labels. Returns (model, rows, diagnostics)."""
    cfg = cfgmod.with_overrides(cfg, {"experiment.mode": "unsupervised"})
    weights = cfgmod.loss_weights(cfg)
    if weights["w_ce"] or weights["w_sparsity"]:
        raise cfgmod.ConfigError("loss", "stage 1 cannot use label-dependent losses")
    model = build_model(cfg, data)
    head_before = state_digest(model.classifier)
    enc_before = state_digest(data.encoder)
    train = data.splits["train"]
    feats_all, mel_all = train.feats, train.mel
    diagnostics = {}
    params = [*model.slots.parameters(), *model.decoder.parameters(), *model.projection.parameters()]
    opt = cfg["optimizer"]
    rows = _optimize(params, _stage1_step(model, feats_all, mel_all, weights, diagnostics), len(feats_all),
                     opt["steps"], opt["lr"], opt["batch_size"], opt["grad_clip"], opt["seed"], run_id,
                     _cadence(cfg, out_dir, data, model, "stage1", [] if saved is None else saved))
    _audit(model.classifier, head_before, "classifier")
    _audit(data.encoder, enc_before, "encoder")
    return model, rows, diagnostics


def train_probe_stage2(model, cfg, data, trainable=("classifier",), run_id="stage2"):
    """Fit the shared head on frozen slot embeddings. Returns (head, rows, report)."""
    if tuple(trainable) != ("classifier",):
        raise FrozenModuleError("stage 2 trains only the classifier; slot transformer and encoder stay frozen")
    for p in model.slots.parameters():
        p.requires_grad_(False)
    slots_before = state_digest(model.slots)
    enc_before = state_digest(data.encoder)
    train = data.splits["train"]
    head, rows = train_head(embed_all(model, train.feats), train.labels, data.n_seen, cfg, tag=run_id)
    model.classifier.load_state_dict(head.state_dict())
    _audit(model.slots, slots_before, "slot transformer")
    _audit(data.encoder, enc_before, "encoder")
    ev = data.eval_seen()
    report = evaluate_slots(embed_all(model, ev.feats), model.classifier, ev, data.n_seen, cfg,
                            cfgmod.config_hash(cfg), data.dataset_hash)
    return head, rows, report


def train_unsupervised(cfg, out_dir=None, data=None, run_id="unsupervised"):
    """Two-stage unsupervised CARL: stage 1 then a linear probe on frozen slots."""
    t0 = time.time()
    cfg = cfgmod.with_overrides(cfg, {"experiment.mode": "unsupervised"})
    data = data or prepare_data(cfg)
    saved = []
    model, rows1, diagnostics = train_unsupervised_stage1(cfg, data, run_id + "/stage1", out_dir, saved)
    stage1 = (_meta("carl", cfg, data, stage="stage1", n_classes=data.n_seen), _tensors(data, model=model))
    _, rows2, report = train_probe_stage2(model, cfg, data, run_id=run_id + "/stage2")
    record = RunRecord(run_id, "unsupervised", cfgmod.config_hash(cfg), data.dataset_hash, report,
                       {"losses": rows1, "losses_probe": rows2}, saved, wall_clock_s=time.time() - t0,
                       model=model, extra={"diagnostics": diagnostics, "weights": cfgmod.loss_weights(cfg)})
    return _finish(record, cfg, out_dir, {
        "stage1.ckpt": stage1,
        "model.ckpt": (_meta("carl", cfg, data, stage="stage2", n_classes=data.n_seen),
                       _tensors(data, model=model))})


def load_model(path, data=None):
    """Rebuild a CARLModel from a checkpoint; returns (meta, model, encoder)."""
    meta, tensors = checkpoint.load(path)
    if meta.get("kind") != "carl":
        raise checkpoint.CheckpointError(f"{path} is not a CARL model checkpoint")
    encoder = encoder_from(meta["encoder"], checkpoint.strip_prefix(tensors, "encoder."))
    cfg = meta["config"]
    torch.manual_seed(0)
    model = CARLModel(cfg, meta["encoder"]["d_p"], tuple(meta["grid"]), tuple(meta["spec_shape"]),
                      meta["n_classes"])
    model.load_state_dict(checkpoint.strip_prefix(tensors, "model."))
    return meta, model, encoder


def probe_from_checkpoint(path, cfg=None, out_dir=None, dataset=None, run_id="probe"):
    """Stage 2 on an existing stage-1 checkpoint."""
    t0 = time.time()
    meta, model, encoder = load_model(path)
    cfg = cfg or meta["config"]
    data = prepare_data(cfg, root=dataset or cfg["dataset"]["path"], encoder=encoder)
    _, rows, report = train_probe_stage2(model, cfg, data, run_id=run_id)
    record = RunRecord(run_id, "probe", cfgmod.config_hash(cfg), data.dataset_hash, report,
                       {"losses_probe": rows}, wall_clock_s=time.time() - t0)
    return _finish(record, cfg, out_dir, {
        "model.ckpt": (_meta("carl", cfg, data, stage="stage2", n_classes=data.n_seen),
                       _tensors(data, model=model))})


def _pseudo_slots(feats, k):
    emb = clip_embedding(torch.from_numpy(np.asarray(feats)))
    return emb[:, None, :].expand(-1, k, -1).contiguous()


def baseline_mixture_copy(cfg, out_dir=None, data=None, run_id="baseline"):
    """Mean-pooled clip embedding copied to k pseudo-slots, shared linear head, PIT CE."""
    t0 = time.time()
    data = data or prepare_data(cfg)
    k = cfg["slots"]["k"]
    enc_before = state_digest(data.encoder)
    train = data.splits["train"]
    head, rows = train_head(_pseudo_slots(train.feats, k), train.labels, data.n_seen, cfg, tag=run_id)
    _audit(data.encoder, enc_before, "encoder")
    ev = data.eval_seen()
    chash = cfgmod.config_hash(cfg)
    report = evaluate_slots(_pseudo_slots(ev.feats, k), head, ev, data.n_seen, cfg, chash, data.dataset_hash)
    record = RunRecord(run_id, "baseline", chash, data.dataset_hash, report, {"losses_probe": rows},
                       wall_clock_s=time.time() - t0, model=head)
    return _finish(record, cfg, out_dir, {
        "baseline.ckpt": (_meta("baseline", cfg, data, n_classes=data.n_seen, k=k),
                          _tensors(data, head=head))})


def _generalization_reports(model_embed, head, data, cfg, chash):
    ev = data.splits["eval"]
    n_total = data.n_seen + data.n_unseen
    test = ev.subset(np.nonzero(ev.probe_split == "test")[0], "probe_test")
    embs = model_embed(test.feats)
    report = evaluate_slots(embs, head, test, n_total, cfg, chash, data.dataset_hash)
    has_unseen = np.any(test.labels >= data.n_seen, axis=1)
    extra = {}
    for name, sel in (("seen_only", ~has_unseen), ("with_unseen", has_unseen)):
        if sel.any():
            sub = test.subset(np.nonzero(sel)[0])
            r = evaluate_slots(embs[torch.from_numpy(np.nonzero(sel)[0])], head, sub, n_total, cfg)
            extra[name] = {"map": r.map["all"], "chance": chance_map(sub.multi_hot(n_total))}
        else:
            extra[name] = None
    report.extra = extra
    return report


def generalization_probe(source, cfg=None, out_dir=None, data=None, run_id="generalization"):
    """Discard the classifier, freeze slots, fit a fresh seen+unseen head on probe-train.

    ``source`` is a trained ``CARLModel`` or a checkpoint path.
    """
    t0 = time.time()
    if isinstance(source, (str, os.PathLike)):
        meta, model, encoder = load_model(source)
        cfg = cfg or meta["config"]
        data = data or prepare_data(cfg, encoder=encoder)
    else:
        model = source
        data = data or prepare_data(cfg)
    ev = data.splits["eval"]
    n_total = data.n_seen + data.n_unseen
    probe_train = ev.subset(np.nonzero(ev.probe_split == "train")[0], "probe_train")
    present = set(probe_train.labels[probe_train.labels >= 0].tolist())
    missing = sorted(set(range(data.n_seen, n_total)) - present)
    if missing:
        raise ValueError(f"unseen classes {missing} absent from probe-train split")
    for p in model.parameters():
        p.requires_grad_(False)
    before = state_digest(model.slots)
    head, rows = train_head(embed_all(model, probe_train.feats), probe_train.labels, n_total, cfg, tag=run_id)
    _audit(model.slots, before, "slot transformer")
    chash = cfgmod.config_hash(cfg)
    report = _generalization_reports(lambda f: embed_all(model, f), head, data, cfg, chash)
    record = RunRecord(run_id, "generalization", chash, data.dataset_hash, report, {"losses_probe": rows},
                       wall_clock_s=time.time() - t0)
    return _finish(record, cfg, out_dir, {
        "generalization.ckpt": (_meta("generalization", cfg, data, n_classes=n_total),
                                _tensors(data, model=model, probe_head=head))})


def evaluate_checkpoint(path, dataset=None):
    """Recompute the EvalReport of any run checkpoint against ``dataset``."""
    meta, tensors = checkpoint.load(path)
    cfg = meta["config"]
    encoder = encoder_from(meta["encoder"], checkpoint.strip_prefix(tensors, "encoder."))
    data = prepare_data(cfg, root=dataset or cfg["dataset"]["path"], splits=("eval",), encoder=encoder)
    chash = meta["config_hash"]
    kind = meta["kind"]
    if kind == "baseline":
        head = SlotClassifier(encoder.d_p, meta["n_classes"])
        head.load_state_dict(checkpoint.strip_prefix(tensors, "head."))
        ev = data.eval_seen()
        return evaluate_slots(_pseudo_slots(ev.feats, meta["k"]), head, ev, data.n_seen, cfg,
                              chash, data.dataset_hash)
    if kind == "generalization":
        model = CARLModel(cfg, encoder.d_p, tuple(meta["grid"]), tuple(meta["spec_shape"]), data.n_seen)
        model.load_state_dict(checkpoint.strip_prefix(tensors, "model."), strict=False)
        head = SlotClassifier(model.slots.d_s, meta["n_classes"])
        head.load_state_dict(checkpoint.strip_prefix(tensors, "probe_head."))
        return _generalization_reports(lambda f: embed_all(model, f), head, data, cfg, chash)
    _, model, _ = load_model(path)
    ev = data.eval_seen()
    return evaluate_slots(embed_all(model, ev.feats), model.classifier, ev, meta["n_classes"], cfg,
                          chash, data.dataset_hash)


def run_from_config(cfg, out_dir=None, data=None, run_id=None):
    """Dispatch on ``experiment.mode``."""
    if cfg["experiment"]["mode"] == "supervised":
        return train_supervised(cfg, out_dir, data, run_id or "supervised")
    return train_unsupervised(cfg, out_dir, data, run_id or "unsupervised")
