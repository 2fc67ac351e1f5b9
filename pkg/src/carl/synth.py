"""Parametric polyphonic scene synthesis and the on-disk dataset format.

Each class is a synth recipe (waveform family, frequency band, duration
range, envelope). A scene draws 1..m classes without replacement, renders
one stem per class at a random onset and level, and sums the stems.
"""

import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from .frontend import SAMPLE_RATE

FAMILIES = ("tone", "chirp", "am_tone", "noise_burst", "harmonic_stack")
ENVELOPES = ("percussive", "flat", "swell")
CLIP_SECONDS = 1.0
STEM_RMS = 0.1
SNR_RANGE_DB = (-5.0, 5.0)
PEAK_TARGET = 0.9
_SPLIT_CODES = {"train": 1, "val": 2, "eval": 3}


@dataclass(frozen=True)
class SourceClass:
    id: int
    name: str
    generator_params: dict
    split: str  # "seen" | "unseen"

    def to_json(self):
        return {"id": self.id, "name": self.name, "split": self.split,
                "generator_params": self.generator_params}

    @classmethod
    def from_json(cls, doc):
        return cls(doc["id"], doc["name"], doc["generator_params"], doc["split"])


@dataclass
class AudioScene:
    mixture: np.ndarray
    stems: list
    labels: tuple
    snr_db: tuple
    seed: int
    sample_rate: int = SAMPLE_RATE
    normalized: bool = field(default=False)

    @property
    def polyphony(self):
        return len(self.labels)


def build_vocabulary(seed, n_seen, n_unseen=0):
    """Deterministic class recipes; ids 0..n_seen-1 are seen, the rest unseen.

    Every class owns a distinct log-spaced frequency band, so recipes are
    pairwise distinct by construction.
    """
    if n_seen < 2:
        raise ValueError("need at least two seen classes")
    if n_unseen < 0:
        raise ValueError("n_unseen must be >= 0")
    n = n_seen + n_unseen
    rng = np.random.default_rng(seed)
    edges = np.geomspace(150.0, 5000.0, n + 1)
    bands = rng.permutation(n)
    families = rng.permutation(len(FAMILIES))
    vocab = []
    for i in range(n):
        lo, hi = edges[bands[i]], edges[bands[i] + 1]
        dur_lo = float(rng.uniform(0.25, 0.45))
        params = {
            "family": FAMILIES[families[i % len(FAMILIES)]],
            "f_lo": round(float(lo), 3),
            "f_hi": round(float(hi), 3),
            "dur_lo": round(dur_lo, 4),
            "dur_hi": round(min(0.9, dur_lo + float(rng.uniform(0.2, 0.4))), 4),
            "envelope": ENVELOPES[int(rng.integers(len(ENVELOPES)))],
        }
        vocab.append(SourceClass(i, f"{params['family']}_{i:02d}", params,
                                 "seen" if i < n_seen else "unseen"))
    return vocab


def _envelope(kind, n_active, sr):
    t = np.arange(n_active) / sr
    fade = max(1, min(n_active // 2, int(0.01 * sr)))
    env = np.ones(n_active)
    if kind == "percussive":
        attack = max(1, int(0.005 * sr))
        env = np.exp(-t / (0.3 * n_active / sr))
        env[:attack] *= np.linspace(0.0, 1.0, attack)
    elif kind == "swell":
        env = np.linspace(0.05, 1.0, n_active)
    env[:fade] *= np.linspace(0.0, 1.0, fade)
    env[-fade:] *= np.linspace(1.0, 0.0, fade)
    return env


def render_source(params, rng, sr=SAMPLE_RATE, length=SAMPLE_RATE):
    """Render one non-silent source instance, unit RMS over its active span."""
    dur = rng.uniform(params["dur_lo"], params["dur_hi"])
    n_active = max(int(0.05 * sr), int(dur * sr))
    onset = int(rng.integers(0, length - n_active + 1))
    f0 = float(np.exp(rng.uniform(np.log(params["f_lo"]), np.log(params["f_hi"]))))
    phase = rng.uniform(0.0, 2 * np.pi)
    t = np.arange(n_active) / sr
    family = params["family"]
    if family == "tone":
        sig = np.sin(2 * np.pi * f0 * t + phase)
    elif family == "chirp":
        f1 = f0 * 1.5
        sig = np.sin(2 * np.pi * (f0 * t + (f1 - f0) * t ** 2 / (2 * n_active / sr)) + phase)
    elif family == "am_tone":
        fm = rng.uniform(4.0, 12.0)
        sig = np.sin(2 * np.pi * f0 * t + phase) * (0.55 + 0.45 * np.sin(2 * np.pi * fm * t))
    elif family == "noise_burst":
        band = np.fft.rfft(rng.standard_normal(n_active))
        freqs = np.fft.rfftfreq(n_active, 1.0 / sr)
        band[(freqs < f0 / 1.3) | (freqs > f0 * 1.3)] = 0.0
        sig = np.fft.irfft(band, n=n_active)
    elif family == "harmonic_stack":
        sig = np.zeros(n_active)
        for h in range(1, 6):
            if h * f0 < sr / 2:
                sig += np.sin(2 * np.pi * h * f0 * t + h * phase) / h
    else:
        raise ValueError(f"unknown family {family!r}")
    sig = sig * _envelope(params["envelope"], n_active, sr)
    rms = np.sqrt(np.mean(sig ** 2))
    if not rms > 0:  # pragma: no cover - families are never silent
        raise RuntimeError("rendered a silent source")
    stem = np.zeros(length)
    stem[onset:onset + n_active] = sig / rms
    return stem


def synthesize_scene(vocab, polyphony_dist, seed):
    """Draw labels, render and level stems, and mix. Deterministic in ``seed``."""
    if not vocab:
        raise ValueError("empty vocabulary")
    dist = np.asarray(polyphony_dist, dtype=np.float64)
    if abs(dist.sum() - 1.0) > 1e-6 or (dist < 0).any():
        raise ValueError("polyphony_dist must be a probability vector")
    rng = np.random.default_rng(seed)
    poly = min(int(rng.choice(np.arange(1, len(dist) + 1), p=dist)), len(vocab))
    picks = rng.choice(len(vocab), size=poly, replace=False)
    length = int(CLIP_SECONDS * SAMPLE_RATE)
    stems, snrs = [], []
    for idx in picks:
        snr = float(rng.uniform(*SNR_RANGE_DB))
        stems.append(render_source(vocab[idx].generator_params, rng, length=length)
                     * STEM_RMS * 10 ** (snr / 20))
        snrs.append(snr)
    mixture = np.sum(stems, axis=0)
    peak = np.max(np.abs(mixture))
    normalized = bool(peak > 1.0)
    if normalized:
        scale = PEAK_TARGET / peak
        mixture = mixture * scale
        stems = [s * scale for s in stems]
    order = np.argsort([vocab[i].id for i in picks])
    return AudioScene(
        mixture=mixture.astype(np.float32),
        stems=[stems[i].astype(np.float32) for i in order],
        labels=tuple(int(vocab[picks[i]].id) for i in order),
        snr_db=tuple(snrs[i] for i in order),
        seed=int(seed),
        normalized=normalized,
    )


def clip_seed(root_seed, split, attempt, index):
    ss = np.random.SeedSequence([int(root_seed), _SPLIT_CODES[split], int(attempt), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def _render_split(vocab, split, n, polyphony_dist, root_seed, attempt, out_dir):
    os.makedirs(os.path.join(out_dir, "audio", split), exist_ok=True)
    records = []
    for i in range(n):
        seed = clip_seed(root_seed, split, attempt, i)
        scene = synthesize_scene(vocab, polyphony_dist, seed)
        cid = f"{split}_{i:06d}"
        rec = {"id": cid, "labels": list(scene.labels), "polyphony": scene.polyphony,
               "seed": seed, "path": f"audio/{split}/{cid}.f32"}
        scene.mixture.astype("<f4").tofile(os.path.join(out_dir, rec["path"]))
        records.append(rec)
    return records


def make_dataset(vocab, sizes, polyphony_dist, seed, out_dir, force=False, max_attempts=50):
    """Synthesize train/val/eval splits and write them under ``out_dir``.

    Train and val draw only seen classes; eval draws seen and unseen classes
    and is split into probe-train / probe-test halves. The eval split is
    regenerated with fresh seeds until every unseen class occurs in both
    halves. Returns the per-split manifests.
    """
    if os.path.exists(out_dir) and os.listdir(out_dir):
        if not force:
            raise FileExistsError(f"dataset directory {out_dir} exists (use force)")
        shutil.rmtree(out_dir)
    seen = [c for c in vocab if c.split == "seen"]
    unseen_ids = {c.id for c in vocab if c.split == "unseen"}
    manifests = {}
    attempts = {}
    os.makedirs(out_dir, exist_ok=True)
    for split in ("train", "val", "eval"):
        n = int(sizes[split])
        pool = seen if split != "eval" else list(vocab)
        for attempt in range(max_attempts):
            records = _render_split(pool, split, n, polyphony_dist, seed, attempt, out_dir)
            if split != "eval" or not unseen_ids:
                break
            half = n // 2
            first = {c for r in records[:half] for c in r["labels"]}
            second = {c for r in records[half:] for c in r["labels"]}
            if unseen_ids <= first and unseen_ids <= second:
                break
        else:
            raise RuntimeError(f"could not cover unseen classes in {split} after {max_attempts} tries")
        attempts[split] = attempt
        if split == "eval":
            for i, rec in enumerate(records):
                rec["probe_split"] = "train" if i < n // 2 else "test"
        with open(os.path.join(out_dir, f"manifest_{split}.jsonl"), "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        manifests[split] = records
    with open(os.path.join(out_dir, "vocab.json"), "w") as fh:
        json.dump([c.to_json() for c in vocab], fh, indent=1, sort_keys=True)
    meta = {
        "root_seed": int(seed),
        "sizes": {k: int(v) for k, v in sizes.items()},
        "polyphony_dist": [float(p) for p in polyphony_dist],
        "sample_rate": SAMPLE_RATE,
        "n_seen": len(seen),
        "n_unseen": len(unseen_ids),
        "attempts": attempts,
        "snr_range_db": list(SNR_RANGE_DB),
    }
    with open(os.path.join(out_dir, "dataset_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return manifests


def load_vocab(root):
    with open(os.path.join(root, "vocab.json")) as fh:
        return [SourceClass.from_json(d) for d in json.load(fh)]


def load_manifest(root, split):
    with open(os.path.join(root, f"manifest_{split}.jsonl")) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_waveform(root, record):
    return np.fromfile(os.path.join(root, record["path"]), dtype="<f4")


def dataset_hash(root):
    """Digest over metadata, vocab and manifests.

    Manifests pin every clip's seed and the renderer is deterministic, so the
    waveform bytes are implied; hashing them would cost a full dataset read.
    """
    h = hashlib.sha256()
    for name in ("dataset_meta.json", "vocab.json"):
        with open(os.path.join(root, name), "rb") as fh:
            h.update(fh.read())
    for split in ("train", "val", "eval"):
        path = os.path.join(root, f"manifest_{split}.jsonl")
        with open(path, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()[:16]
