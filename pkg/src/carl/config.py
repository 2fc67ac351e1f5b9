"""Hierarchical run configuration: defaults, validation, hashing."""

import copy
import hashlib
import json
import os

DEFAULTS = {
    "dataset": {
        "path": None,
        "root_seed": 0,
        "n_seen": 10,
        "n_unseen": 0,
        "sizes": {"train": 2000, "val": 200, "eval": 400},
        "polyphony_dist": [0.25, 0.25, 0.25, 0.25],
        "sample_rate": 16000,
        "n_mels": 64,
        "win_length": 400,
        "hop_length": 160,
        "n_fft": 512,
    },
    "encoder": {
        "checkpoint": None,
        "d_p": 192,
        "depth": 4,
        "heads": 4,
        "patch_size": [8, 8],
        "seed": 0,
        "pretrain_steps": 0,
        "mask_ratio": 0.75,
        "pretrain_lr": 1e-3,
        "pretrain_batch_size": 32,
    },
    "slots": {
        "k": 6,
        "d_s": 512,
        "layers": 4,
        "heads": 4,
        "attention": "inverted",
    },
    "decoder": {
        "kind": "mlp",
        "target": "features",
        "alpha": False,
        "hidden": 512,
        "mlp_layers": 3,
        "cnn_channels": 32,
        "ar_width": 128,
        "ar_layers": 4,
        "ar_heads": 4,
    },
    "loss": {
        "w_ce": None,
        "w_recon": None,
        "w_sparsity": None,
        "w_disjoint": None,
        "ablate": "none",
    },
    "disjoint": {"d_proj": 0},
    "optimizer": {
        "lr": 3e-4,
        "batch_size": 32,
        "steps": 20000,
        "probe_steps": 5000,
        "probe_lr": 1e-3,
        "probe_batch_size": 128,
        "grad_clip": 1.0,
        "seed": 0,
    },
    "experiment": {
        "mode": "supervised",
        "checkpoint_every": 0,
        "silhouette_cap": 10000,
        "slot_dims": [512, 256, 64],
    },
}

# keys whose default is None but which take a number (or a path) when set
_NULLABLE = {
    "dataset.path": (str,),
    "encoder.checkpoint": (str,),
    "loss.w_ce": (int, float),
    "loss.w_recon": (int, float),
    "loss.w_sparsity": (int, float),
    "loss.w_disjoint": (int, float),
}

LEGAL_DECODERS = (
    ("mlp", "features", True),
    ("mlp", "features", False),
    ("transformer", "features", False),
    ("cnn", "spectrogram", True),
    ("cnn", "spectrogram", False),
)

SUPERVISED_WEIGHTS = {"w_ce": 1.0, "w_recon": 0.1, "w_sparsity": 0.1, "w_disjoint": 100.0}
UNSUPERVISED_WEIGHTS = {"w_ce": 0.0, "w_recon": 1.0, "w_sparsity": 0.0, "w_disjoint": 0.01}

ABLATIONS = {
    "none": None,
    "reconstruction": "w_recon",
    "disjointedness": "w_disjoint",
    "sparsity": "w_sparsity",
}


class ConfigError(ValueError):
    """Invalid configuration; ``key`` holds the offending dotted path."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def _merge(base, override, prefix=""):
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown key")
        default = base[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(path, "expected a section")
            _merge(default, value, path + ".")
            continue
        base[key] = _check_leaf(path, default, value)


def _check_leaf(path, default, value):
    if path in _NULLABLE:
        if value is not None and (isinstance(value, bool) or not isinstance(value, _NULLABLE[path])):
            raise ConfigError(path, f"expected {_NULLABLE[path][0].__name__} or null")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, "expected a boolean")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, "expected a list")
    return value


def legal_rows_text():
    rows = [f"  decoder.kind={k} target={t} alpha={str(a).lower()}" for k, t, a in LEGAL_DECODERS]
    return "legal decoder combinations:\n" + "\n".join(rows)


def validate(cfg):
    """Semantic checks beyond types. Raises ConfigError."""
    dec = cfg["decoder"]
    combo = (dec["kind"], dec["target"], dec["alpha"])
    if combo not in LEGAL_DECODERS:
        raise ConfigError(
            "decoder",
            f"illegal combination kind={combo[0]} target={combo[1]} alpha={str(combo[2]).lower()}\n"
            + legal_rows_text(),
        )
    if cfg["slots"]["attention"] not in ("inverted", "standard"):
        raise ConfigError("slots.attention", "must be 'inverted' or 'standard'")
    if cfg["experiment"]["mode"] not in ("supervised", "unsupervised"):
        raise ConfigError("experiment.mode", "must be 'supervised' or 'unsupervised'")
    if cfg["loss"]["ablate"] not in ABLATIONS:
        raise ConfigError("loss.ablate", f"must be one of {sorted(ABLATIONS)}")
    for name in ("w_ce", "w_recon", "w_sparsity", "w_disjoint"):
        w = cfg["loss"][name]
        if w is not None and not (w >= 0 and w != float("inf")):
            raise ConfigError(f"loss.{name}", "weights must be finite and >= 0")
    if cfg["experiment"]["mode"] == "unsupervised":
        for name in ("w_ce", "w_sparsity"):
            if cfg["loss"][name]:
                raise ConfigError(f"loss.{name}", "label-dependent loss in unsupervised mode")
    ds = cfg["dataset"]
    if ds["n_seen"] < 2:
        raise ConfigError("dataset.n_seen", "need at least 2 seen classes")
    if ds["sample_rate"] != 16000:
        raise ConfigError("dataset.sample_rate", "only 16000 Hz is supported")
    dist = ds["polyphony_dist"]
    if not dist or any(p < 0 for p in dist) or abs(sum(dist) - 1.0) > 1e-6:
        raise ConfigError("dataset.polyphony_dist", "must be a probability vector")
    if len(dist) > cfg["slots"]["k"]:
        raise ConfigError("dataset.polyphony_dist", "max polyphony exceeds slot count")
    if len(cfg["encoder"]["patch_size"]) != 2:
        raise ConfigError("encoder.patch_size", "expected [p_t, p_f]")
    if cfg["encoder"]["d_p"] % 4 or cfg["slots"]["d_s"] % 4:
        raise ConfigError("encoder.d_p", "d_p and d_s must be divisible by 4")
    if cfg["slots"]["d_s"] % cfg["slots"]["heads"]:
        raise ConfigError("slots.heads", "d_s must be divisible by heads")
    if not 0.0 < cfg["encoder"]["mask_ratio"] < 1.0:
        raise ConfigError("encoder.mask_ratio", "must lie in (0, 1)")
    for split in ("train", "val", "eval"):
        if split not in ds["sizes"]:
            raise ConfigError(f"dataset.sizes.{split}", "missing split size")
    return cfg


def resolve(override=None, base_dir=None):
    """Merge ``override`` into the defaults, resolve paths, validate."""
    cfg = copy.deepcopy(DEFAULTS)
    if override:
        _merge(cfg, override)
    if base_dir is not None:
        for section, key in (("dataset", "path"), ("encoder", "checkpoint")):
            p = cfg[section][key]
            if p is not None and not os.path.isabs(p):
                cfg[section][key] = os.path.normpath(os.path.join(base_dir, p))
    return validate(cfg)


def load(path):
    """Read a JSON-structured config document; paths are relative to its directory."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("<file>", "top level must be a mapping")
    return resolve(doc, base_dir=os.path.dirname(os.path.abspath(path)))


def with_overrides(cfg, overrides):
    """Apply dotted-key overrides, e.g. ``{"slots.d_s": 64}``, and revalidate."""
    nested = {}
    for dotted, value in overrides.items():
        node = nested
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    out = copy.deepcopy(cfg)
    _merge(out, nested)
    return validate(out)


def loss_weights(cfg):
    """Effective loss weights for the configured mode and ablation."""
    mode = cfg["experiment"]["mode"]
    weights = dict(SUPERVISED_WEIGHTS if mode == "supervised" else UNSUPERVISED_WEIGHTS)
    for name in weights:
        if cfg["loss"][name] is not None:
            weights[name] = float(cfg["loss"][name])
    ablated = ABLATIONS[cfg["loss"]["ablate"]]
    if ablated:
        weights[ablated] = 0.0
    return weights


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]
