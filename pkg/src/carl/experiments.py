"""Experiment suites: run grids of configs over one prepared dataset and tabulate them."""

import csv
import json
import logging
import os
import traceback
from dataclasses import dataclass, field

from . import config as cfgmod, pipelines
from .metrics import fmt, render_table

log = logging.getLogger("carl")

SUITES = ("exp1", "exp2", "exp3", "exp4")

_DECODER_NAMES = {"mlp": "MLP", "transformer": "Transformer", "cnn": "CNN"}
_ABLATION_NAMES = {"none": "--", "reconstruction": "Reconstruction", "disjointedness": "Disjointedness",
                   "sparsity": "Sparsity", "attention": "Inv. Attention"}


@dataclass
class RunSpec:
    run_id: str
    kind: str  # supervised | unsupervised | baseline | generalization
    overrides: dict
    tables: tuple
    ablation: str = "none"


@dataclass
class SuiteResult:
    suite: str
    records: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)


def _decoder(kind, target, alpha):
    return {"decoder.kind": kind, "decoder.target": target, "decoder.alpha": alpha}


def _ablate(term):
    if term == "attention":
        return {"slots.attention": "standard"}
    return {"loss.ablate": term}


def suite_specs(suite_id, cfg):
    """The run grid for one suite."""
    if suite_id == "exp1":
        specs = [RunSpec(f"sup_{k}_{t}_{'alpha' if a else 'noalpha'}", "supervised", _decoder(k, t, a),
                         ("supervised_decoders",))
                 for k, t, a in (("mlp", "features", True), ("mlp", "features", False),
                                 ("transformer", "features", False))]
        specs[-1].tables += ("supervised_ablations",)
        for term in ("reconstruction", "disjointedness", "sparsity"):
            specs.append(RunSpec(f"sup_transformer_ablate_{term}", "supervised",
                                 {**_decoder("transformer", "features", False), **_ablate(term)},
                                 ("supervised_ablations",), term))
        return specs
    if suite_id == "exp2":
        specs = []
        for k, t, a in cfgmod.LEGAL_DECODERS:
            tables = ("target_x_decoder",)
            if (k, t, a) == ("mlp", "features", False):
                tables += ("unsupervised_ablations",)
            specs.append(RunSpec(f"unsup_{k}_{t}_{'alpha' if a else 'noalpha'}", "unsupervised",
                                 _decoder(k, t, a), tables))
        for term in ("attention", "disjointedness"):
            specs.append(RunSpec(f"unsup_mlp_ablate_{term}", "unsupervised",
                                 {**_decoder("mlp", "features", False), **_ablate(term)},
                                 ("unsupervised_ablations",), term))
        for d_s in cfg["experiment"]["slot_dims"]:
            specs.append(RunSpec(f"unsup_mlp_ds{d_s}", "unsupervised",
                                 {**_decoder("mlp", "features", False), "slots.d_s": d_s}, ("slot_dim",)))
        return specs
    if suite_id == "exp3":
        return [RunSpec("baseline_mixture_copy", "baseline", {}, ("baselines",))]
    if suite_id == "exp4":
        specs = [RunSpec(f"gen_transformer_{term}", "generalization",
                         {**_decoder("transformer", "features", False), **_ablate(term)},
                         ("generalization",), term)
                 for term in ("none", "reconstruction", "disjointedness", "sparsity")]
        specs += [RunSpec(f"gen_mlp_{'alpha' if a else 'noalpha'}", "generalization",
                          _decoder("mlp", "features", a), ("generalization",)) for a in (True, False)]
        return specs
    raise ValueError(f"unknown suite {suite_id!r}; expected one of {SUITES}")


def _execute(run_spec, cfg, out_dir, data):
    run_dir = None if out_dir is None else os.path.join(out_dir, run_spec.run_id)
    if run_spec.kind == "supervised":
        return pipelines.train_supervised(cfg, run_dir, data, run_spec.run_id)
    if run_spec.kind == "unsupervised":
        return pipelines.train_unsupervised(cfg, run_dir, data, run_spec.run_id)
    if run_spec.kind == "baseline":
        return pipelines.baseline_mixture_copy(cfg, run_dir, data, run_spec.run_id)
    trained = pipelines.train_supervised(cfg, None if run_dir is None else os.path.join(run_dir, "train"),
                                         data, run_spec.run_id + "/train")
    return pipelines.generalization_probe(trained.model, cfg, None if run_dir is None else
                                          os.path.join(run_dir, "probe"), data, run_spec.run_id)


def run_suite(suite_id, cfg, out_dir=None, overrides=None, data=None):
    """Run every config of a suite; failures are recorded and the rest continue."""
    cfg = cfgmod.with_overrides(cfg, overrides or {})
    specs = suite_specs(suite_id, cfg)
    data = data or pipelines.prepare_data(cfg)
    result = SuiteResult(suite_id)
    for run_spec in specs:
        try:
            run_cfg = cfgmod.with_overrides(cfg, {**run_spec.overrides, "experiment.mode":
                                                  "unsupervised" if run_spec.kind == "unsupervised" else "supervised"})
            log.info("suite %s: run %s", suite_id, run_spec.run_id)
            result.records[run_spec.run_id] = _execute(run_spec, run_cfg, out_dir, data)
        except Exception as exc:  # keep going; the failure shows up in the tables
            log.error("suite %s: run %s failed: %s", suite_id, run_spec.run_id, exc)
            result.failures[run_spec.run_id] = f"{type(exc).__name__}: {exc}"
            log.debug(traceback.format_exc())
    result.tables = build_tables(specs, result, cfg)
    if out_dir is not None:
        write_suite(result, out_dir)
    return result


def _cells(run_spec, cfg):
    ov = {**cfg["decoder"], **{k.split(".", 1)[1]: v for k, v in run_spec.overrides.items() if k.startswith("decoder.")}}
    alpha = "--" if ov["kind"] == "transformer" else ("Y" if ov["alpha"] else "N")
    return {"sup": "N" if run_spec.kind == "unsupervised" else "Y", "decoder": _DECODER_NAMES[ov["kind"]],
            "target": ov["target"].capitalize(), "alpha": alpha,
            "ablation": _ABLATION_NAMES[run_spec.ablation],
            "d_s": str(run_spec.overrides.get("slots.d_s", cfg["slots"]["d_s"]))}


TABLE_LAYOUTS = {
    "supervised_decoders": (("Supervised", "Decoder", "Target", "Alpha", "mAP", "ss"),
                            ("sup", "decoder", "target", "alpha", "map", "ss")),
    "supervised_ablations": (("Supervised", "Decoder", "Target", "Ablation", "mAP", "ss"),
                             ("sup", "decoder", "target", "ablation", "map", "ss")),
    "target_x_decoder": (("Sup.", "Decoder/Model", "Target", "Alpha", "all", "p1", "p2", "p3"),
                         ("sup", "decoder", "target", "alpha", "map", "p1", "p2", "p3")),
    "slot_dim": (("Supervised", "Decoder", "Target", "Alpha", "d_s", "mAP"),
                 ("sup", "decoder", "target", "alpha", "d_s", "map")),
    "unsupervised_ablations": (("Supervised", "Decoder", "Target", "Alpha", "Ablation", "mAP"),
                               ("sup", "decoder", "target", "alpha", "ablation", "map")),
    "baselines": (("Sup.", "Decoder/Model", "Target", "Alpha", "all", "p1", "p2", "p3"),
                  ("sup", "decoder", "target", "alpha", "map", "p1", "p2", "p3")),
    "generalization": (("Supervised", "Decoder", "Target", "Alpha", "Ablation", "mAP", "seen-only",
                        "with-unseen"),
                       ("sup", "decoder", "target", "alpha", "ablation", "map", "seen_only", "with_unseen")),
}


def _metric_cells(record):
    rep = record.eval_report
    out = {"map": fmt(rep.map["all"]), "ss": fmt(rep.silhouette)}
    out.update({c: fmt(rep.map[c]) for c in ("p1", "p2", "p3")})
    for name in ("seen_only", "with_unseen"):
        sub = (rep.extra or {}).get(name)
        out[name] = fmt(sub["map"]) if sub else "--"
    return out


def build_tables(specs, result, cfg):
    """Rows per named layout: (header, list of cell lists)."""
    tables = {}
    for run_spec in specs:
        for name in run_spec.tables:
            header, keys = TABLE_LAYOUTS[name]
            cells = _cells(run_spec, cfg)
            if run_spec.kind == "baseline":
                cells.update(sup="N", decoder="Mixture-copy", target="--", alpha="--")
            if run_spec.run_id in result.records:
                cells.update(_metric_cells(result.records[run_spec.run_id]))
            else:
                cells.update({k: "failed" for k in keys if k not in cells})
            tables.setdefault(name, (header, []))[1].append([cells[k] for k in keys])
    if "baselines" in tables:
        tables["baselines"][1].insert(0, ["N", "USS: out of scope", "--", "--", "--", "--", "--", "--"])
    return tables


def write_suite(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    text = []
    for name, (header, rows) in result.tables.items():
        text.append(f"{name}\n{render_table(header, rows)}\n")
        with open(os.path.join(out_dir, f"table_{name}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    with open(os.path.join(out_dir, "tables.txt"), "w") as fh:
        fh.write("\n".join(text))
    summary = {"suite": result.suite, "runs": sorted(result.records), "failures": result.failures}
    with open(os.path.join(out_dir, "suite.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)


def format_tables(result):
    return "\n".join(f"{name}\n{render_table(h, rows)}\n" for name, (h, rows) in result.tables.items())
