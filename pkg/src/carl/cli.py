"""``carl`` command line: synth, pretrain-encoder, train, probe, baseline, eval, suite, report.

Exit codes: 0 success, 1 runtime failure, 2 user or config error.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint, config as cfgmod, experiments, pipelines, report, synth
from .encoder import build_encoder, pretrain_masked, save_encoder

log = logging.getLogger("carl")

EXIT_OK, EXIT_RUNTIME, EXIT_USER = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _config(args, seed_key="optimizer.seed"):
    cfg = cfgmod.load(args.config) if args.config else cfgmod.resolve()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = _parse_value(value)
    if args.seed is not None:
        overrides[seed_key] = args.seed
    if getattr(args, "dataset", None):
        overrides["dataset.path"] = os.path.abspath(args.dataset)
    return cfgmod.with_overrides(cfg, overrides) if overrides else cfg


def _default_out(cfg, prefix):
    return os.path.join("runs", f"{prefix}_{cfgmod.config_hash(cfg)}")


def _print_report(rep):
    print(rep.to_json())


def cmd_synth(args):
    cfg = _config(args, seed_key="dataset.root_seed")
    ds = cfg["dataset"]
    out = args.out or ds["path"]
    if not out:
        raise UsageError("synth needs --out or dataset.path")
    vocab = synth.build_vocabulary(ds["root_seed"], ds["n_seen"], ds["n_unseen"])
    manifests = synth.make_dataset(vocab, ds["sizes"], ds["polyphony_dist"], ds["root_seed"], out,
                                   force=args.force)
    for split, recs in manifests.items():
        poly = np.bincount([r["polyphony"] for r in recs], minlength=len(ds["polyphony_dist"]) + 1)[1:]
        print(f"{split}: {len(recs)} clips, polyphony counts {poly.tolist()}")
    print(f"classes: {ds['n_seen']} seen, {ds['n_unseen']} unseen")
    print(f"dataset hash: {synth.dataset_hash(out)}")
    return EXIT_OK


def cmd_pretrain_encoder(args):
    cfg = _config(args, seed_key="encoder.seed")
    root = cfg["dataset"]["path"]
    if not root or not os.path.isdir(root):
        raise FileNotFoundError(f"dataset directory not found: {root}")
    out = args.out or os.path.join(root, "encoder.ckpt")
    if os.path.exists(out) and not args.force:
        raise FileExistsError(f"{out} exists (use --force)")
    enc_cfg = cfg["encoder"]
    steps = args.steps if args.steps is not None else enc_cfg["pretrain_steps"]
    records = synth.load_manifest(root, "train")
    mel = pipelines._split_mel(root, "train", cfg["dataset"], records)
    enc, hist = pretrain_masked(build_encoder(enc_cfg), mel, enc_cfg["mask_ratio"], steps,
                                enc_cfg["pretrain_lr"], enc_cfg["pretrain_batch_size"], seed=enc_cfg["seed"],
                                log=log.info)
    digest = save_encoder(out, enc)
    print(f"encoder: {out} ({digest[:16]})")
    if hist:
        print(f"masked-reconstruction loss {hist[0]:.4f} -> {hist[-1]:.4f} over {len(hist)} steps")
    return EXIT_OK


def _summarize(record, out):
    print(f"run {record.run_id} ({record.kind}) -> {out}")
    print(f"config {record.config_hash}  dataset {record.dataset_hash}")
    _print_report(record.eval_report)


def cmd_train(args):
    cfg = _config(args)
    out = args.out or _default_out(cfg, cfg["experiment"]["mode"])
    record = pipelines.run_from_config(cfg, out)
    _summarize(record, out)
    return EXIT_OK


def cmd_probe(args):
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    cfg = _config(args) if args.config else None
    meta, _ = checkpoint.load(args.checkpoint)
    if cfg is None:
        cfg = meta["config"]
        if args.seed is not None or args.dataset:
            ov = {} if args.seed is None else {"optimizer.seed": args.seed}
            if args.dataset:
                ov["dataset.path"] = os.path.abspath(args.dataset)
            cfg = cfgmod.with_overrides(cfg, ov)
    out = args.out or _default_out(cfg, "generalization" if args.generalization else "probe")
    if args.generalization:
        if meta.get("stage") != "supervised":
            raise UsageError("the generalization probe needs a supervised model checkpoint")
        record = pipelines.generalization_probe(args.checkpoint, cfg, out)
    else:
        record = pipelines.probe_from_checkpoint(args.checkpoint, cfg, out, cfg["dataset"]["path"])
    _summarize(record, out)
    return EXIT_OK


def cmd_baseline(args):
    cfg = _config(args)
    out = args.out or _default_out(cfg, "baseline")
    record = pipelines.baseline_mixture_copy(cfg, out)
    _summarize(record, out)
    return EXIT_OK


def cmd_eval(args):
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    rep = pipelines.evaluate_checkpoint(args.checkpoint, args.dataset)
    text = rep.to_json() + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_suite(args):
    cfg = _config(args)
    out = args.out or os.path.join("runs", f"{args.suite}_{cfgmod.config_hash(cfg)}")
    result = experiments.run_suite(args.suite, cfg, out)
    print(experiments.format_tables(result))
    for run_id, err in result.failures.items():
        print(f"FAILED {run_id}: {err}", file=sys.stderr)
    return EXIT_RUNTIME if result.failures else EXIT_OK


def cmd_report(args):
    out = args.out or "report"
    print(report.render_report(args.runs, out))
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config document (JSON structure)")
    common.add_argument("--seed", type=int, help="override the seed used by this command")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--quiet", action="store_true", help="only warnings and errors on stderr")

    parser = argparse.ArgumentParser(prog="carl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "synthesize a dataset")
    p = add("pretrain-encoder", cmd_pretrain_encoder, "masked-patch pretraining of the frozen encoder")
    p.add_argument("--dataset")
    p.add_argument("--steps", type=int)
    for name, func, text in (("train", cmd_train, "train per experiment.mode"),
                             ("baseline", cmd_baseline, "mixture-copy baseline")):
        p = add(name, func, text)
        p.add_argument("--dataset")
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p = add("probe", cmd_probe, "stage-2 probe or unseen-class generalization probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--generalization", action="store_true")
    p = add("eval", cmd_eval, "recompute an EvalReport from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p = add("suite", cmd_suite, "run an experiment suite")
    p.add_argument("suite", choices=experiments.SUITES)
    p.add_argument("--dataset")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p = add("report", cmd_report, "plots and tables over run directories")
    p.add_argument("runs", nargs="+")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (cfgmod.ConfigError, UsageError, FileExistsError, FileNotFoundError,
            checkpoint.CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
