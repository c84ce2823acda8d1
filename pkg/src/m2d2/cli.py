"""Command-line entry point: ``m2d2 {config,generate,train,eval,report,ablate}``.

Exit codes: 0 success, 1 invalid input (config, file format, incompatible
checkpoint), 2 runtime failure. Commands that write a directory stage their
outputs in a temporary sibling and move them into place only on success.
"""

import argparse
import contextlib
import logging
import os
import shutil
import sys
import tempfile

import yaml

from .config import dump_config, from_dict, load_config, to_dict
from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    IncompatibleCheckpointError,
    ShapeError,
)
from .experiments import ABLATION_SIZES, desk_preset, evaluate, run_ablation, run_training
from .report import comparison_tsv, dumps_report, load_report, per_label_tsv, render
from .synthdata import SPLITS, generate, load_dataset, save_dataset, spec_dict
from .tensorfile import read_named, write_named, write_tensor
from .trainer import checkpoint_from_tensors, checkpoint_tensors, format_log

logger = logging.getLogger("m2d2")

CHECKPOINT = "checkpoint.m2ck"
TRAIN_LOG = "train_log.tsv"
CONFIG_ECHO = "config.yaml"
SPEC_ECHO = "spec.yaml"
VALIDATION_ERRORS = (ConfigError, FormatError, IncompatibleCheckpointError, ShapeError, ContractError,
                     FileNotFoundError, yaml.YAMLError)


@contextlib.contextmanager
def staged_dir(out_dir):
    """Yield a scratch directory whose contents land in ``out_dir`` on success."""
    out_dir = os.path.abspath(out_dir)
    parent = os.path.dirname(out_dir)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".m2d2-partial-", dir=parent)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    os.makedirs(out_dir, exist_ok=True)
    for name in os.listdir(tmp):
        dest = os.path.join(out_dir, name)
        if os.path.isdir(dest):
            shutil.rmtree(dest)
        os.replace(os.path.join(tmp, name), dest)
    os.rmdir(tmp)


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _read_spec(path):
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError("<file>", f"{path} must hold a mapping")
    # accept either a bare SynthSpec mapping or a full run config
    if "data" in raw and isinstance(raw["data"], dict):
        raw = raw["data"]
    raw = {k: v for k, v in raw.items() if k != "dir"}
    return from_dict({"data": raw}).data.spec


# ---------------------------------------------------------------- commands


def cmd_config(args):
    if args.preset == "desk":
        cfg = desk_preset(args.seed, args.mode)
    else:
        d = to_dict(from_dict({}))
        d["train"].update(seed=args.seed, mode=args.mode)
        cfg = from_dict(d)
    text = dump_config(cfg)
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_generate(args):
    spec = _read_spec(args.spec)
    dataset = generate(spec)
    with staged_dir(args.out) as tmp:
        save_dataset(dataset, tmp)
        _write_text(os.path.join(tmp, SPEC_ECHO), yaml.safe_dump(spec_dict(spec), sort_keys=False))
    logger.info("wrote %s", ", ".join(f"{k}={v.n}" for k, v in dataset.items()))


def _train_config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace("train", seed=args.seed)
    return cfg


def cmd_train(args):
    cfg = _train_config(args)
    dataset = cfg.load_data()
    with staged_dir(args.out) as tmp:
        result = run_training(cfg, dataset)
        write_named(os.path.join(tmp, CHECKPOINT), checkpoint_tensors(result.best))
        _write_text(os.path.join(tmp, TRAIN_LOG), format_log(result.log))
        _write_text(os.path.join(tmp, CONFIG_ECHO), dump_config(cfg))
    logger.info("best epoch %d, hypervolume %.4f", result.best.epoch, result.best.hypervolume)


def cmd_eval(args):
    ckpt_path = args.checkpoint
    cfg_path = args.config or os.path.join(os.path.dirname(os.path.abspath(ckpt_path)), CONFIG_ECHO)
    cfg = load_config(cfg_path)
    if args.bootstrap_resamples is not None:
        cfg = cfg.replace("eval", bootstrap_resamples=args.bootstrap_resamples)
    split_name = args.split or cfg.eval.split
    if split_name not in SPLITS:
        raise ConfigError("split", f"must be one of {SPLITS}")
    dataset = load_dataset(args.data) if args.data else cfg.load_data()
    if split_name not in dataset:
        raise FormatError("manifest", f"dataset has no {split_name!r} split")
    ckpt = checkpoint_from_tensors(read_named(ckpt_path))
    name = args.name or ckpt.mode
    preds, report = evaluate(ckpt.arrays, dataset[split_name], cfg, name, ckpt.mode, split_name)
    out = os.path.abspath(args.out)
    preds_dir = args.preds_dir or os.path.splitext(out)[0] + ".preds"
    with staged_dir(preds_dir) as tmp:
        write_tensor(os.path.join(tmp, "probs.tnsr"), preds.probs)
        write_tensor(os.path.join(tmp, "labels.tnsr"), preds.labels)
        write_tensor(os.path.join(tmp, "entropies.tnsr"), preds.entropies)
    os.makedirs(os.path.dirname(out), exist_ok=True)
    _write_text(out, dumps_report(report))
    agg = report["aggregate"]
    logger.info("aggregate %s", ", ".join(f"{k}={agg[k]['point']}" for k in agg))


def _report_prefix(out):
    root, ext = os.path.splitext(out)
    return root if ext in (".txt", ".tsv") else out


def cmd_report(args):
    reports = [load_report(p) for p in args.metrics]
    if args.names:
        if len(args.names) != len(reports):
            raise ConfigError("names", f"got {len(args.names)} names for {len(reports)} metrics files")
        for rep, name in zip(reports, args.names):
            rep["name"] = name
    prefix = _report_prefix(args.out)
    parent = os.path.dirname(os.path.abspath(prefix))
    os.makedirs(parent, exist_ok=True)
    text = render(reports)
    _write_text(prefix + ".txt", text)
    _write_text(prefix + ".tsv", comparison_tsv(reports))
    for i, rep in enumerate(reports, 1):
        _write_text(f"{prefix}.labels.{i}.tsv", per_label_tsv(rep))
    sys.stdout.write(text)


def cmd_ablate(args):
    cfg = _train_config(args)
    sizes = args.sizes or list(ABLATION_SIZES)
    with staged_dir(args.out) as tmp:
        rows = run_ablation(cfg, sizes, callback=lambda size, rep: logger.info(
            "context batch %d: aggregate sel_auroc %s", size, rep["aggregate"]["sel_auroc"]["point"]))
        lines = ["context_batch_size\tauroc\tauprc\tsel_auroc\tsel_auprc\thypervolume"]
        for size, rep in rows:
            _write_text(os.path.join(tmp, f"metrics_{size}.json"), dumps_report(rep))
            vals = [rep["aggregate"][k]["point"] for k in ("auroc", "auprc", "sel_auroc", "sel_auprc")]
            vals.append(rep["hypervolume"])
            lines.append("\t".join([str(size)] + ["" if v is None else repr(v) for v in vals]))
        _write_text(os.path.join(tmp, "ablation.tsv"), "\n".join(lines) + "\n")
        _write_text(os.path.join(tmp, CONFIG_ECHO), dump_config(cfg))


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="m2d2", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("config", help="print or write a fully resolved config")
    c.add_argument("--preset", choices=("default", "desk"), default="default")
    c.add_argument("--mode", choices=("deterministic", "bayes_standard", "bayes_m2d2"), default="bayes_m2d2")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_config)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--spec", required=True, help="YAML with SynthSpec fields (or a run config)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model and save the best checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint and write predictions + metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory (default: regenerate from the config)")
    e.add_argument("--out", required=True, help="metrics JSON path")
    e.add_argument("--config", help="run config (default: config.yaml beside the checkpoint)")
    e.add_argument("--split", choices=SPLITS)
    e.add_argument("--name")
    e.add_argument("--preds-dir")
    e.add_argument("--bootstrap-resamples", type=int)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="comparison table over metrics files")
    r.add_argument("--metrics", required=True, action="extend", nargs="+")
    r.add_argument("--names", nargs="+")
    r.add_argument("--out", required=True, help="output prefix; writes .txt and .tsv")
    r.set_defaults(func=cmd_report)

    a = sub.add_parser("ablate", help="context batch size sweep")
    a.add_argument("--config", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--sizes", type=int, nargs="+")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse signals usage errors with 2; here they count as invalid input
        return 1 if exc.code else 0
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"m2d2: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"m2d2: runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
