"""Command-line front end: ``ddlab synth | train | eval | ablate | rerun``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config, normalize, pretrain_config, synth_config, to_jsonable, train_config
from .distribution import write_histogram_csv
from .metrics import EvalReport
from .synth import generate, load_dataset, save_dataset, split_train_eval
from .tensor import format_float, load_checkpoint, save_checkpoint
from .trainer import domain_histograms, evaluate, init_net, train

log = logging.getLogger("ddlab")

WORKERS_ENV = "DDLAB_WORKERS"


class ValidationError(RuntimeError):
    pass


def write_manifest(path, command, cfg, inputs, outputs):
    manifest = {
        "command": command,
        "config": to_jsonable(cfg),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(str(o) for o in outputs),
        "seed": cfg["seed"],
        "version": __version__,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _check_files(paths):
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise ValidationError(f"expected outputs missing: {missing}")


def _splits(cfg, dataset):
    return split_train_eval(dataset, cfg["split_fraction"], cfg["seed"])


# -- synth --------------------------------------------------------------------


def run_synth(cfg, out):
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sc = synth_config(cfg)
    _, ds = generate(sc)
    save_dataset(ds, out)
    sidecar = out.with_name(out.stem + ".config.json")
    manifest = out.with_name(out.stem + ".manifest.json")
    write_manifest(manifest, "synth", cfg, {"out": out}, [out, sidecar])
    _check_files([out, sidecar, manifest])
    expected = sc.n_identities * sc.samples_per_identity * (1 + sc.n_hard)
    if len(load_dataset(out)) != expected:
        raise ValidationError(f"{out}: expected {expected} records")
    return [out, sidecar, manifest]


# -- train --------------------------------------------------------------------


def pretrain(cfg, train_set, eval_set=None):
    """Margin-softmax baseline from a seeded random initialization."""
    n_classes = len(np.unique(train_set.identities))
    net = init_net(train_set.features.shape[1], n_classes, cfg["hidden"], cfg["embed_dim"], cfg["seed"], cfg["activation"])
    if cfg["pretrain_iterations"] == 0:
        return net, None
    return train(pretrain_config(cfg), train_set, net, eval_set)


def _write_eval_history(path, log_):
    evals = log_.evals
    if not evals:
        return
    reports = [EvalReport.from_dict(r["report"]) for r in evals]
    lines = [",".join(["iter"] + reports[0].csv_header())]
    for r, rep in zip(evals, reports):
        lines.append(",".join([str(r["iter"])] + rep.csv_values()))
    Path(path).write_text("\n".join(lines) + "\n")


def run_train(cfg, data, out, init=None):
    out = Path(out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    train_set, eval_set = _splits(cfg, load_dataset(data))
    outputs = []
    if init is None:
        net, plog = pretrain(cfg, train_set)
        save_checkpoint(net, out / "pretrain.ckpt")
        outputs.append(out / "pretrain.ckpt")
        if plog is not None:
            plog.write(out / "pretrain_log.jsonl")
            outputs.append(out / "pretrain_log.jsonl")
    else:
        net = load_checkpoint(init)

    def on_checkpoint(it, cur):
        path = ckpt_dir / f"iter_{it + 1:07d}.ckpt"
        save_checkpoint(cur, path)
        outputs.append(path)

    tc = train_config(cfg)
    net, tlog = train(tc, train_set, net, eval_set, on_checkpoint)
    save_checkpoint(net, out / "final.ckpt")
    tlog.write(out / "train_log.jsonl")
    _write_eval_history(out / "eval_history.csv", tlog)
    outputs += [out / "final.ckpt", out / "train_log.jsonl"]
    if tlog.evals:
        (out / "eval_report.json").write_text(json.dumps(tlog.evals[-1]["report"], sort_keys=True, indent=2) + "\n")
        outputs += [out / "eval_history.csv", out / "eval_report.json"]
    (out / "timing.json").write_text(json.dumps({"train_seconds": tlog.wall_time}) + "\n")
    inputs = {"data": data} if init is None else {"data": data, "init": init}
    write_manifest(out / "manifest.json", "train", cfg, inputs, outputs)
    _check_files(outputs + [out / "manifest.json"])
    load_checkpoint(out / "final.ckpt")
    return outputs


# -- eval ---------------------------------------------------------------------


def run_eval(cfg, data, checkpoint, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    net = load_checkpoint(checkpoint)
    _, eval_set = _splits(cfg, load_dataset(data))
    tc = train_config(cfg)
    report = evaluate(net, eval_set, tc)
    outputs = [out / "eval_report.json", out / "eval_report.csv"]
    (out / "eval_report.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    (out / "eval_report.csv").write_text(",".join(report.csv_header()) + "\n" + ",".join(report.csv_values()) + "\n")
    for dom, (hp, hn) in domain_histograms(net, eval_set, tc).items():
        for tag, h in (("pos", hp), ("neg", hn)):
            path = out / f"hist_{dom}_{tag}.csv"
            write_histogram_csv(h, path)
            outputs.append(path)
            masses = np.loadtxt(path, delimiter=",", skiprows=1)[:, 1]
            if len(masses) != tc.bins or abs(masses.sum() - 1.0) > 1e-9:
                raise ValidationError(f"{path}: histogram masses do not sum to 1 over {tc.bins} rows")
    write_manifest(out / "manifest.json", "eval", cfg, {"data": data, "checkpoint": checkpoint}, outputs)
    _check_files(outputs)
    return outputs


# -- ablate -------------------------------------------------------------------


def _ablation_cell(args):
    cfg, data, mode, seed, init = args
    cfg = dict(cfg, seed=seed)
    train_set, eval_set = _splits(cfg, load_dataset(data))
    tc = train_config(cfg, mode=mode, eval_every=1.0)
    net, _ = train(tc, train_set, load_checkpoint(init))
    return mode, seed, evaluate(net, eval_set, tc)


def _pretrain_cell(args):
    cfg, data, seed, path = args
    cfg = dict(cfg, seed=seed)
    train_set, _ = _splits(cfg, load_dataset(data))
    net, _ = pretrain(cfg, train_set)
    save_checkpoint(net, path)
    return path


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def run_ablate(cfg, data, out, seeds=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = tuple(seeds if seeds is not None else cfg["ablate_seeds"])
    modes = tuple(cfg["ablate_modes"])
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    pre = [out / f"pretrain_seed{s}.ckpt" for s in seeds]
    _map(_pretrain_cell, [(cfg, str(data), s, p) for s, p in zip(seeds, pre)], workers)
    cells = [(cfg, str(data), m, s, str(p)) for m in modes for s, p in zip(seeds, pre)]
    results = _map(_ablation_cell, cells, workers)

    domains = list(results[0][2].domains)
    header = ["mode", "seed"]
    for d in domains:
        header += [f"{d}_margin", f"{d}_intersection", f"{d}_rank1"]
    lines = [",".join(header)]
    for mode, seed, rep in results:
        row = [mode, str(seed)]
        for d in domains:
            v = rep.domains[d]
            row += [format_float(v.margin), format_float(v.intersection), format_float(v.rank1)]
        lines.append(",".join(row))
    table = out / "ablation.csv"
    table.write_text("\n".join(lines) + "\n")
    outputs = [table] + pre
    write_manifest(out / "manifest.json", "ablate", dict(cfg, ablate_seeds=seeds), {"data": data}, outputs)
    _check_files(outputs)
    if len(lines) - 1 != len(modes) * len(seeds):
        raise ValidationError("ablation table has the wrong number of rows")
    return outputs


# -- entry point --------------------------------------------------------------


def rerun(manifest_path, out=None):
    m = json.loads(Path(manifest_path).read_text())
    cfg = normalize(m["config"])
    inputs = m["inputs"]
    cmd = m["command"]
    target = out
    if cmd == "synth":
        return run_synth(cfg, target if target is not None else inputs["out"])
    if target is None:
        target = Path(manifest_path).parent
    if cmd == "train":
        return run_train(cfg, inputs["data"], target, inputs.get("init"))
    if cmd == "eval":
        return run_eval(cfg, inputs["data"], inputs["checkpoint"], target)
    if cmd == "ablate":
        return run_ablate(cfg, inputs["data"], target)
    raise ValueError(f"unknown command {cmd!r} in manifest")


def build_parser():
    p = argparse.ArgumentParser(prog="ddlab", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="flat key = value config file (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", required=True)
        if data:
            sp.add_argument("--data", required=True, help="dataset CSV written by 'synth'")

    common(sub.add_parser("synth", help="generate a synthetic dataset"), data=False)
    sp = sub.add_parser("train", help="pre-train a baseline then fine-tune in the configured mode")
    common(sp)
    sp.add_argument("--init", help="start from this checkpoint instead of pre-training")
    sp.add_argument("--mode", help="override the config mode")
    sp = sub.add_parser("eval", help="evaluate a checkpoint on the held-out identities")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp = sub.add_parser("ablate", help="run every ablation mode over shared seeds")
    common(sp)
    sp.add_argument("--seeds", help="comma-separated seeds (overrides ablate_seeds)")
    sp = sub.add_parser("rerun", help="re-execute the command recorded in a manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            outputs = rerun(args.manifest, args.out)
        else:
            cfg = load_config(args.config) if args.config else normalize({})
            if args.seed is not None:
                cfg["seed"] = args.seed
            if args.command == "synth":
                outputs = run_synth(cfg, args.out)
            elif args.command == "train":
                if args.mode:
                    cfg = normalize(dict(cfg, mode=args.mode))
                    train_config(cfg)
                outputs = run_train(cfg, args.data, args.out, args.init)
            elif args.command == "eval":
                outputs = run_eval(cfg, args.data, args.checkpoint, args.out)
            else:
                seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
                outputs = run_ablate(cfg, args.data, args.out, seeds)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for o in outputs:
        log.info("wrote %s", o)
    return 0


if __name__ == "__main__":
    sys.exit(main())
