"""``mamba2mil`` command line: gen-data, train, ablate, verify, bench.

Exit codes: 0 success, 1 verification or training failure, 2 usage error,
3 I/O or data-format error. ``M2MIL_THREADS`` caps how many folds train at
once (default 1).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as dt
from . import model as mdl
from .bench import DEFAULT_LENGTHS, AgreementError, run_bench
from .metrics import METRICS, FoldMetrics, aggregate
from .ssd import SsdBlockConfig
from .training import DivergenceError, TrainConfig, evaluate, train
from .verify import check_names, run_verify

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class FoldError(RuntimeError):
    def __init__(self, fold, exc):
        super().__init__(f"fold {fold}: {exc}")
        self.fold = fold


# -- resolved configuration ----------------------------------------------------------

DEFAULTS = {
    "reduced_dim": 512,
    "branches": "original+flipped+transposed",
    "aggregation": "concatenate",
    "selection": "position",
    "realign": True,
    "share_branch_params": False,
    "block": "mamba2",
    "depth": 2,
    "state": 64,
    "heads": 4,
    "head_dim": None,
    "conv_kernel": 4,
    "chunk": 32,
    "gate": True,
    "layernorm": False,
    "wrapping": False,
    "selection_hidden": None,
    "mlp_hidden": None,
    "lr": 2e-4,
    "epochs": 20,
    "patience": 10,
    "grad_clip": None,
    "seed": 0,
    "folds": 5,
    "timing": False,
}

BLOCKS = ("mamba2", "mamba")


def resolve_config(flags: dict, config_file=None) -> dict:
    """flags > config file > defaults. A previous run's ``run.json`` is accepted
    as a config file."""
    resolved = dict(DEFAULTS)
    if config_file is not None:
        try:
            loaded = json.loads(Path(config_file).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{config_file}: not valid JSON ({exc})") from None
        if isinstance(loaded, dict) and isinstance(loaded.get("config"), dict):
            loaded = loaded["config"]
        if not isinstance(loaded, dict):
            raise UsageError(f"{config_file}: expected a JSON object")
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"{config_file}: unknown config keys {unknown}")
        resolved.update(loaded)
    resolved.update({k: v for k, v in flags.items() if k in DEFAULTS})
    return resolved


def build_configs(cfg: dict, input_dim: int, num_classes: int):
    if cfg["block"] not in BLOCKS:
        raise UsageError(f"block must be one of {BLOCKS}, got {cfg['block']!r}")
    heads, head_dim = cfg["heads"], cfg["head_dim"]
    if cfg["block"] == "mamba":
        # one scalar decay per channel instead of one per head
        heads, head_dim = cfg["reduced_dim"], 1
    try:
        ssd_cfg = SsdBlockConfig(
            depth=cfg["depth"], use_layernorm=cfg["layernorm"],
            use_residual_wrapping=cfg["wrapping"], conv_kernel=cfg["conv_kernel"],
            heads=heads, head_dim=head_dim, state_dim=cfg["state"], gate=cfg["gate"],
            chunk=cfg["chunk"])
        model_cfg = mdl.ModelConfig(
            input_dim=input_dim, reduced_dim=cfg["reduced_dim"], num_classes=num_classes,
            branches=tuple(cfg["branches"].split("+")), aggregation=cfg["aggregation"],
            ssd=ssd_cfg, selection_hidden=cfg["selection_hidden"], mlp_hidden=cfg["mlp_hidden"],
            selection=cfg["selection"], realign=cfg["realign"],
            share_branch_params=cfg["share_branch_params"])
        train_cfg = TrainConfig(lr=cfg["lr"], max_epochs=cfg["epochs"], patience=cfg["patience"],
                                seed=cfg["seed"], grad_clip=cfg["grad_clip"])
    except ValueError as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    if cfg["folds"] < 1:
        raise UsageError("folds must be >= 1")
    return model_cfg, train_cfg


def git_blob_hash(blob: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


def input_hash(manifest: Path, bags_paths) -> str:
    """Hash over the manifest and every feature file, git-blob style per file."""
    root = manifest.parent
    lines = [f"{git_blob_hash(manifest.read_bytes())}  {manifest.name}"]
    for p in map(Path, bags_paths):
        name = p.relative_to(root) if p.is_relative_to(root) else p
        lines.append(f"{git_blob_hash(p.read_bytes())}  {name}")
    return hashlib.sha1("\n".join(lines).encode()).hexdigest()


def _manifest_paths(manifest: Path):
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [Path(r["path"]) if os.path.isabs(r["path"]) else manifest.parent / r["path"]
            for r in rows]


def _threads() -> int:
    raw = os.environ.get("M2MIL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"M2MIL_THREADS must be an integer, got {raw!r}") from None


# -- experiments ------------------------------------------------------------------------

@dataclass
class FoldOutcome:
    metrics: FoldMetrics
    params: dict
    log: object


def run_fold(bags, plan, model_cfg, train_cfg, seed, echo=None) -> FoldOutcome:
    k = plan.fold
    try:
        tr, va, te = (dt.select(bags, ids) for ids in (plan.train, plan.val, plan.test))
        params = mdl.init_params(model_cfg, seed + k)
        fold_train = TrainConfig(lr=train_cfg.lr, max_epochs=train_cfg.max_epochs,
                                 patience=train_cfg.patience, seed=seed + k,
                                 grad_clip=train_cfg.grad_clip)
        best, log = train(params, model_cfg, tr, va, fold_train)
        test_auc, test_acc, _ = evaluate(best, model_cfg, te)
        val_auc, val_acc, _ = evaluate(best, model_cfg, va)
    except Exception as exc:
        raise FoldError(k, exc) from exc
    if echo:
        echo(f"fold {k}: {len(log)} epochs (best {log.best_epoch}), "
             f"test AUC {test_auc:.4f} ACC {test_acc:.4f}, val AUC {val_auc:.4f} ACC {val_acc:.4f}")
    return FoldOutcome(FoldMetrics(test_auc, test_acc, val_auc, val_acc), best, log)


def run_experiment(bags, model_cfg, train_cfg, folds, seed, echo=None):
    plans = dt.make_splits(bags, folds=folds, seed=seed)
    workers = min(_threads(), len(plans))
    if workers == 1:
        outcomes = [run_fold(bags, p, model_cfg, train_cfg, seed, echo) for p in plans]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(
                lambda p: run_fold(bags, p, model_cfg, train_cfg, seed, echo), plans))
    return aggregate([o.metrics for o in outcomes]), outcomes


def _dataset_shape(bags):
    if not bags:
        raise UsageError("the manifest lists no bags")
    labels = sorted({b.label for b in bags})
    if labels[0] < 0:
        raise UsageError("labels must be non-negative class indices")
    return bags[0].features.shape[1], max(2, labels[-1] + 1)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_outdir(out: Path, force: bool):
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (pass --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


# -- commands --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    weights = None
    if args.imbalance == "bracs":
        if args.classes != len(dt.BRACS_PROPORTIONS):
            raise UsageError(f"--imbalance bracs needs --classes {len(dt.BRACS_PROPORTIONS)}")
        weights = dt.BRACS_PROPORTIONS
    try:
        spec = dt.SyntheticSpec(num_bags=args.bags, classes=args.classes, dim=args.dim,
                                n_min=args.n_min, n_max=args.n_max, rate=args.rate,
                                noise=args.noise, seed=args.seed, class_weights=weights)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _prepare_outdir(out, args.force)
    bags = dt.generate_synthetic(spec)
    manifest = dt.save_bags(bags, out)
    counts = np.bincount([b.label for b in bags], minlength=spec.classes)
    _write_json(out / "run.json", {
        "command": "gen-data",
        "config": {**vars(spec), "class_weights": list(weights) if weights else None},
        "seed": spec.seed,
        "input_hash": None,
        "output_hash": input_hash(manifest, _manifest_paths(manifest)),
        "outdir": str(out),
    })
    print(f"wrote {len(bags)} bags to {manifest}")
    for c, n in enumerate(counts):
        print(f"  class {c}: {n}")
    if bags:
        print(f"  instance-max oracle accuracy: {dt.oracle_accuracy(bags, spec):.4f}")
    return EXIT_OK


def _load(manifest):
    manifest = Path(manifest)
    bags = dt.load_bags(manifest)
    return manifest, bags


def cmd_train(args) -> int:
    cfg = resolve_config(_flag_overrides(args), args.config)
    manifest, bags = _load(args.manifest)
    model_cfg, train_cfg = build_configs(cfg, *_dataset_shape(bags))
    out = Path(args.out)
    _prepare_outdir(out, args.force)
    _write_json(out / "run.json", {
        "command": "train",
        "config": cfg,
        "model_config": model_cfg.to_dict(),
        "seed": cfg["seed"],
        "input_hash": input_hash(manifest, _manifest_paths(manifest)),
        "outdir": str(out),
    })
    print(f"training {len(bags)} bags, {cfg['folds']} folds, "
          f"{mdl.count_params(model_cfg)} parameters")
    report, outcomes = run_experiment(bags, model_cfg, train_cfg, cfg["folds"], cfg["seed"],
                                      echo=print)
    for k, o in enumerate(outcomes):
        fold_dir = out / f"fold_{k}"
        fold_dir.mkdir()
        mdl.save_checkpoint(fold_dir / "checkpoint.m2mil", model_cfg, o.params)
        (fold_dir / "trainlog.csv").write_text(o.log.to_csv(timing=cfg["timing"]))
    (out / "report.csv").write_text(report.to_csv())
    table = report.to_table(args.label)
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


# ablation presets: (group, variant, overrides of the base config)
_COMPONENTS = [
    ("mamba2", "original+flipped+transposed", "concatenate"),
    ("mamba2", "original+flipped+transposed", "add"),
    ("mamba", "original+flipped+transposed", "concatenate"),
    ("mamba2", "original+flipped", "concatenate"),
    ("mamba2", "original+transposed", "concatenate"),
    ("mamba2", "flipped+transposed", "concatenate"),
    ("mamba2", "original", "concatenate"),
    ("mamba2", "flipped", "concatenate"),
    ("mamba2", "transposed", "concatenate"),
]


def full_preset(random_seed=0, stride=10):
    """Every ablation cell: wrapping, depth, norm/state, ordering and component groups."""
    rows = [
        ("wrapping", "single", {"branches": "original"}),
        ("wrapping", "single+wrap", {"branches": "original", "wrapping": True}),
        ("wrapping", "full", {}),
    ]
    rows += [("depth", f"depth={d}", {"depth": d}) for d in (1, 2, 3)]
    rows += [("state", "layernorm", {"layernorm": True})]
    rows += [("state", f"state={s}", {"state": s}) for s in (64, 128)]
    rows += [
        ("ordering", "transposed", {}),
        ("ordering", f"stride:{stride}", {"branches": f"original+flipped+stride:{stride}"}),
        ("ordering", f"random:{random_seed}", {"branches": f"original+flipped+random:{random_seed}"}),
    ]
    rows += [("components", f"{b}/{br}/{ag}", {"block": b, "branches": br, "aggregation": ag})
             for b, br, ag in _COMPONENTS]
    return [(g, v, {**{"depth": 2, "state": 64, "layernorm": False, "wrapping": False,
                       "block": "mamba2", "aggregation": "concatenate",
                       "branches": "original+flipped+transposed"}, **o})
            for g, v, o in rows]


_AXES = {  # flag dest -> (config key, parser)
    "ordering": ("branches", str),
    "aggregation_axis": ("aggregation", str),
    "block_axis": ("block", str),
    "depth_axis": ("depth", int),
    "state_axis": ("state", int),
    "layernorm_axis": ("layernorm", lambda s: _parse_bool(s)),
    "wrapping_axis": ("wrapping", lambda s: _parse_bool(s)),
}


def _parse_bool(s):
    s = s.strip().lower()
    if s in ("on", "true", "1", "yes"):
        return True
    if s in ("off", "false", "0", "no"):
        return False
    raise UsageError(f"expected on/off, got {s!r}")


def grid_cells(args):
    axes = []
    for dest, (key, parse) in _AXES.items():
        raw = getattr(args, dest, None)
        if raw:
            values = [parse(v) for v in raw.split(",") if v.strip()]
            if not values:
                raise UsageError(f"--{dest.replace('_axis', '')} lists no values")
            axes.append((key, values))
    if not axes:
        return []
    keys = [k for k, _ in axes]
    return [("grid", ",".join(f"{k}={v}" for k, v in zip(keys, combo)), dict(zip(keys, combo)))
            for combo in itertools.product(*(vals for _, vals in axes))]


ABLATION_COLUMNS = ["group", "variant", "block", "branches", "aggregation", "depth", "state",
                    "layernorm", "wrapping", *METRICS]


def cmd_ablate(args) -> int:
    base = resolve_config(_flag_overrides(args), args.config)
    cells = []
    if args.preset == "full":
        cells += full_preset(random_seed=base["seed"])
    cells += grid_cells(args)
    if not cells:
        raise UsageError("empty grid: give at least one axis (e.g. --depth 1,2,3) or --preset full")
    manifest, bags = _load(args.manifest)
    shape = _dataset_shape(bags)
    cache: dict = {}
    rows = []
    for group, variant, overrides in cells:
        cfg = {**base, **overrides}
        model_cfg, train_cfg = build_configs(cfg, *shape)
        key = json.dumps(model_cfg.to_dict(), sort_keys=True)
        if key not in cache:
            print(f"[{len(cache) + 1}] {group}/{variant}: {cfg['block']} {cfg['branches']} "
                  f"{cfg['aggregation']} depth={cfg['depth']} state={cfg['state']} "
                  f"ln={cfg['layernorm']} wrap={cfg['wrapping']}")
            cache[key], _ = run_experiment(bags, model_cfg, train_cfg, cfg["folds"], cfg["seed"])
        report = cache[key]
        branches = cfg["branches"]
        rows.append({
            "group": group, "variant": variant, "block": cfg["block"], "branches": branches,
            "aggregation": cfg["aggregation"] if "+" in branches else "-",
            "depth": cfg["depth"], "state": cfg["state"],
            "layernorm": "on" if cfg["layernorm"] else "off",
            "wrapping": "on" if cfg["wrapping"] else "off",
            **report.row(),
        })
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(buf.getvalue())
    _write_json(out.with_suffix(".run.json"), {
        "command": "ablate", "config": base, "cells": [list(c) for c in cells],
        "seed": base["seed"], "input_hash": input_hash(manifest, _manifest_paths(manifest)),
        "outdir": str(out.parent),
    })
    print(f"wrote {len(rows)} rows ({len(cache)} distinct configurations) to {out}")
    return EXIT_OK


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_verify(args) -> int:
    only = [n.strip() for n in args.only.split(",")] if args.only else None
    try:
        report = run_verify(only=only, tolerance=args.tolerance, length=args.len,
                            chunks=args.chunks, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(report.render())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_bench(args) -> int:
    try:
        result = run_bench(lengths=args.len, chunk=args.chunk, repeats=args.repeats,
                           seed=args.seed, head_dim=args.head_dim, state_dim=args.state)
    except AgreementError as exc:
        print(f"FAIL: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(result.table())
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------

def _model_flags(p, axes=False):
    """Model and training flags. With ``axes`` the swept settings are left
    out, because ablate takes them as comma lists instead."""
    S = argparse.SUPPRESS
    g = p.add_argument_group("model")
    g.add_argument("--reduced-dim", type=int, default=S, help="width after the input projection")
    g.add_argument("--branches", default=S, help="'+'-joined orderings, e.g. original+flipped")
    if not axes:
        g.add_argument("--aggregation", choices=("concatenate", "add"), default=S)
    g.add_argument("--selection", choices=("position", "per-channel"), default=S)
    g.add_argument("--realign", action=argparse.BooleanOptionalAction, default=S,
                   help="undo each branch's ordering before fusing (default on)")
    g.add_argument("--share-branch-params", action=argparse.BooleanOptionalAction, default=S)
    if not axes:
        g.add_argument("--block", choices=BLOCKS, default=S)
        g.add_argument("--depth", type=int, default=S)
        g.add_argument("--state", type=int, default=S, help="state dimension per head")
    g.add_argument("--heads", type=int, default=S)
    g.add_argument("--head-dim", type=int, default=S)
    g.add_argument("--conv-kernel", type=int, default=S)
    g.add_argument("--chunk", type=int, default=S)
    g.add_argument("--gate", action=argparse.BooleanOptionalAction, default=S)
    if not axes:
        g.add_argument("--layernorm", action=argparse.BooleanOptionalAction, default=S)
        g.add_argument("--wrapping", action=argparse.BooleanOptionalAction, default=S)
    g.add_argument("--selection-hidden", type=int, default=S)
    g.add_argument("--mlp-hidden", type=int, default=S)
    t = p.add_argument_group("training")
    t.add_argument("--lr", type=float, default=S)
    t.add_argument("--epochs", type=int, default=S)
    t.add_argument("--patience", type=int, default=S)
    t.add_argument("--grad-clip", type=float, default=S)
    t.add_argument("--seed", type=int, default=S)
    t.add_argument("--folds", type=int, default=S)
    t.add_argument("--timing", action=argparse.BooleanOptionalAction, default=S,
                   help="record wall time in trainlog.csv (off keeps logs byte-reproducible)")
    p.add_argument("--config", help="JSON config file (or a previous run.json)")


def _flag_overrides(args) -> dict:
    return {k: v for k, v in vars(args).items() if k in DEFAULTS}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mamba2mil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic MIL dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--bags", type=int, default=200)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--n-min", type=int, default=40)
    p.add_argument("--n-max", type=int, default=550)
    p.add_argument("--rate", type=float, default=0.05, help="fraction of signal instances")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--imbalance", choices=("none", "bracs"), default="none")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="k seeded splits, one model per fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--label", default="Model", help="row label of the printed table")
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="sweep configurations, one CSV row per cell")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--preset", choices=("full",),
                   help="every ablation cell (21 rows; duplicates are trained once)")
    a = p.add_argument_group("grid axes (comma lists; the sweep is their Cartesian product)")
    a.add_argument("--ordering", help="branch sets, e.g. original+flipped+transposed,original")
    a.add_argument("--aggregation", dest="aggregation_axis", help="e.g. concatenate,add")
    a.add_argument("--block", dest="block_axis", help="e.g. mamba2,mamba")
    a.add_argument("--depth", dest="depth_axis", help="e.g. 1,2,3")
    a.add_argument("--state", dest="state_axis", help="e.g. 64,128")
    a.add_argument("--layernorm", dest="layernorm_axis", help="e.g. off,on")
    a.add_argument("--wrapping", dest="wrapping_axis", help="e.g. off,on")
    _model_flags(p, axes=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run the oracle suite")
    p.add_argument("--tolerance", type=float, help="override every check's tolerance")
    p.add_argument("--only", help=f"comma list of checks: {','.join(check_names())}")
    p.add_argument("--len", type=int, default=64, help="sequence length for scan checks")
    p.add_argument("--chunks", type=_int_list, default=(1, 3, 8, 17))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="time the three SSD paths")
    p.add_argument("--len", type=_int_list, default=list(DEFAULT_LENGTHS))
    p.add_argument("--chunk", type=int, default=32)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--state", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mamba2mil {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, dt.BagFormatError) as exc:
        print(f"mamba2mil {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FoldError as exc:
        cause = exc.__cause__
        code = EXIT_IO if isinstance(cause, (OSError, dt.BagFormatError)) else EXIT_FAIL
        print(f"mamba2mil {args.command}: {exc}", file=sys.stderr)
        return code
    except (DivergenceError, dt.StratificationError) as exc:
        print(f"mamba2mil {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
