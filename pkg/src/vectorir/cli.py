"""Command line: ``vectorir <command> [options]``.

Every command writes into ``--out`` (a directory). Outputs are staged in a
scratch directory next to it and moved into place only when the command
succeeds, so a failed run leaves nothing behind. Each run also writes
``manifest.<command>.txt`` (``key=value`` lines: command, seed, config hash, versions).

Options may come from a JSON file given with ``--config``; flags on the
command line override it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .design_io import (
    FormatError, parse_design, read_instance_values, write_design, write_heatmap,
    write_instance_values,
)
from .features import cache_key, effective_distance, extract, grid_shape, location_matrix, save_volume
from .metrics import HOTSPOT_THRESHOLD, evaluate, tileize_ir
from .nn.model import ModelConfig
from .nn.train import TrainParams, train
from .pdn import build_system, golden_dynamic_ir
from .pipeline import (
    LabeledSlice, Predictor, fit_norm, make_pairs, planted_labels, planted_weights,
    split_validation,
)
from .profiler import ProfilerParams, profile_vector, write_report
from .synth import GeneratorSpec, generate_design

log = logging.getLogger("vectorir")


class UsageError(Exception):
    pass


def _ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _slices(text):
    return None if text in (None, "all") else [int(v) for v in str(text).split(",")]


def _design_files(paths):
    out = []
    for p in paths:
        p = Path(p)
        out.extend(sorted(p.glob("*.design")) if p.is_dir() else [p])
    if not out:
        raise UsageError("no design files found")
    return out


def _golden_dir(design_path: Path) -> Path:
    return design_path.with_suffix(".golden")


def _load_golden(design_path: Path, design, slices) -> list:
    d = _golden_dir(design_path)
    out = []
    for s in slices:
        f = d / f"slice_{s:04d}.csv"
        if not f.exists():
            raise UsageError(f"missing golden labels {f}; run `golden` first")
        ids, vals = read_instance_values(f)
        if ids != list(design.ids):
            raise UsageError(f"{f}: instance ids do not match {design_path}")
        out.append(vals)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen(a, out: Path):
    spec = GeneratorSpec(
        width=a.width, length=a.length, num_instances=a.instances, num_vias=a.vias,
        num_slices=a.slices, toggle_rate=a.toggle_rate, clustering=a.clustering,
        cycles=a.cycles, substeps=a.substeps,
    )
    for k in range(a.designs):
        write_design(generate_design(a.seed + k, spec), out / f"design_{k:03d}.design")
    return {"designs": a.designs}


def cmd_golden(a, out: Path):
    for path in _design_files(a.design):
        design = parse_design(path)
        grid = build_system(design)
        d = out / _golden_dir(Path(path.name)).name
        d.mkdir()
        for s in _slices(a.slices) or range(len(design.slices)):
            ir = golden_dynamic_ir(design, s, grid).ir
            write_instance_values(d / f"slice_{s:04d}.csv", design.ids, ir)
    return {}


def cmd_extract(a, out: Path):
    design = parse_design(a.design)
    if a.weights:
        norm = Predictor.load(a.weights).norm
    else:
        norm = fit_norm([design])
    (out / "norm.json").write_text(json.dumps(norm.as_dict(), indent=1))
    r = effective_distance(design.xy, design.vias)
    for s in _slices(a.slices) or range(len(design.slices)):
        sample = extract(design, s, norm, r=r)
        save_volume(sample.volume, out / f"slice_{s:04d}", key=cache_key(design, s, norm))
    return {}


def _model_config(a) -> ModelConfig:
    return ModelConfig(variant=a.variant, enc=a.enc, dec=a.dec, bias=a.bias,
                       cycles=a.cycles, substeps=a.substeps)


def cmd_train(a, out: Path):
    paths = _design_files(a.design)
    designs = [parse_design(p) for p in paths]
    cyc = {(d.cycles, d.substeps) for d in designs}
    if len(cyc) != 1:
        raise UsageError("designs disagree on cycles/substeps")
    a.cycles, a.substeps = cyc.pop()
    cfg = _model_config(a)
    if a.planted is not None:
        norm = fit_norm(designs)
        labels = planted_labels(designs, norm, planted_weights(a.planted))
        # keep the generated labels so that infer/eval can be checked against them
        for lab in labels:
            d = out / _golden_dir(Path(paths[lab.design_index].name)).name
            d.mkdir(exist_ok=True)
            write_instance_values(d / f"slice_{lab.slice_id:04d}.csv",
                                  designs[lab.design_index].ids, lab.ir)
    else:
        labels = []
        for k, (p, d) in enumerate(zip(paths, designs)):
            ids = range(len(d.slices))
            labels += [LabeledSlice(k, s, v) for s, v in zip(ids, _load_golden(p, d, ids))]
        norm = fit_norm(designs, labels)
    train_l, val_l = split_validation(labels, held_out=-1)
    hyper = TrainParams(epochs=a.epochs, lr=a.lr, lam=a.lam, patience=a.patience, seed=a.seed,
                        warm_start=a.warm_start)
    result = train(cfg, make_pairs(designs, train_l, norm), hyper,
                   make_pairs(designs, val_l, norm) or None, ir_scale=norm.ir)
    Predictor(cfg, result.params, norm).save(out / "model.weights")
    result.write_log(out / "train_log.csv")
    last = result.log[-1]
    print(f"trained {len(result.log)} epochs, best epoch {result.best_epoch}, "
          f"train rmse {last['train_rmse'] * 1e3:.4g} mV, val rmse {last['val_rmse'] * 1e3:.4g} mV")
    return {"variant": cfg.variant, "epochs_run": len(result.log)}


def cmd_infer(a, out: Path):
    pred = Predictor.load(a.weights)
    design = parse_design(a.design)
    for s in _slices(a.slices) or range(len(design.slices)):
        write_instance_values(out / f"slice_{s:04d}.csv", design.ids, pred.predict(design, s))
    return {}


def cmd_profile(a, out: Path):
    pred = Predictor.load(a.weights)
    design = parse_design(a.design)
    params = ProfilerParams(n_a=a.n_a, n_r=a.n_r, n_o=a.n_o, region_w=a.region, region_l=a.region,
                            cover_won_region_only=a.won_region_only, workers=a.workers)
    rep = profile_vector(design, pred, params)
    write_report(rep, design, params, out / "report.csv")
    Wr, Lr = params.region_grid(design.width, design.length)
    for sid, row in rep.recommendation.ir_maps.items():
        write_heatmap(row.reshape(Wr, Lr) * 1e3, out / f"slice_{sid:04d}_regions")
    for k, v in rep.timings.items():
        print(f"{k}: {v:.3f} s")
    print(f"candidates {rep.n_c}, regions covered {rep.covered_regions}, "
          f"uncovered {rep.uncovered_regions}")
    for rank, (r, s, v) in enumerate(rep.recommendation.picks, 1):
        print(f"{rank}. slice {s} region ({r // Lr},{r % Lr}) {v * 1e3:.4g} mV")
    for s, err in rep.failures.items():
        print(f"slice {s} failed: {err}", file=sys.stderr)
    return {"n_c": rep.n_c}


def cmd_eval(a, out: Path):
    design = parse_design(a.design)
    pid, pv = read_instance_values(a.pred)
    gid, gv = read_instance_values(a.golden)
    if pid != gid:
        raise UsageError("prediction and golden files list different instances")
    if pid != list(design.ids):
        raise UsageError("value files do not match the design's instances")
    loc = location_matrix(design.xy, design.width, design.length)
    rep = evaluate(pv, gv, loc, grid_shape(design.width, design.length), a.threshold)
    rep.write_csv(out / "metrics.csv")
    rep.write_pr_curve(out / "pr_curve_6x6.csv")
    for k, v in rep.rows():
        print(f"{k}: {v}")
    return {}


def cmd_plot(a, out: Path):
    design = parse_design(a.design)
    _, vals = read_instance_values(a.values)
    if len(vals) != design.num_instances:
        raise UsageError("value file does not match the design")
    loc = location_matrix(design.xy, design.width, design.length)
    grid, _ = tileize_ir(vals, loc, grid_shape(design.width, design.length), a.granularity)
    write_heatmap(grid * 1e3, out / Path(a.values).stem)
    return {}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="vectorir", description=__doc__.splitlines()[0])
    top.add_argument("--version", action="version", version=__version__)
    top.add_argument("-v", "--verbose", action="store_true")
    sub = top.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="JSON file of option defaults")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = add("gen", cmd_gen, "generate a synthetic corpus")
    p.add_argument("--designs", type=int, default=4)
    p.add_argument("--instances", type=int, default=2000)
    p.add_argument("--vias", type=int, default=64)
    p.add_argument("--slices", type=int, default=3)
    p.add_argument("--width", type=float, default=60.0)
    p.add_argument("--length", type=float, default=60.0)
    p.add_argument("--toggle-rate", type=float, default=0.05)
    p.add_argument("--clustering", type=float, default=0.7)
    p.add_argument("--cycles", type=int, default=20)
    p.add_argument("--substeps", type=int, default=5)

    p = add("golden", cmd_golden, "golden per-instance IR drop for every slice")
    p.add_argument("--design", nargs="+", required=True, help="design files or directories")
    p.add_argument("--slices", default="all")

    p = add("extract", cmd_extract, "write normalized feature volumes")
    p.add_argument("--design", required=True)
    p.add_argument("--weights", help="take normalization constants from a trained model")
    p.add_argument("--slices", default="all")

    p = add("train", cmd_train, "train a model on designs with golden labels")
    p.add_argument("--design", nargs="+", required=True, help="design files or directories")
    p.add_argument("--variant", default="temporal3d", choices=("temporal3d", "vanilla2d"))
    p.add_argument("--enc", type=_ints, default=(16, 32, 64, 64))
    p.add_argument("--dec", type=_ints, default=(64, 32, 16))
    p.add_argument("--bias", action="store_true")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lam", type=float, default=1e-4)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--no-warm-start", dest="warm_start", action="store_false",
                   help="start the head from random weights instead of the linear fit")
    p.add_argument("--planted", type=int, default=None, metavar="SEED",
                   help="train on labels from a fixed linear rule instead of golden labels")

    p = add("infer", cmd_infer, "predict per-instance IR drop")
    p.add_argument("--weights", required=True)
    p.add_argument("--design", required=True)
    p.add_argument("--slices", default="all")

    p = add("profile", cmd_profile, "recommend worst-case slices of a long vector")
    p.add_argument("--weights", required=True)
    p.add_argument("--design", required=True)
    p.add_argument("--n-a", type=int, default=200)
    p.add_argument("--n-r", type=int, default=5)
    p.add_argument("--n-o", type=int, default=3)
    p.add_argument("--region", type=float, default=15.0)
    p.add_argument("--won-region-only", action="store_true")
    p.add_argument("--workers", type=int, default=1)

    p = add("eval", cmd_eval, "compare predicted and golden IR drop")
    p.add_argument("--design", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--golden", required=True)
    p.add_argument("--threshold", type=float, default=HOTSPOT_THRESHOLD)

    p = add("plot", cmd_plot, "tile heatmap of per-instance values")
    p.add_argument("--design", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--granularity", type=int, default=1)
    return top


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        conf = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {args.config}: {exc}")
    if not isinstance(conf, dict):
        parser.error("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {act.dest for act in sub._actions}
    unknown = set(k.replace("-", "_") for k in conf) - known
    if unknown:
        parser.error(f"unknown config keys: {', '.join(sorted(unknown))}")
    for act in sub._actions:
        if act.dest in conf or act.dest.replace("_", "-") in conf:
            val = conf.get(act.dest, conf.get(act.dest.replace("_", "-")))
            act.default = act.type(val) if act.type and isinstance(val, str) else val
            act.required = False
    return parser.parse_args(argv)


def _manifest(args, extra) -> str:
    conf = {k: v for k, v in vars(args).items() if k not in ("fn", "out", "verbose")}
    blob = json.dumps(conf, sort_keys=True, default=str).encode()
    rows = {
        "command": args.command,
        "seed": args.seed,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "vectorir": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }
    rows.update({k: conf[k] for k in sorted(conf) if k not in rows and conf[k] is not None})
    rows.update(extra or {})
    return "".join(f"{k}={v}\n" for k, v in rows.items())


def main(argv=None) -> int:
    parser = build_parser()
    args = _parse(parser, argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        parser.error(f"--out {out} exists and is not a directory")
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        extra = args.fn(args, stage)
        (stage / f"manifest.{args.command}.txt").write_text(_manifest(args, extra))
        out.mkdir(exist_ok=True)
        for item in stage.iterdir():
            dest = out / item.name
            if dest.is_dir():
                shutil.rmtree(dest)
            item.replace(dest)
    except (UsageError, FormatError, ValueError, OSError) as exc:
        print(f"vectorir {args.command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
