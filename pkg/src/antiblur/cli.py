"""Command-line harness: ``synth``, ``register``, ``compare`` and ``metrics``.

Exit codes: 0 success, 1 I/O or dimension error, 2 divergence, 3 degenerate
input, 64 usage error.

Configuration precedence is flags > ``--config`` JSON > built-in defaults.  The
JSON file has sections named after the config classes::

    {"pipeline": {"mode": "abn", "stages": 5, "inner_iters": 100,
                  "smoothing": 3.0, "seed": 0},
     "optimizer": {"learning_rate": 0.3},
     "loss": {"similarity": "mse", "lam": 10.0, "window": 9, "reg_norm": "mean"},
     "synth": {"sigma": 18.0, "alpha": 800.0, "dims": [64, 64], "seed": 0,
               "truncation": 3.0}}

Every manifest written by a command uses the same layout, so it can be fed
back through ``--config`` to reproduce the run.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import metrics as M
from .energy import LossConfig, mse, total_loss
from .errors import (DataError, DegenerateInputError, DimensionError, DivergenceError,
                     FormatError, ParameterError)
from .grid import (load_field, load_image, load_labels, save_field, save_image,
                   save_labels)
from .pipeline import AdamConfig, PipelineConfig, run_pipeline
from .sampler import warp_image, warp_labels
from .synth import SynthConfig, make_pair, phantom

log = logging.getLogger("antiblur")

EXIT_OK, EXIT_IO, EXIT_DIVERGED, EXIT_DEGENERATE, EXIT_USAGE = 0, 1, 2, 3, 64

REPORT_HEADER = ["pair_id", "mode", "stages", "ssim", "cc", "dice", "jaccard",
                 "smd", "tenengrad", "final_loss", "seconds"]
TRACE_HEADER = ["stage", "similarity", "regularizer", "stage_total",
                "first_iter_loss", "last_iter_loss"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- configuration ------------------------------------------------------------

def _load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def _pick(flag, section, key, default):
    if flag is not None:
        return flag
    if key in section:
        return section[key]
    return default


def _parse_dims(text):
    try:
        dims = tuple(int(p) for p in str(text).lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"bad --dims {text!r}, expected e.g. 64x64") from exc
    if len(dims) not in (2, 3) or min(dims) < 2:
        raise UsageError(f"bad --dims {text!r}")
    return dims


def _parse_stage_list(text):
    out = set()
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ".." in part or "-" in part:
                lo, hi = part.replace("..", "-").split("-")
                out.update(range(int(lo), int(hi) + 1))
            else:
                out.add(int(part))
        except ValueError as exc:
            raise UsageError(f"bad stage list {text!r}") from exc
    if not out or min(out) < 1:
        raise UsageError(f"bad stage list {text!r}")
    return sorted(out)


def _build_configs(args, cfg):
    p = cfg.get("pipeline", {})
    o = cfg.get("optimizer", {})
    lo = cfg.get("loss", {})
    lam = args.lam if args.lam is not None else lo.get("lam", lo.get("lambda", 10.0))
    loss = LossConfig(similarity=_pick(args.similarity, lo, "similarity", "mse"),
                      lam=float(lam),
                      window=int(_pick(args.window, lo, "window", 9)),
                      reg_norm=_pick(args.reg_norm, lo, "reg_norm", "mean"))
    opt_defaults = AdamConfig()
    lr = _pick(args.lr, o, "learning_rate", opt_defaults.learning_rate)
    opt = AdamConfig(learning_rate=float(lr),
                     beta1=float(o.get("beta1", opt_defaults.beta1)),
                     beta2=float(o.get("beta2", opt_defaults.beta2)),
                     epsilon=float(o.get("epsilon", opt_defaults.epsilon)))
    mode = _pick(getattr(args, "mode", None), p, "mode", "abn")
    stages = _pick(getattr(args, "stages", None), p, "stages", None)
    return PipelineConfig(mode=mode, stages=stages,
                          inner_iters=int(_pick(args.iters, p, "inner_iters", 100)),
                          smoothing=float(_pick(args.smoothing, p, "smoothing", 3.0)),
                          optimizer=opt, loss=loss,
                          seed=int(_pick(args.seed, p, "seed", 0)))


def _config_snapshot(pcfg=None, scfg=None):
    snap = {}
    if pcfg is not None:
        snap["pipeline"] = {f.name: getattr(pcfg, f.name) for f in fields(pcfg)
                            if f.name not in ("optimizer", "loss")}
        snap["optimizer"] = asdict(pcfg.optimizer)
        snap["loss"] = asdict(pcfg.loss)
    if scfg is not None:
        snap["synth"] = asdict(scfg)
        snap["synth"]["dims"] = list(scfg.dims)
    return snap


def _write_json(path, obj):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _write_text(path, text):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _image_name(stem, ndim):
    return f"{stem}.pgm" if ndim == 2 else f"{stem}.raw"


def _find(directory, stem):
    for suffix in (".pgm", ".raw"):
        path = Path(directory) / (stem + suffix)
        if path.exists():
            return path
    return None


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


# -- synth --------------------------------------------------------------------

def cmd_synth(args):
    cfg = _load_config(args.config)
    s = cfg.get("synth", {})
    dims = _parse_dims(args.dims) if args.dims is not None else tuple(s.get("dims", (64, 64)))
    base = SynthConfig(sigma=float(_pick(args.sigma, s, "sigma", 18.0)),
                       alpha=float(_pick(args.alpha, s, "alpha", 800.0)),
                       dims=dims,
                       seed=int(_pick(args.seed, s, "seed", 0)),
                       truncation=float(_pick(args.truncation, s, "truncation", 3.0)))
    kind = args.phantom or s.get("phantom", "blobs")
    count = args.pairs
    if count < 1:
        raise UsageError("--pairs must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": "synth", "phantom": kind, "pairs": [],
                **_config_snapshot(scfg=base)}
    manifest["synth"]["phantom"] = kind
    for i in range(count):
        scfg = SynthConfig(sigma=base.sigma, alpha=base.alpha, dims=base.dims,
                           seed=base.seed + i, truncation=base.truncation)
        pair_dir = out if count == 1 else out / f"pair_{i:03d}"
        pair_dir.mkdir(parents=True, exist_ok=True)
        raw, labels = phantom(kind, scfg.dims, seed=scfg.seed)
        source, target, fld = make_pair(raw, scfg)
        ndim = len(scfg.dims)
        files = {"source": _image_name("source", ndim), "target": _image_name("target", ndim),
                 "true_field": "field.raw"}
        save_image(source, pair_dir / files["source"])
        save_image(target, pair_dir / files["target"])
        save_field(fld, pair_dir / files["true_field"])
        if labels is not None:
            files["source_labels"] = _image_name("source_labels", ndim)
            files["target_labels"] = _image_name("target_labels", ndim)
            save_labels(labels, pair_dir / files["source_labels"])
            save_labels(warp_labels(labels, fld), pair_dir / files["target_labels"])
        manifest["pairs"].append({
            "dir": str(pair_dir.relative_to(out)),
            "seed": scfg.seed,
            "files": {k: str((pair_dir / v).relative_to(out)) for k, v in files.items()},
            "mse_source_target": mse(source, target),
            "mean_displacement": float(np.mean(np.linalg.norm(fld.data, axis=-1))),
        })
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {count} pair(s) to {out}")
    return EXIT_OK


# -- register -----------------------------------------------------------------

def _trace_csv(result, lam):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for t in result.traces:
        w.writerow([t.stage_index, _fmt(t.loss_similarity), _fmt(t.loss_regularizer),
                    _fmt(t.loss_similarity + lam * t.loss_regularizer),
                    _fmt(t.loss_history[0]), _fmt(t.loss_history[-1])])
    return buf.getvalue()


def cmd_register(args):
    cfg = _load_config(args.config)
    pcfg = _build_configs(args, cfg)
    source = load_image(args.source)
    target = load_image(args.target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result = run_pipeline(source, target, pcfg)
    seconds = time.perf_counter() - t0
    # PGM would quantize the output; rawvol keeps it lossless
    warped_name = "warped.raw"
    save_image(result.final_warped, out / warped_name)
    save_field(result.final_field, out / "field.raw")
    _write_text(out / "trace.csv", _trace_csv(result, pcfg.loss.lam))
    single = bool(result.final_warped == warp_image(source, result.final_field))
    report = M.evaluate(result.final_warped, target)
    manifest = {
        "command": "register",
        **_config_snapshot(pcfg),
        "inputs": {"source": str(args.source), "target": str(args.target)},
        "outputs": {"warped": warped_name, "field": "field.raw", "trace": "trace.csv"},
        "single_interpolation": single,
        "final_loss": asdict(result.final_loss),
        "stage_losses": [{"stage": t.stage_index, "similarity": t.loss_similarity,
                          "regularizer": t.loss_regularizer} for t in result.traces],
        "metrics": report.to_dict(),
        "seconds": seconds,
    }
    _write_json(out / "manifest.json", manifest)
    print(json.dumps({"mode": pcfg.mode, "stages": pcfg.stages,
                      "single_interpolation": single, **report.to_dict()}))
    return EXIT_OK


# -- compare ------------------------------------------------------------------

def _discover_pairs(root):
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    candidates = [root] + sorted(p for p in root.iterdir() if p.is_dir())
    pairs = []
    for d in candidates:
        src, tgt = _find(d, "source"), _find(d, "target")
        if src is not None and tgt is not None:
            pairs.append((d.name, d))
    return pairs


def _compare_cell(pair_id, directory, mode, stage_counts, pcfg):
    """All requested stage counts for one (pair, mode) from a single run."""
    source = load_image(_find(directory, "source"))
    target = load_image(_find(directory, "target"))
    slab, tlab = _find(directory, "source_labels"), _find(directory, "target_labels")
    src_labels = load_labels(slab) if slab else None
    tgt_labels = load_labels(tlab) if tlab else None
    cfg = PipelineConfig(mode=mode, stages=max(stage_counts), inner_iters=pcfg.inner_iters,
                         smoothing=pcfg.smoothing, optimizer=pcfg.optimizer,
                         loss=pcfg.loss, seed=pcfg.seed)
    # stage k of an N-stage run equals the last stage of a k-stage run, so one
    # run covers every prefix; timing is split evenly across stages
    t0 = time.perf_counter()
    result = run_pipeline(source, target, cfg)
    total_seconds = time.perf_counter() - t0
    per_stage = total_seconds / cfg.stages
    rows = []
    for k in stage_counts:
        trace = result.traces[k - 1]
        warped_labels = (warp_labels(src_labels, trace.combined_field)
                         if src_labels is not None else None)
        rep = M.evaluate(trace.warped, target, warped_labels,
                         tgt_labels if src_labels is not None else None)
        final = total_loss(trace.warped, target,
                           [t.combined_field for t in result.traces[:k]], cfg.loss)
        rows.append({"pair_id": pair_id, "mode": mode, "stages": k,
                     "ssim": rep.ssim, "cc": rep.cc, "dice": rep.dice,
                     "jaccard": rep.jaccard, "smd": rep.smd, "tenengrad": rep.tenengrad,
                     "final_loss": final.total, "seconds": per_stage * k})
    return rows


def report_csv(rows, omit_timing=False):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in rows:
        w.writerow([_fmt(None if (k == "seconds" and omit_timing) else r[k])
                    for k in REPORT_HEADER])
    return buf.getvalue()


def cmd_compare(args):
    cfg = _load_config(args.config)
    pcfg = _build_configs(args, cfg)
    pairs = _discover_pairs(args.data)
    if not pairs:
        raise UsageError(f"no source/target pairs under {args.data}")
    stage_counts = _parse_stage_list(args.stage_list or "1-10")
    modes = [m.strip() for m in (args.modes or "abn,crn").split(",") if m.strip()]
    for m in modes:
        if m not in ("abn", "crn"):
            raise UsageError(f"compare modes are abn and crn, got {m!r}")
    cells = [(pid, d, m) for pid, d in pairs for m in modes]
    jobs = max(1, int(args.jobs))
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_compare_cell, pid, d, m, stage_counts, pcfg)
                   for pid, d, m in cells]
        results = [f.result() for f in futures]
    rows = sorted((r for rs in results for r in rs),
                  key=lambda r: (r["pair_id"], r["mode"], r["stages"]))
    text = report_csv(rows, omit_timing=args.omit_timing)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_text(out, text)
    manifest = {
        "command": "compare",
        **_config_snapshot(pcfg),
        "inputs": {"data": str(args.data), "pairs": [pid for pid, _ in pairs]},
        "outputs": {"report": out.name},
        "modes": modes, "stage_counts": stage_counts, "jobs": jobs,
        "seconds": {f"{r['pair_id']}/{r['mode']}/{r['stages']}": r["seconds"] for r in rows},
    }
    _write_json(out.with_name(out.stem + ".manifest.json"), manifest)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


# -- metrics ------------------------------------------------------------------

def cmd_metrics(args):
    a = load_image(args.warped)
    b = load_image(args.target)
    if a.dims != b.dims:
        raise DimensionError(f"extents differ: {a.dims} vs {b.dims}")
    report = {"ssim": M.ssim(a, b), "cc": M.cc(a, b)}
    if args.warped_labels and args.target_labels:
        report["dice"], report["jaccard"] = M.dice_jaccard(load_labels(args.warped_labels),
                                                           load_labels(args.target_labels))
    else:
        report["dice"] = report["jaccard"] = None
    wa, tb = M.crop(a, args.margin), M.crop(b, args.margin)
    report["smd"], report["tenengrad"] = M.smd(wa), M.tenengrad(wa)
    report["target"] = {"smd": M.smd(tb), "tenengrad": M.tenengrad(tb)}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        _write_text(args.out, text + "\n")
    print(text)
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def _add_pipeline_flags(p, with_mode=True):
    if with_mode:
        p.add_argument("--mode", choices=("abn", "crn", "single"))
        p.add_argument("--stages", type=int)
    p.add_argument("--iters", type=int, help="Adam steps per stage")
    p.add_argument("--lambda", dest="lam", type=float, help="regularization weight")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--smoothing", type=float, help="latent field smoothing (voxels)")
    p.add_argument("--similarity", choices=("mse", "ncc_global", "ncc_windowed"))
    p.add_argument("--window", type=int, help="windowed NCC width")
    p.add_argument("--reg-norm", dest="reg_norm", choices=("mean", "sum"))
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON config file")


def build_parser():
    parser = _Parser(prog="antiblur", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic registration pairs")
    p.add_argument("--dims", help="grid extents, e.g. 64x64 or 32x32x32")
    p.add_argument("--seed", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--truncation", type=float)
    p.add_argument("--phantom", choices=("blobs", "textured", "labeled_shapes",
                                         "checkerboard", "disk"))
    p.add_argument("--pairs", type=int, default=1)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("register", help="register one source/target pair")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("compare", help="sweep modes and stage counts over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--stages", dest="stage_list", help="stage counts, e.g. 1-10 or 1,5,10")
    p.add_argument("--modes", help="comma list of abn,crn")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--omit-timing", action="store_true",
                   help="leave the seconds column empty (byte-stable reports)")
    _add_pipeline_flags(p, with_mode=False)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("metrics", help="accuracy and sharpness of a warped image")
    p.add_argument("--warped", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--warped-labels")
    p.add_argument("--target-labels")
    p.add_argument("--margin", type=int, default=2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ParameterError) as exc:
        print(f"antiblur {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"antiblur {args.command}: diverged at stage {exc.stage}, "
              f"iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DegenerateInputError as exc:
        print(f"antiblur {args.command}: degenerate input: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (OSError, FormatError, DataError, DimensionError) as exc:
        print(f"antiblur {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
