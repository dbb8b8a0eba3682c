"""Command-line interface.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime error.  Errors
are reported as one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import errors
from .embedding import EmbedderConfig, embed
from .layout_io import ensure_dir, iter_windows, parse_layout, rasterize_window, read_pattern, read_pgm, write_pgm
from .library import HnswParams, PatternLibrary, bench_matching
from .litho import ProcessCondition, default_model, litho, load_model, write_kernels, synth_kernels
from .metrics import EpeConfig, epe_violations, pvband
from .pipeline import PipelineConfig, run_pipeline
from .selector import SelectorModel, extract_features, label_by_epe, predict, train
from .synth import mixed_corpus

CONFIG_ERRORS = (errors.ConfigError, errors.SchemaError, errors.BoundsError, errors.InvalidParam,
                 FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _model(spec: str, units: float = 1.0):
    """``synthetic`` or ``synthetic:K`` builds the default kernels, anything
    else is an AOK1 kernel file."""
    if spec == "synthetic" or spec.startswith("synthetic:"):
        order = int(spec.split(":", 1)[1]) if ":" in spec else 24
        return default_model(order, units_nm_per_px=units)
    return load_model(spec, units_nm_per_px=units)


def _library(path: str) -> PatternLibrary:
    if not (Path(path) / "manifest.json").exists():
        raise FileNotFoundError(f"no library at {path} (run `lib init` first)")
    return PatternLibrary.load(path)


def _embedder(lib: PatternLibrary) -> EmbedderConfig:
    e = lib.info.get("embedder", {})
    return EmbedderConfig(k_dim=e.get("k_dim", lib.dim), pool_to=e.get("pool_to", 256))


# ---------------------------------------------------------------------------
# subcommands


def cmd_slice(a) -> int:
    layout = parse_layout(a.layout)
    out = ensure_dir(a.out)
    written = 0
    for i, win in enumerate(iter_windows(layout, a.window, a.stride)):
        grid = rasterize_window(layout, win)
        if not grid.any() and not a.keep_empty:
            continue
        write_pgm(grid, out / f"win_{i:05d}_{win.origin_x}_{win.origin_y}.pgm")
        written += 1
    _emit({"windows_written": written, "out": str(out)})
    return 0


def cmd_litho(a) -> int:
    mask = read_pgm(a.mask)
    model = _model(a.model, a.units)
    printed = litho(mask, model, ProcessCondition(a.dose, a.defocus))
    write_pgm(printed, a.out)
    _emit({"out": a.out, "printed_pixels": int(printed.sum())})
    return 0


def cmd_verify(a) -> int:
    mask = read_pattern(a.mask)
    target = read_pattern(a.target)
    model = _model(a.model, a.units)
    cfg = EpeConfig(th_epe_nm=a.th_epe, units_nm_per_px=a.units)
    report = epe_violations(litho(mask, model), target, cfg).to_json()
    report["pvband_nm2"] = pvband(mask, model).area_nm2
    _emit(report)
    return 0


def cmd_kernels(a) -> int:
    k, w = synth_kernels(a.order, a.sigma, a.decay, a.size)
    write_kernels(a.out, k, w)
    _emit({"out": a.out, "order": a.order, "size": a.size})
    return 0


def cmd_opc(a) -> int:
    cfg = PipelineConfig.load(a.config)
    report = run_pipeline(cfg)
    report.write(a.report)
    _emit(report.aggregate)
    return 0


def cmd_lib(a) -> int:
    if a.lib_cmd == "init":
        if (Path(a.path) / "manifest.json").exists() and not a.force:
            raise errors.ConfigError(f"library already exists at {a.path} (use --force)")
        params = HnswParams(max_degree=a.max_degree, ef_search=a.ef_search, sigma=a.sigma,
                            metric=a.metric, seed=a.seed)
        lib = PatternLibrary(a.dim, params)
        lib.info["embedder"] = {"k_dim": a.dim, "pool_to": a.pool_to}
        lib.save(a.path)
        _emit({"path": a.path, "nodes": 0})
        return 0
    lib = _library(a.path)
    if a.lib_cmd == "insert":
        pattern = read_pattern(a.pattern)
        mask = read_pattern(a.mask)
        meta = {"epe": a.epe} if a.epe is not None else {}
        nid = lib.insert(embed(pattern, _embedder(lib)), mask, pattern, meta)
        lib.save(a.path)
        _emit({"node_id": nid, "nodes": len(lib)})
    elif a.lib_cmd == "query":
        res = lib.match(embed(read_pattern(a.pattern), _embedder(lib)))
        out = res.to_json()
        if out["distance"] == float("inf"):
            out["distance"] = None
        _emit(out)
    elif a.lib_cmd == "stats":
        audit = lib.audit()
        _emit({"nodes": len(lib), "levels": audit["levels"], "entry_point": lib.entry_point,
               "mean_degree_level0": audit["mean_degree_level0"], "params": lib.params.__dict__,
               "stats": lib.stats})
    elif a.lib_cmd == "audit":
        report = lib.audit()
        _emit(report)
        return 0 if report["ok"] else 3
    return 0


def cmd_bench(a) -> int:
    params = HnswParams(max_degree=a.max_degree, ef_search=a.ef_search, seed=a.seed)
    _emit(bench_matching(a.n, a.dim, a.queries, a.seed, params))
    return 0


def cmd_selector(a) -> int:
    if a.sel_cmd == "train":
        rng = np.random.default_rng(a.seed)
        model = default_model(units_nm_per_px=a.units)
        pats = mixed_corpus(rng, a.n)
        feats = [extract_features(p) for p in pats]
        labels = [label_by_epe(p, model, a.threshold)[0] for p in pats]
        sel = train(feats, labels, epochs=a.epochs, lr=a.lr, seed=a.seed, label_threshold=a.threshold)
        sel.save(a.out)
        _emit({"out": a.out, "samples": a.n, "critical": int(sum(labels)),
               "final_loss": sel.final_loss, "train_accuracy": sel.train_accuracy})
    else:
        sel = SelectorModel.load(a.model)
        label, p = predict(sel, extract_features(read_pattern(a.pattern)))
        _emit({"class": label, "route": "critical" if label else "non-critical", "p": p})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="opcflow", description="Adaptive OPC with pattern reuse.")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("slice", help="cut a JSON layout into PGM windows")
    s.add_argument("--layout", required=True)
    s.add_argument("--window", type=int, default=2048)
    s.add_argument("--stride", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--keep-empty", action="store_true")
    s.set_defaults(func=cmd_slice)

    s = sub.add_parser("litho", help="simulate the printed image of a mask")
    s.add_argument("--mask", required=True)
    s.add_argument("--model", default="synthetic", help="AOK1 kernel file or synthetic[:K]")
    s.add_argument("--dose", type=float, default=1.0)
    s.add_argument("--defocus", type=float, default=0.0)
    s.add_argument("--units", type=float, default=1.0, help="nm per pixel")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_litho)

    s = sub.add_parser("verify", help="EPE and PV-Band of a mask against a target")
    s.add_argument("--mask", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--model", default="synthetic")
    s.add_argument("--units", type=float, default=1.0)
    s.add_argument("--th-epe", type=float, default=15.0)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("kernels", help="write synthetic kernels in AOK1 format")
    s.add_argument("--out", required=True)
    s.add_argument("--order", type=int, default=24)
    s.add_argument("--sigma", type=float, default=12.0)
    s.add_argument("--decay", type=float, default=0.5)
    s.add_argument("--size", type=int, default=65)
    s.set_defaults(func=cmd_kernels)

    s = sub.add_parser("opc", help="run the full pipeline from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_opc)

    lib = sub.add_parser("lib", help="pattern library maintenance")
    lsub = lib.add_subparsers(dest="lib_cmd", required=True, parser_class=_Parser)
    s = lsub.add_parser("init")
    s.add_argument("--path", required=True)
    s.add_argument("--dim", type=int, default=256)
    s.add_argument("--pool-to", type=int, default=256)
    s.add_argument("--metric", default="euclid", choices=["euclid", "cosine", "inner"])
    s.add_argument("--sigma", type=float, default=HnswParams.sigma)
    s.add_argument("--max-degree", type=int, default=HnswParams.max_degree)
    s.add_argument("--ef-search", type=int, default=HnswParams.ef_search)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true")
    s = lsub.add_parser("insert")
    s.add_argument("--path", required=True)
    s.add_argument("--pattern", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--epe", type=int, help="EPE count the mask achieves on the pattern")
    s = lsub.add_parser("query")
    s.add_argument("--path", required=True)
    s.add_argument("--pattern", required=True)
    for name in ("stats", "audit"):
        s = lsub.add_parser(name)
        s.add_argument("--path", required=True)
    lib.set_defaults(func=cmd_lib)

    bench = sub.add_parser("bench", help="benchmarks")
    bsub = bench.add_subparsers(dest="bench_cmd", required=True, parser_class=_Parser)
    s = bsub.add_parser("matching", help="graph search vs linear scan on random unit vectors")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--dim", type=int, default=256)
    s.add_argument("--queries", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-degree", type=int, default=HnswParams.max_degree)
    s.add_argument("--ef-search", type=int, default=HnswParams.ef_search)
    bench.set_defaults(func=cmd_bench)

    sel = sub.add_parser("selector", help="train or apply the critical-pattern classifier")
    ssub = sel.add_subparsers(dest="sel_cmd", required=True, parser_class=_Parser)
    s = ssub.add_parser("train", help="train on a seeded synthetic corpus labeled by EPE")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=160)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threshold", type=int, default=10)
    s.add_argument("--epochs", type=int, default=500)
    s.add_argument("--lr", type=float, default=0.5)
    s.add_argument("--units", type=float, default=1.0)
    s = ssub.add_parser("predict")
    s.add_argument("--model", required=True)
    s.add_argument("--pattern", required=True)
    sel.set_defaults(func=cmd_selector)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(json.dumps({"error": "UsageError", "message": str(exc)}), file=sys.stderr)
        return 2
    except CONFIG_ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
