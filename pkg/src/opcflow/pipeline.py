"""End-to-end flow over a sliced layout.

For every non-empty window: classify; non-critical patterns get the fast
rule-based solver; critical ones are embedded and matched against the
pattern library.  A match reuses the stored mask after shift calibration; a
new pattern is optimized from scratch and inserted into the library.

The report is JSON lines, one record per pattern followed by one aggregate
object.  With a fixed seed every field except timings is reproducible.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .embedding import EmbedderConfig, embed
from .errors import ConfigError
from .ilt import IltConfig, fast_solver, optimize
from .layout_io import ensure_dir, iter_windows, parse_layout, rasterize_window, write_pgm
from .library import HnswParams, PatternLibrary
from .litho import Corners, LithoModel, ProcessCondition, default_model, load_model
from .metrics import EpeConfig, pvband
from .selector import Router, SelectorModel
from .shift import REFINE_POLICIES, calibrate_and_verify

STAGES = ("classify", "embed", "match", "calibrate", "optimize", "insert", "verify", "other")
TIMING_KEYS = ("timings", "time_total_s", "total_runtime_s", "stage_fraction")


@dataclass(frozen=True)
class LithoSettings:
    kernels: Optional[str] = None  # AOK1 file; None -> synthetic kernels
    order: int = 24
    base_sigma_px: float = 12.0
    decay: float = 0.5
    kernel_size: int = 65
    resist_threshold: float = 0.055
    inner: tuple = (0.98, 25.0)  # (dose, defocus_nm)
    outer: tuple = (1.02, 0.0)


@dataclass(frozen=True)
class PipelineConfig:
    layout: str
    window: int = 256
    stride: Optional[int] = None
    litho: LithoSettings = LithoSettings()
    epe: dict = field(default_factory=dict)
    ilt: IltConfig = IltConfig()
    embedder: EmbedderConfig = EmbedderConfig()
    library_enabled: bool = True
    library_path: Optional[str] = None
    library: HnswParams = HnswParams()
    selector_model: Optional[str] = None
    fast_bias_px: int = 8
    refine_policy: str = "reference"
    refine_iters: int = 2
    seed: int = 0
    mask_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Optional[Path] = None) -> "PipelineConfig":
        """Build from the JSON config schema; relative paths resolve against ``base_dir``."""
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        base = Path(base_dir) if base_dir is not None else Path.cwd()

        def path(v):
            if v is None:
                return None
            p = Path(v)
            return str(p if p.is_absolute() else base / p)

        def section(name, typ):
            sub = doc.get(name, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            known = {f.name for f in fields(typ)}
            unknown = set(sub) - known
            if unknown:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
            return sub

        top = {"layout", "window", "stride", "litho", "epe", "ilt", "embedder", "library",
               "selector", "refine", "seed", "output"}
        unknown = set(doc) - top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "layout" not in doc:
            raise ConfigError("config needs a 'layout' path")
        try:
            seed = int(doc.get("seed", 0))
            lit = dict(section("litho", LithoSettings))
            if "kernels" in lit:
                lit["kernels"] = path(lit["kernels"])
            for corner in ("inner", "outer"):
                if corner in lit:
                    lit[corner] = tuple(float(x) for x in lit[corner])
            epe = section("epe", EpeConfig)
            lib_doc = dict(doc.get("library", {}))
            if not isinstance(lib_doc, dict):
                raise ConfigError("config section 'library' must be an object")
            enabled = bool(lib_doc.pop("enabled", True))
            lib_path = path(lib_doc.pop("path", None))
            known = {f.name for f in fields(HnswParams)}
            if set(lib_doc) - known:
                raise ConfigError(f"unknown keys in 'library': {sorted(set(lib_doc) - known)}")
            lib_doc.setdefault("seed", seed)
            sel = doc.get("selector", {})
            refine = doc.get("refine", {})
            out = doc.get("output", {})
            if set(sel) - {"model", "fast_bias_px"} or set(refine) - {"policy", "iters"} or set(out) - {"mask_dir"}:
                raise ConfigError("unknown keys in selector/refine/output sections")
            cfg = cls(
                layout=path(doc["layout"]),
                window=int(doc.get("window", 256)),
                stride=None if doc.get("stride") is None else int(doc["stride"]),
                litho=LithoSettings(**lit),
                epe=dict(epe),
                ilt=IltConfig(**section("ilt", IltConfig)),
                embedder=EmbedderConfig(**section("embedder", EmbedderConfig)),
                library_enabled=enabled,
                library_path=lib_path,
                library=HnswParams(**lib_doc),
                selector_model=path(sel.get("model")),
                fast_bias_px=int(sel.get("fast_bias_px", 8)),
                refine_policy=refine.get("policy", "reference"),
                refine_iters=int(refine.get("iters", 2)),
                seed=seed,
                mask_dir=path(out.get("mask_dir")),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        if cfg.refine_policy not in REFINE_POLICIES:
            raise ConfigError(f"refine policy must be one of {REFINE_POLICIES}")
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc, p.parent)

    def check_paths(self) -> None:
        for label, p in (("layout", self.layout), ("litho.kernels", self.litho.kernels),
                         ("selector.model", self.selector_model)):
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{label} path {p} does not exist")


def build_model(s: LithoSettings, units_nm_per_px: float) -> LithoModel:
    corners = Corners(inner=ProcessCondition(*s.inner), outer=ProcessCondition(*s.outer))
    if s.kernels:
        base = load_model(s.kernels, s.resist_threshold, units_nm_per_px)
        kernels, weights = base.kernels[:s.order], base.weights[:s.order]
    else:
        base = default_model(s.order, s.base_sigma_px, s.decay, s.kernel_size,
                             s.resist_threshold, units_nm_per_px)
        kernels, weights = base.kernels, base.weights
    return LithoModel(kernels, weights, s.resist_threshold, units_nm_per_px, corners)


@dataclass
class RunReport:
    records: List[dict]
    aggregate: dict

    def lines(self) -> List[str]:
        return [json.dumps(r, sort_keys=True) for r in self.records] + [json.dumps(self.aggregate, sort_keys=True)]

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


def aggregate(records: List[dict], empty_windows: int = 0, library_size: Optional[int] = None) -> dict:
    """Summary numbers, recomputable from the records alone."""
    ok = [r for r in records if r["route"] != "failed"]
    stage_tot = {s: sum(r["timings"].get(s, 0.0) for r in ok) for s in STAGES}
    total = sum(r["time_total_s"] for r in ok)
    outcomes = [r["library_outcome"] for r in ok]
    return {
        "type": "aggregate",
        "patterns": len(records),
        "failed": len(records) - len(ok),
        "empty_windows": empty_windows,
        "critical": sum(r["route"] == "critical" for r in ok),
        "non_critical": sum(r["route"] == "non-critical" for r in ok),
        "matched": outcomes.count("matched"),
        "new": outcomes.count("new"),
        "mean_epe": float(np.mean([r["epe_violations"] for r in ok])) if ok else 0.0,
        "mean_pvband_nm2": float(np.mean([r["pvband_nm2"] for r in ok])) if ok else 0.0,
        "total_ilt_iters": int(sum(r["iters_used"] for r in ok)),
        "library_size": library_size,
        "total_runtime_s": total,
        "stage_fraction": {s: (v / total if total > 0 else 0.0) for s, v in stage_tot.items()},
    }


def strip_timings(obj):
    """Drop timing fields recursively (what is left must be reproducible)."""
    if isinstance(obj, dict):
        return {k: strip_timings(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timings(v) for v in obj]
    return obj


class Pipeline:
    """Holds the model, router and library for one run (or a series of runs
    sharing the same library)."""

    def __init__(self, cfg: PipelineConfig, units_nm_per_px: float = 1.0,
                 library: Optional[PatternLibrary] = None):
        self.cfg = cfg
        self.model = build_model(cfg.litho, units_nm_per_px)
        self.epe_cfg = EpeConfig(**{**cfg.epe, "units_nm_per_px": units_nm_per_px})
        self.router = Router(SelectorModel.load(cfg.selector_model), ["non-critical", "critical"]) \
            if cfg.selector_model else None
        if library is None and cfg.library_enabled:
            lp = cfg.library_path
            if lp and (Path(lp) / "manifest.json").exists():
                library = PatternLibrary.load(lp)
            else:
                library = PatternLibrary(cfg.embedder.k_dim, cfg.library)
                library.info["embedder"] = {"k_dim": cfg.embedder.k_dim, "pool_to": cfg.embedder.pool_to}
        self.library = library

    def process(self, index: int, pattern: np.ndarray, window: dict) -> dict:
        cfg = self.cfg
        t_start = time.perf_counter()
        timings: Dict[str, float] = {}
        clock = [t_start]

        def lap(stage):
            now = time.perf_counter()
            timings[stage] = timings.get(stage, 0.0) + now - clock[0]
            clock[0] = now

        rec = {"index": index, "window": window, "shift": None, "node_id": None,
               "match_distance": None, "verified": None, "p_critical": None}
        if self.router is not None:
            route, p, _ = self.router.route(pattern)
            rec["p_critical"] = p
        else:
            route = "critical"
        rec["route"] = route
        lap("classify")

        if route == "non-critical":
            res = fast_solver(pattern, self.model, cfg.fast_bias_px, self.epe_cfg, with_pvband=False)
            lap("optimize")
            mask, report, iters, outcome, solver = res.mask, res.epe, 0, "skipped", "fast"
        elif self.library is None:
            res = optimize(pattern, self.model, cfg.ilt, epe_cfg=self.epe_cfg, with_pvband=False)
            lap("optimize")
            mask, report, iters, outcome, solver = res.mask, res.epe, res.iters_used, "skipped", "ilt"
        else:
            vec = embed(pattern, cfg.embedder)
            lap("embed")
            match = self.library.match(vec)
            lap("match")
            rec["match_distance"] = match.distance if np.isfinite(match.distance) else None
            if match.matched:
                nid = match.node_id
                cal = calibrate_and_verify(
                    pattern, self.library.pattern(nid), self.library.mask(nid), self.model,
                    cfg.ilt, self.epe_cfg, reference_epe=self.library.meta(nid).get("epe"),
                    policy=cfg.refine_policy, refine_iters=cfg.refine_iters)
                lap("calibrate")
                mask, report, iters = cal.corrected_mask, cal.epe_after, cal.refinement_iters
                outcome, solver = "matched", "reuse"
                rec.update(node_id=nid, shift={"dx": cal.shift.dx, "dy": cal.shift.dy},
                           verified=cal.verified)
            else:
                res = optimize(pattern, self.model, cfg.ilt, epe_cfg=self.epe_cfg, with_pvband=False)
                lap("optimize")
                nid = self.library.insert(vec, res.mask, pattern,
                                          {"epe": res.epe.violations, "window": window})
                lap("insert")
                mask, report, iters, outcome, solver = res.mask, res.epe, res.iters_used, "new", "ilt"
                rec["node_id"] = nid

        rec["pvband_nm2"] = pvband(mask, self.model).area_nm2
        if cfg.mask_dir:
            write_pgm(mask, Path(cfg.mask_dir) / f"mask_{index:05d}.pgm")
        lap("verify")
        total = time.perf_counter() - t_start
        timings["other"] = max(0.0, total - sum(timings.values()))
        rec.update(solver=solver, library_outcome=outcome, iters_used=int(iters),
                   epe_violations=int(report.violations), timings=timings, time_total_s=total)
        return rec

    def run_patterns(self, patterns, windows: Optional[List[dict]] = None, empty_windows: int = 0) -> RunReport:
        if self.cfg.mask_dir:
            ensure_dir(self.cfg.mask_dir)
        records = []
        for i, pat in enumerate(patterns):
            win = windows[i] if windows is not None else {"index": i}
            try:
                records.append(self.process(i, np.asarray(pat, dtype=np.uint8), win))
            except Exception as exc:  # recorded per pattern; the run continues
                records.append({"index": i, "window": win, "route": "failed",
                                "error": {"type": type(exc).__name__, "message": str(exc)}})
        if self.library is not None and self.cfg.library_path:
            self.library.save(self.cfg.library_path)
        size = len(self.library) if self.library is not None else None
        return RunReport(records, aggregate(records, empty_windows, size))


def run_pipeline(cfg: PipelineConfig, library: Optional[PatternLibrary] = None) -> RunReport:
    cfg.check_paths()
    layout = parse_layout(cfg.layout)
    pipe = Pipeline(cfg, layout.units_nm_per_px, library)
    patterns, windows, empty = [], [], 0
    for win in iter_windows(layout, cfg.window, cfg.stride):
        grid = rasterize_window(layout, win)
        if not grid.any():
            empty += 1
            continue
        patterns.append(grid)
        windows.append({"x": win.origin_x, "y": win.origin_y, "size": win.size})
    return pipe.run_patterns(patterns, windows, empty)
