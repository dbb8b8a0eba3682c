"""Dynamic pattern library: a hierarchical proximity graph of
<embedding, mask> pairs with greedy top-down matching and online insertion.

Concurrency: any number of concurrent ``query`` calls, or one writer
(``insert`` / ``save``), enforced with a readers-writer lock.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import math
import threading
import time
from collections import deque
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CorruptData, EmptyGraph, MaskMissing, VersionError
from .layout_io import read_pattern, write_pgm

FORMAT_VERSION = 1
METRICS = ("euclid", "cosine", "inner")
# Calibrated on the seeded corpus in tests/test_acceptance.py: shifted copies
# embed within ~1e-15 of each other, distinct patterns no closer than ~0.25.
DEFAULT_SIGMA = 0.05


@dataclass(frozen=True)
class HnswParams:
    max_degree: int = 16
    k_return: int = 8
    ef_search: int = 256
    ef_construction: int = 64
    level_multiplier: Optional[float] = None  # None -> 1 / ln(max_degree)
    max_levels: int = 8
    sigma: float = DEFAULT_SIGMA
    metric: str = "euclid"
    keep_connected: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.max_degree < 2:
            raise ValueError("max_degree must be >= 2")
        if not 1 <= self.k_return <= self.ef_search:
            raise ValueError("need 1 <= k_return <= ef_search")
        if self.ef_construction < 1 or self.max_levels < 1:
            raise ValueError("ef_construction and max_levels must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")

    @property
    def m_l(self) -> float:
        if self.level_multiplier is not None:
            return self.level_multiplier
        return 1.0 / math.log(self.max_degree)


@dataclass
class MatchResult:
    outcome: str  # "matched" | "new_pattern"
    node_id: Optional[int]
    distance: float
    candidates: List[Tuple[int, float]]
    n_distance: int = 0

    @property
    def matched(self) -> bool:
        return self.outcome == "matched"

    def to_json(self) -> dict:
        return {
            "outcome": self.outcome,
            "node_id": self.node_id,
            "distance": self.distance,
            "candidates": [[i, d] for i, d in self.candidates],
            "distance_computations": self.n_distance,
        }


class RWLock:
    """Writer-exclusive, reader-shared lock (writers are not starved)."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._waiting_writers = 0

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer or self._waiting_writers:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            self._waiting_writers += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._waiting_writers -= 1
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


def mask_key(mask: np.ndarray) -> str:
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    h = hashlib.sha256(b"%dx%d:" % m.shape)
    h.update(m.tobytes())
    return h.hexdigest()


class PatternLibrary:
    def __init__(self, dim: int, params: HnswParams = HnswParams()):
        self.dim = int(dim)
        self.params = params
        self._vectors = np.zeros((0, self.dim), dtype=np.float32)
        self._n = 0
        self._levels: List[Dict[int, List[int]]] = []
        self._top_level: List[int] = []
        self._entry: Optional[int] = None
        self._masks: Dict[int, np.ndarray] = {}
        self._patterns: Dict[int, np.ndarray] = {}
        self._mask_refs: Dict[int, Optional[str]] = {}
        self._meta: Dict[int, dict] = {}
        self._rng = np.random.default_rng(params.seed)
        self._lock = RWLock()
        self._stats_lock = threading.Lock()
        self.stats = {"queries": 0, "distance_computations": 0}
        # free-form metadata persisted with the library (e.g. embedder settings)
        self.info: dict = {}

    # -- basic accessors -------------------------------------------------

    def __len__(self) -> int:
        return self._n

    @property
    def entry_point(self) -> Optional[int]:
        return self._entry

    @property
    def max_level(self) -> int:
        return len(self._levels) - 1

    def vector(self, node_id: int) -> np.ndarray:
        return self._vectors[node_id]

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors[:self._n]

    def top_level(self, node_id: int) -> int:
        return self._top_level[node_id]

    def neighbors(self, node_id: int, level: int = 0) -> List[int]:
        return list(self._levels[level][node_id])

    def adjacency(self, level: int) -> Dict[int, List[int]]:
        return {k: list(v) for k, v in self._levels[level].items()}

    def mask(self, node_id: int) -> np.ndarray:
        try:
            return self._masks[node_id]
        except KeyError:
            raise MaskMissing(f"node {node_id} has no stored mask") from None

    def pattern(self, node_id: int) -> np.ndarray:
        try:
            return self._patterns[node_id]
        except KeyError:
            raise MaskMissing(f"node {node_id} has no stored pattern") from None

    def mask_ref(self, node_id: int) -> Optional[str]:
        return self._mask_refs.get(node_id)

    def meta(self, node_id: int) -> dict:
        return dict(self._meta.get(node_id, {}))

    # -- distances -------------------------------------------------------

    def distances(self, q: np.ndarray, ids) -> np.ndarray:
        v = self._vectors[ids].astype(np.float64)
        metric = self.params.metric
        if metric == "euclid":
            diff = v - q
            return np.sqrt(np.einsum("ij,ij->i", diff, diff))
        dots = v @ q
        if metric == "inner":
            # as a distance: 1 - <q, v>, which is 0 for identical unit vectors
            return 1.0 - dots
        return 1.0 - dots / (np.linalg.norm(v, axis=1) * np.linalg.norm(q))

    def _prepare(self, vector) -> np.ndarray:
        q = np.asarray(vector, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise ValueError(f"expected a {self.dim}-dim vector, got {q.shape[0]}")
        # compare in the stored precision so a stored vector matches itself exactly
        return q.astype(np.float32).astype(np.float64)

    # -- greedy layer search -------------------------------------------

    def search_layer(self, q: np.ndarray, starts: Sequence[Tuple[float, int]], width: int,
                     level: int, counter: Optional[List[int]] = None) -> List[Tuple[float, int]]:
        """Greedy beam search on one level.

        ``starts`` holds (distance, id) pairs.  Keeps a frontier ``W`` and a
        result set ``C`` of at most ``width`` nodes; stops once the nearest
        frontier node is farther than the farthest member of ``C``.  Returns
        ``C`` sorted ascending by (distance, id).
        """
        if not starts:
            raise EmptyGraph("search_layer needs at least one start node")
        adj = self._levels[level]
        visited = {i for _, i in starts}
        frontier = list(starts)
        heapq.heapify(frontier)
        result = [(-d, -i) for d, i in starts]
        heapq.heapify(result)
        while len(result) > width:
            heapq.heappop(result)
        while frontier:
            d, c = heapq.heappop(frontier)
            if d > -result[0][0]:
                break
            fresh = [e for e in adj[c] if e not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            ds = self.distances(q, fresh)
            if counter is not None:
                counter[0] += len(fresh)
            for e, de in zip(fresh, ds.tolist()):
                if len(result) < width or de < -result[0][0]:
                    heapq.heappush(frontier, (de, e))
                    heapq.heappush(result, (-de, -e))
                    if len(result) > width:
                        heapq.heappop(result)
        return sorted((-nd, -ni) for nd, ni in result)

    def _descend(self, q: np.ndarray, down_to: int, counter: List[int]) -> List[Tuple[float, int]]:
        """Width-1 greedy descent from the entry point to level ``down_to``."""
        d0 = float(self.distances(q, [self._entry])[0])
        counter[0] += 1
        ep = [(d0, self._entry)]
        for level in range(self.max_level, down_to, -1):
            ep = self.search_layer(q, ep, 1, level, counter)[:1]
        return ep

    # -- query -----------------------------------------------------------

    def query(self, vector, k: Optional[int] = None, ef: Optional[int] = None) -> MatchResult:
        p = self.params
        k = k or p.k_return
        ef = max(ef or p.ef_search, k)
        q = self._prepare(vector)
        with self._lock.read():
            if self._entry is None:
                raise EmptyGraph("library is empty")
            counter = [0]
            ep = self._descend(q, 0, counter)
            cands = self.search_layer(q, ep, ef, 0, counter)[:k]
        with self._stats_lock:
            self.stats["queries"] += 1
            self.stats["distance_computations"] += counter[0]
        best_d, best_id = cands[0]
        candidates = [(i, float(d)) for d, i in cands]
        if best_d < p.sigma:
            return MatchResult("matched", best_id, float(best_d), candidates, counter[0])
        return MatchResult("new_pattern", None, float(best_d), candidates, counter[0])

    def match(self, vector) -> MatchResult:
        """``query`` that reports an empty library as a new pattern."""
        try:
            return self.query(vector)
        except EmptyGraph:
            return MatchResult("new_pattern", None, math.inf, [], 0)

    def linear_scan(self, vector, k: int = 1) -> List[Tuple[int, float]]:
        q = self._prepare(vector)
        if not self._n:
            return []
        d = self.distances(q, np.arange(self._n))
        order = np.lexsort((np.arange(self._n), d))[:k]
        return [(int(i), float(d[i])) for i in order]

    # -- insertion -------------------------------------------------------

    def _draw_level(self) -> int:
        u = 1.0 - self._rng.random()  # uniform in (0, 1]
        return min(int(math.floor(-math.log(u) * self.params.m_l)), self.params.max_levels - 1)

    def _link(self, a: int, b: int, level: int) -> None:
        adj = self._levels[level]
        if b not in adj[a]:
            adj[a].append(b)
        if a not in adj[b]:
            adj[b].append(a)

    def _unlink(self, a: int, b: int, level: int) -> None:
        adj = self._levels[level]
        adj[a].remove(b)
        adj[b].remove(a)

    def _shrink(self, e: int, level: int) -> None:
        """Keep the ``max_degree`` nearest neighbors of ``e`` and drop the
        other edges in both directions."""
        adj = self._levels[level]
        nbrs = adj[e]
        d = self.distances(self._vectors[e].astype(np.float64), nbrs)
        ranked = [nbrs[i] for i in np.lexsort((np.asarray(nbrs), d))]
        keep, drop = ranked[:self.params.max_degree], ranked[self.params.max_degree:]
        if self.params.keep_connected:
            for x in list(drop):
                if len(adj[x]) > 1:
                    continue
                # x would be isolated: trade it for the farthest kept node
                # that has other edges
                for y in reversed(keep):
                    if len(adj[y]) > 1 and y not in drop:
                        keep.remove(y)
                        keep.append(x)
                        drop.remove(x)
                        drop.append(y)
                        break
        for x in drop:
            self._unlink(e, x, level)

    def insert(self, vector, mask: Optional[np.ndarray] = None,
               pattern: Optional[np.ndarray] = None, meta: Optional[dict] = None) -> int:
        q = self._prepare(vector)
        if abs(np.linalg.norm(q) - 1.0) > 1e-5:
            raise ValueError("library vectors must be unit-norm")
        p = self.params
        with self._lock.write():
            nid = self._n
            level = self._draw_level()
            if nid >= len(self._vectors):
                grown = np.zeros((max(16, 2 * len(self._vectors)), self.dim), dtype=np.float32)
                grown[:nid] = self._vectors[:nid]
                self._vectors = grown
            self._vectors[nid] = q.astype(np.float32)
            self._n += 1
            self._top_level.append(level)
            if mask is not None:
                m = np.ascontiguousarray(mask, dtype=np.uint8)
                self._masks[nid] = m
                self._mask_refs[nid] = mask_key(m)
            else:
                self._mask_refs[nid] = None
            if pattern is not None:
                self._patterns[nid] = np.ascontiguousarray(pattern, dtype=np.uint8)
            self._meta[nid] = dict(meta or {})

            prev_top = self.max_level
            while len(self._levels) <= level:
                self._levels.append({})
            for lv in range(level + 1):
                self._levels[lv][nid] = []
            if self._entry is None:
                self._entry = nid
                return nid

            counter = [0]
            # descend with width 1 through levels above the new node's top
            d0 = float(self.distances(q, [self._entry])[0])
            ep = [(d0, self._entry)]
            for lv in range(prev_top, level, -1):
                ep = self.search_layer(q, ep, 1, lv, counter)[:1]
            for lv in range(min(level, prev_top), -1, -1):
                cands = self.search_layer(q, ep, p.ef_construction, lv, counter)
                for _, e in cands[:p.max_degree]:
                    self._link(nid, e, lv)
                    if len(self._levels[lv][e]) > p.max_degree:
                        self._shrink(e, lv)
                ep = cands
            if level > prev_top:
                self._entry = nid
            return nid

    # -- audit -------------------------------------------------------------

    def audit(self) -> dict:
        """Check graph invariants; returns a report with an ``ok`` flag."""
        problems: List[str] = []
        M = self.params.max_degree
        for lv, adj in enumerate(self._levels):
            for u, nbrs in adj.items():
                if len(nbrs) > M:
                    problems.append(f"level {lv}: node {u} has degree {len(nbrs)} > {M}")
                if len(set(nbrs)) != len(nbrs) or u in nbrs:
                    problems.append(f"level {lv}: node {u} has duplicate or self edges")
                for v in nbrs:
                    if v not in adj:
                        problems.append(f"level {lv}: edge {u}->{v} to a node absent from the level")
                    elif u not in adj[v]:
                        problems.append(f"level {lv}: edge {u}->{v} is not symmetric")
        for u in range(self._n):
            for lv in range(len(self._levels)):
                present = u in self._levels[lv]
                if present != (lv <= self._top_level[u]):
                    problems.append(f"node {u}: level membership not contiguous at level {lv}")
        if self._entry is not None and self._top_level[self._entry] != max(self._top_level):
            problems.append("entry point is not on the top level")
        unreachable = 0
        if self._entry is not None:
            adj0 = self._levels[0]
            seen = {self._entry}
            todo = deque([self._entry])
            while todo:
                u = todo.popleft()
                for v in adj0[u]:
                    if v not in seen:
                        seen.add(v)
                        todo.append(v)
            unreachable = self._n - len(seen)
            if unreachable:
                problems.append(f"{unreachable} level-0 nodes unreachable from the entry point")
        degrees = [len(v) for v in self._levels[0].values()] if self._levels else []
        return {
            "ok": not problems,
            "nodes": self._n,
            "levels": len(self._levels),
            "entry_point": self._entry,
            "max_degree_seen": max(degrees) if degrees else 0,
            "mean_degree_level0": float(np.mean(degrees)) if degrees else 0.0,
            "unreachable": unreachable,
            "problems": problems[:50],
        }

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        """Write manifest.json, vectors.bin, masks/<id>.pgm and patterns/<id>.pgm."""
        root = Path(path)
        with self._lock.write():
            (root / "masks").mkdir(parents=True, exist_ok=True)
            (root / "patterns").mkdir(exist_ok=True)
            self._vectors[:self._n].astype("<f4").tofile(root / "vectors.bin")
            for nid, m in self._masks.items():
                write_pgm(m, root / "masks" / f"{nid}.pgm")
            for nid, pat in self._patterns.items():
                write_pgm(pat, root / "patterns" / f"{nid}.pgm")
            manifest = {
                "format": "opcflow-pattern-library",
                "version": FORMAT_VERSION,
                "params": asdict(self.params),
                "dim": self.dim,
                "node_count": self._n,
                "entry_point": self._entry,
                "nodes": [
                    {
                        "id": i,
                        "top_level": self._top_level[i],
                        "mask_ref": self._mask_refs.get(i),
                        "has_pattern": i in self._patterns,
                        "meta": self._meta.get(i, {}),
                    }
                    for i in range(self._n)
                ],
                "levels": [
                    {"ids": list(adj.keys()), "neighbors": [list(v) for v in adj.values()]}
                    for adj in self._levels
                ],
                "rng_state": self._rng.bit_generator.state,
                "stats": dict(self.stats),
                "info": self.info,
            }
            tmp = root / "manifest.json.tmp"
            tmp.write_text(json.dumps(manifest))
            tmp.replace(root / "manifest.json")

    @classmethod
    def load(cls, path) -> "PatternLibrary":
        root = Path(path)
        mpath = root / "manifest.json"
        if not mpath.exists():
            raise FileNotFoundError(str(mpath))
        try:
            manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError as exc:
            raise CorruptData(f"{mpath}: invalid JSON") from exc
        if manifest.get("version") != FORMAT_VERSION:
            raise VersionError(f"unsupported library version {manifest.get('version')!r}")
        try:
            lib = cls(int(manifest["dim"]), HnswParams(**manifest["params"]))
            n = int(manifest["node_count"])
            nodes = manifest["nodes"]
            levels = manifest["levels"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptData(f"{mpath}: malformed manifest ({exc})") from exc
        if len(nodes) != n:
            raise CorruptData("node table length does not match node_count")
        raw = np.fromfile(root / "vectors.bin", dtype="<f4") if n else np.zeros(0, "<f4")
        if raw.size != n * lib.dim:
            raise CorruptData(f"vectors.bin holds {raw.size} floats, expected {n * lib.dim}")
        lib._vectors = raw.reshape(n, lib.dim).astype(np.float32)
        lib._n = n
        for i, node in enumerate(nodes):
            if node["id"] != i:
                raise CorruptData("node ids must be dense and ordered")
            lib._top_level.append(int(node["top_level"]))
            lib._meta[i] = dict(node.get("meta", {}))
            ref = node.get("mask_ref")
            lib._mask_refs[i] = ref
            if ref is not None:
                mfile = root / "masks" / f"{i}.pgm"
                if not mfile.exists():
                    raise CorruptData(f"mask file for node {i} is missing")
                m = read_pattern(mfile)
                if mask_key(m) != ref:
                    raise CorruptData(f"mask for node {i} does not match its content key")
                lib._masks[i] = m
            if node.get("has_pattern"):
                pfile = root / "patterns" / f"{i}.pgm"
                if not pfile.exists():
                    raise CorruptData(f"pattern file for node {i} is missing")
                lib._patterns[i] = read_pattern(pfile)
        for level in levels:
            ids, nbrs = level["ids"], level["neighbors"]
            if len(ids) != len(nbrs):
                raise CorruptData("adjacency ids/neighbors length mismatch")
            adj: Dict[int, List[int]] = {}
            for u, vs in zip(ids, nbrs):
                if not 0 <= u < n or any(not 0 <= v < n for v in vs):
                    raise CorruptData(f"adjacency references an unknown node id near {u}")
                adj[int(u)] = [int(v) for v in vs]
            lib._levels.append(adj)
        for adj in lib._levels:
            for vs in adj.values():
                for v in vs:
                    if v not in adj:
                        raise CorruptData(f"edge to node {v} which is absent from its level")
        entry = manifest.get("entry_point")
        if entry is not None and not 0 <= entry < n:
            raise CorruptData("entry point references an unknown node id")
        lib._entry = entry
        if "rng_state" in manifest:
            lib._rng.bit_generator.state = manifest["rng_state"]
        lib.stats.update(manifest.get("stats", {}))
        lib.info = dict(manifest.get("info", {}))
        return lib


# ---------------------------------------------------------------------------
# matching benchmark


def random_unit_vectors(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def bench_matching(n: int = 2000, dim: int = 256, queries: int = 200, seed: int = 0,
                   params: Optional[HnswParams] = None) -> dict:
    """Recall@1 and distance-computation counts of graph search vs a linear scan."""
    params = params or HnswParams(seed=seed)
    rng = np.random.default_rng(seed)
    data = random_unit_vectors(n, dim, rng)
    held_out = random_unit_vectors(queries, dim, rng)
    lib = PatternLibrary(dim, params)
    t0 = time.perf_counter()
    for v in data:
        lib.insert(v)
    build_s = time.perf_counter() - t0
    hits, counts = 0, []
    t0 = time.perf_counter()
    for q in held_out:
        res = lib.query(q)
        counts.append(res.n_distance)
        hits += res.candidates[0][0] == lib.linear_scan(q, 1)[0][0]
    query_s = time.perf_counter() - t0
    return {
        "n": n,
        "dim": dim,
        "queries": queries,
        "seed": seed,
        "recall_at_1": hits / queries,
        "mean_distance_computations": float(np.mean(counts)),
        "max_distance_computations": int(np.max(counts)),
        "linear_scan_computations": n,
        "build_seconds": build_s,
        "mean_query_ms": 1000.0 * query_s / queries,
    }
