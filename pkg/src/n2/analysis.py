"""Diagnostics: Dirichlet-energy curves, an SGC comparator, the runtime
scaling benchmark with a dense counterpart, and proximity/state dumps.

The Dirichlet energy here is the degree-normalized form

    (1/n) sum_v sum_{v' in N(v)} 1/2 || x_v / sqrt(1 + deg v)
                                      - x_{v'} / sqrt(1 + deg v') ||^2

whose decay across recursive steps diagnoses over-smoothing.
"""

from __future__ import annotations

import json
import time
import tracemalloc
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, ShapeError, Tensor
from .graphs import Graph
from .message_passing import GlobMPParams, glob_mp
from .model import ModelConfig, ModelParams, _init_glob, forward
from .proximity import proximity_matrix


@dataclass
class EnergyCurve:
    raw: list[float]
    normalized: list[float]

    @classmethod
    def from_raw(cls, raw: list[float]) -> "EnergyCurve":
        peak = max(raw) if raw else 0.0
        if peak > 0:
            return cls(raw=list(raw), normalized=[e / peak for e in raw])
        return cls(raw=list(raw), normalized=[0.0 for _ in raw])


@dataclass
class BenchRecord:
    n: int
    n_p: int
    variant: str                # "dynamic" | "dense"
    seconds: float              # median of the timed repeats
    peak_bytes: int
    oom: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def dirichlet_energy(X, graph: Graph) -> float:
    x = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
    if x.shape[0] != graph.n:
        raise ShapeError("dirichlet_energy", x.shape, (graph.n,))
    if graph.m == 0:
        return 0.0
    scale = 1.0 / np.sqrt(1.0 + graph.degrees().astype(np.float64))
    xs = x * scale[:, None]
    diff = xs[graph.edges[:, 0]] - xs[graph.edges[:, 1]]
    return float(0.5 * np.sum(diff * diff) / graph.n)


def energy_curve(trajectory, graph: Graph) -> EnergyCurve:
    """Per-step Dirichlet energy of the graph-node states Q."""
    if not trajectory:
        raise ValueError("empty trajectory")
    return EnergyCurve.from_raw([dirichlet_energy(s.Q, graph) for s in trajectory])


def sgc_propagate(X, graph: Graph, K: int):
    """S^K X with S = D~^{-1/2} (A + I) D~^{-1/2}, computed edgewise."""
    x = (X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)).copy()
    if K < 0:
        raise ValueError("K must be >= 0")
    dinv = 1.0 / np.sqrt(1.0 + graph.degrees().astype(np.float64))
    src, dst = graph.edges[:, 0], graph.edges[:, 1]
    for _ in range(K):
        y = x * dinv[:, None]
        z = y.copy()
        if graph.m:
            np.add.at(z, dst, y[src])
        x = z * dinv[:, None]
    return Tensor(x) if isinstance(X, Tensor) else x


# ---------------------------------------------------------------------------
# scaling benchmark


def _dense_global_forward(Q: np.ndarray, M: np.ndarray, params: GlobMPParams,
                          block: int = 2048) -> np.ndarray:
    """Dense comparator: materializes the full n x n relation matrix
    (same measurement, all-pairs pathways) and applies it to the messages."""
    n = Q.shape[0]
    lam = [l.data[0, 0] for l in params.prox_np.lambdas]
    pieces = [p.apply(Tensor(Q)).data for p in params.prox_np.pieces]
    E = np.zeros((n, n))
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        acc = lam[0] * (pieces[0][lo:hi] @ pieces[0].T)
        for t in range(1, len(pieces)):
            acc += lam[t] * (pieces[t][lo:hi] @ pieces[t].T)
        E[lo:hi] = acc
    return E @ M


def bench_scaling(n_list, np_list, d: int = 32, q: int = 64, k: int = 8,
                  repeats: int = 5, seed: int = 0) -> list[BenchRecord]:
    """Times the global-MP forward (dynamic) against the dense comparator.

    Each cell reports the median of `repeats` runs after one warm-up; memory
    failures become records with oom=True rather than errors.
    """
    records = []
    rng = Rng(seed)
    params = _init_glob(q, d, d, k, rng.child(0))
    for n in sorted(set(int(v) for v in n_list)):
        gen = rng.child(n)
        Q = gen.normal(n, q)
        M = gen.normal(n, d)
        for n_p in sorted(set(int(v) for v in np_list)):
            R = gen.normal(n_p, q)
            records.append(_bench_cell(
                "dynamic", n, n_p, repeats,
                lambda: glob_mp(Q, M, R, params),
                peak_probe=lambda: _tape_bytes(Q, M, R, params)))
        records.append(_bench_cell(
            "dense", n, int(np_list[0]) if len(np_list) else 0, repeats,
            lambda: _dense_global_forward(Q.data, M.data, params),
            peak_probe=lambda: 8 * n * n))
    return records


def _tape_bytes(Q, M, R, params) -> int:
    from .model import mark_trainable  # params here are GlobMPParams
    for _, t, _ in params.leaves("bench"):
        t.requires_grad = True
    out, dR = glob_mp(Q, M, R, params)
    total = sum(t.data.nbytes for t in ad.tape_tensors(out, dR))
    for _, t, _ in params.leaves("bench"):
        t.requires_grad = False
    return total


def _bench_cell(variant: str, n: int, n_p: int, repeats: int, fn,
                peak_probe) -> BenchRecord:
    try:
        with ad.no_grad():
            fn()                       # warm-up
            times = []
            for _ in range(max(repeats, 1)):
                t0 = time.perf_counter()
                fn()
                times.append(time.perf_counter() - t0)
        peak = int(peak_probe())
        return BenchRecord(n=n, n_p=n_p, variant=variant,
                           seconds=float(np.median(times)), peak_bytes=peak)
    except MemoryError:
        return BenchRecord(n=n, n_p=n_p, variant=variant, seconds=0.0,
                           peak_bytes=0, oom=True)


def write_bench_jsonl(records, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


# ---------------------------------------------------------------------------
# dumps (plot-ready CSV; rendering is out of scope)


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def dump_proximity(config: ModelConfig, params: ModelParams, graph: Graph,
                   step: int, sample: int, seed: int, out_dir: str) -> list[str]:
    """Write the adaptation-phase relation matrices at a recursive step.

    E_np and E_pn^T are restricted to `sample` uniformly drawn graph nodes
    and reordered so row/column sums are non-increasing.
    """
    if step < 1 or step > config.L:
        raise ValueError(f"step {step} outside 1..{config.L}")
    _, traj = forward(graph, params, config, mode="eval", keep_trajectory=True)
    state = traj[step - 1]
    layer = params.layers[0] if config.share_layers else params.layers[step - 1]
    with ad.no_grad():
        _, _, edges = glob_mp(state.Q, state.M_n, state.R, layer.adapt,
                              measurement=config.measurement, return_edges=True)
    rng = Rng(seed)
    sample = min(sample, graph.n)
    picked = np.sort(rng.generator.choice(graph.n, size=sample, replace=False))
    paths = []
    for name, mat in (("enp", edges["np"].data[:, picked]),
                      ("epn_t", edges["pn"].data[picked, :].T)):
        row_order = np.argsort(-mat.sum(axis=1), kind="mergesort")
        col_order = np.argsort(-mat.sum(axis=0), kind="mergesort")
        sub = mat[np.ix_(row_order, col_order)]
        header = ["pseudo_id"] + [str(int(picked[c])) for c in col_order]
        rows = ([str(int(row_order[i]))] + [_fmt(v) for v in sub[i]]
                for i in range(sub.shape[0]))
        path = f"{out_dir}/proximity_step{step}_{name}.csv"
        _write_csv(path, header, rows)
        paths.append(path)
    return paths


def dump_states(config: ModelConfig, params: ModelParams, graph: Graph,
                out_dir: str) -> list[str]:
    """Per-step CSVs of all embedded states (graph, pseudo, class nodes)."""
    _, traj = forward(graph, params, config, mode="eval", keep_trajectory=True)
    q = config.q
    paths = []
    for l, state in enumerate(traj):
        path = f"{out_dir}/states_step{l}.csv"
        header = ["type", "label", "id"] + [f"c{i}" for i in range(q)]

        def rows(state=state):
            y = graph.y if graph.y is not None and graph.y.shape[0] == graph.n else None
            for v in range(graph.n):
                label = str(int(y[v])) if y is not None else "-1"
                yield ["graph", label, str(v)] + [_fmt(x) for x in state.Q.data[v]]
            for p in range(state.R.rows):
                yield ["pseudo", "-1", str(p)] + [_fmt(x) for x in state.R.data[p]]
            for c in range(config.n_c):
                yield ["class", str(c), str(c)] + [_fmt(x) for x in params.class_nodes.data[c]]

        _write_csv(path, header, rows())
        paths.append(path)
    return paths


def load_states_csv(path: str) -> tuple[list[str], np.ndarray]:
    """Reload a states CSV; returns (type column, coordinate matrix)."""
    types, coords = [], []
    with open(path, "r", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            parts = line.rstrip("\n").split(",")
            types.append(parts[0])
            coords.append([float(v) for v in parts[3:]])
    return types, np.array(coords)
