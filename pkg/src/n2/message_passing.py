"""Global and local message-passing kernels.

Global message passing runs in three phases over the state space:

  diffuse   G      = E_np @ M_n          E_np[i,j] = psi(R_i, Q_j)
  refine    G_hat  = E_pp @ G            E_pp[i,j] = psi(R_i, R_j)
            dR     = NL(G_hat),  M_p = NL(G_hat)   (separate weights)
  collect   M_glob = E_pn @ M_p          E_pn[i,j] = psi(Q_i, (R + dR)_j)

so graph nodes exchange information through the n_p pseudo nodes without
ever materializing an n x n relation; the largest intermediates are
n_p x n. The collect phase measures against the displaced pseudo states.

`uniform_glob_mp` swaps the measured pseudo<->graph weights for constant
1/n and 1/n_p pathways (the classic virtual-node pattern) while keeping
the pseudo<->pseudo refinement, isolating pathway shape as the only
difference. `glob_mp_oracle` recomputes everything with explicit index
loops and is the reference the kernels are tested against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Segments, ShapeError, Tensor
from .graphs import Graph
from .proximity import NLParams, ProximityParams, attention_scores, proximity_matrix


@dataclass
class GlobMPParams:
    prox_np: ProximityParams
    prox_pp: ProximityParams
    prox_pn: ProximityParams
    nl_deltaR: NLParams         # d_msg -> q
    nl_mp: NLParams             # d_msg -> d_out

    def leaves(self, prefix: str):
        out = []
        out.extend(self.prox_np.leaves(f"{prefix}.np"))
        out.extend(self.prox_pp.leaves(f"{prefix}.pp"))
        out.extend(self.prox_pn.leaves(f"{prefix}.pn"))
        out.extend(self.nl_deltaR.leaves(f"{prefix}.deltaR"))
        out.extend(self.nl_mp.leaves(f"{prefix}.mp"))
        return out


@dataclass
class LocalMPParams:
    nl_edge: NLParams           # (d_loc + d_e) -> d_loc

    def leaves(self, prefix: str):
        return self.nl_edge.leaves(f"{prefix}.edge")


def _check_finite(t: Tensor, phase: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(phase, t.id)


# ---------------------------------------------------------------------------
# single-graph global MP


def glob_mp(Q: Tensor, M_n: Tensor, R: Tensor, params: GlobMPParams,
            measurement: str = "proximity", return_edges: bool = False):
    """One global pass; returns (M_glob: n x d_out, deltaR: n_p x q).

    Collect always uses the displaced pseudo states R + deltaR. The diffuse
    contraction over graph nodes runs in content-canonical order and all
    node-row products reduce per-row, so node relabeling permutes outputs
    bit-identically.
    """
    if Q.cols != R.cols:
        raise ShapeError("glob_mp states", Q.shape, R.shape)
    if M_n.rows != Q.rows:
        raise ShapeError("glob_mp messages", M_n.shape, Q.shape)
    if measurement == "proximity":
        e_np = proximity_matrix(R, Q, params.prox_np)
        e_pp = proximity_matrix(R, R, params.prox_pp)
    elif measurement == "attention":
        e_np = attention_scores(R, Q, params.prox_np)
        e_pp = attention_scores(R, R, params.prox_pp)
    else:
        raise ValueError(f"unknown measurement {measurement!r}")
    _check_finite(e_np, "diffuse")
    G = ad.cmatmul(e_np, M_n)
    _check_finite(G, "diffuse")

    G_hat = ad.matmul(e_pp, G)
    deltaR = params.nl_deltaR.apply(G_hat)
    M_p = params.nl_mp.apply(G_hat)
    _check_finite(G_hat, "refine")
    _check_finite(deltaR, "refine")

    R_disp = ad.add(R, deltaR)
    if measurement == "proximity":
        e_pn = proximity_matrix(Q, R_disp, params.prox_pn, stable_rows=True)
    else:
        e_pn = attention_scores(Q, R_disp, params.prox_pn)
    M_glob = ad.matmul(e_pn, M_p, row_stable=True)
    _check_finite(M_glob, "collect")

    if return_edges:
        return M_glob, deltaR, {"np": e_np, "pp": e_pp, "pn": e_pn}
    return M_glob, deltaR


def uniform_glob_mp(Q: Tensor, M_n: Tensor, R: Tensor, params: GlobMPParams,
                    measurement: str = "proximity", return_edges: bool = False):
    """Same pipeline with constant 1/n and 1/n_p pseudo<->graph pathways."""
    if Q.cols != R.cols:
        raise ShapeError("uniform_glob_mp states", Q.shape, R.shape)
    if M_n.rows != Q.rows:
        raise ShapeError("uniform_glob_mp messages", M_n.shape, Q.shape)
    n, n_p = Q.rows, R.rows
    G = ad.uniform_mm(M_n, n_p, canonical=True)
    _check_finite(G, "diffuse")
    if measurement == "proximity":
        e_pp = proximity_matrix(R, R, params.prox_pp)
    else:
        e_pp = attention_scores(R, R, params.prox_pp)
    G_hat = ad.matmul(e_pp, G)
    deltaR = params.nl_deltaR.apply(G_hat)
    M_p = params.nl_mp.apply(G_hat)
    _check_finite(G_hat, "refine")
    M_glob = ad.uniform_mm(M_p, n, canonical=False)
    _check_finite(M_glob, "collect")
    if return_edges:
        edges = {
            "np": Tensor(np.full((n_p, n), 1.0 / n)),
            "pp": e_pp,
            "pn": Tensor(np.full((n, n_p), 1.0 / n_p)),
        }
        return M_glob, deltaR, edges
    return M_glob, deltaR


# ---------------------------------------------------------------------------
# batched (block-diagonal) global MP; one pseudo-node block per graph


def glob_mp_batched(Q: Tensor, M_n: Tensor, R: Tensor, params: GlobMPParams,
                    seg_nodes: Segments, seg_pseudo: Segments,
                    measurement: str = "proximity", connection: str = "dynamic"):
    """Per-graph glob_mp over stacked blocks, without cross-graph pathways."""
    def psi_mm(prox: ProximityParams, a: Tensor, b: Tensor, m: Tensor,
               sa: Segments, sb: Segments) -> Tensor:
        if measurement == "attention":
            aq = ad.matmul(a, prox.pieces[0].w)
            bk = ad.matmul(b, prox.pieces[min(1, prox.k - 1)].w)
            return ad.seg_attention_mm(aq, bk, m, sa, sb, 1.0 / np.sqrt(prox.q_in))
        a_pieces = [prox.pieces[t].apply(a) for t in range(prox.k)]
        b_pieces = a_pieces if b is a else [prox.pieces[t].apply(b) for t in range(prox.k)]
        return ad.seg_psi_mm(a_pieces, b_pieces, prox.lambdas, m, sa, sb)

    if connection == "uniform":
        G = ad.seg_uniform_mm(M_n, seg_nodes, seg_pseudo)
    else:
        G = psi_mm(params.prox_np, R, Q, M_n, seg_pseudo, seg_nodes)
    _check_finite(G, "diffuse")
    G_hat = psi_mm(params.prox_pp, R, R, G, seg_pseudo, seg_pseudo)
    deltaR = params.nl_deltaR.apply(G_hat)
    M_p = params.nl_mp.apply(G_hat)
    _check_finite(G_hat, "refine")
    R_disp = ad.add(R, deltaR)
    if connection == "uniform":
        M_glob = ad.seg_uniform_mm(M_p, seg_pseudo, seg_nodes)
    else:
        M_glob = psi_mm(params.prox_pn, Q, R_disp, M_p, seg_nodes, seg_pseudo)
    _check_finite(M_glob, "collect")
    return M_glob, deltaR


# ---------------------------------------------------------------------------
# local MP


def local_mp(M: Tensor, graph: Graph, params: LocalMPParams) -> Tensor:
    """Mean over self plus transformed in-neighbor messages (with edge
    features concatenated when present)."""
    if M.rows != graph.n:
        raise ShapeError("local_mp", M.shape, (graph.n,))
    d_loc = M.cols
    if params.nl_edge.w.shape != (d_loc + graph.d_e, d_loc):
        raise ShapeError("local_mp edge NL", params.nl_edge.w.shape,
                         (d_loc + graph.d_e, d_loc))
    inv = 1.0 / (1.0 + graph.degrees().astype(np.float64))
    if graph.m == 0:
        return ad.scale(M, 1.0)  # every node only averages itself: deg 0
    src = graph.edges[:, 0]
    dst = graph.edges[:, 1]
    msgs = ad.gather_rows(M, src)
    if graph.d_e:
        msgs = ad.concat_cols(msgs, Tensor(graph.edge_feats))
    transformed = params.nl_edge.apply(msgs)
    out = ad.scatter_mean_self(transformed, dst, M, inv)
    _check_finite(out, "local")
    return out


# ---------------------------------------------------------------------------
# loop oracles (no matrix ops; reference semantics for the kernels above)


def _nl_scalar(x: np.ndarray, w: np.ndarray, b: np.ndarray, slope: float) -> np.ndarray:
    rows, cols = x.shape[0], w.shape[1]
    out = np.empty((rows, cols))
    for i in range(rows):
        for j in range(cols):
            s = b[0, j]
            for l in range(x.shape[1]):
                s += x[i, l] * w[l, j]
            out[i, j] = s if s >= 0 else slope * s
    return out


def _psi_scalar(a: np.ndarray, b: np.ndarray, prox: ProximityParams) -> np.ndarray:
    pieces_a = [_nl_scalar(a, p.w.data, p.b.data, p.slope) for p in prox.pieces]
    pieces_b = [_nl_scalar(b, p.w.data, p.b.data, p.slope) for p in prox.pieces]
    lam = [l.data[0, 0] for l in prox.lambdas]
    out = np.zeros((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            s = 0.0
            for t in range(prox.k):
                dot = 0.0
                for l in range(pieces_a[t].shape[1]):
                    dot += pieces_a[t][i, l] * pieces_b[t][j, l]
                s += lam[t] * dot
            out[i, j] = s
    return out


def glob_mp_oracle(Q: Tensor, M_n: Tensor, R: Tensor, params: GlobMPParams):
    """Explicit-sum evaluation of the three phases; same contract as glob_mp."""
    q, m, r = Q.data, M_n.data, R.data
    n, n_p = q.shape[0], r.shape[0]
    d = m.shape[1]

    e_np = _psi_scalar(r, q, params.prox_np)
    G = np.zeros((n_p, d))
    for i in range(n_p):
        for c in range(d):
            for j in range(n):
                G[i, c] += e_np[i, j] * m[j, c]

    e_pp = _psi_scalar(r, r, params.prox_pp)
    G_hat = np.zeros((n_p, d))
    for i in range(n_p):
        for c in range(d):
            for j in range(n_p):
                G_hat[i, c] += e_pp[i, j] * G[j, c]

    dR = _nl_scalar(G_hat, params.nl_deltaR.w.data, params.nl_deltaR.b.data,
                    params.nl_deltaR.slope)
    M_p = _nl_scalar(G_hat, params.nl_mp.w.data, params.nl_mp.b.data,
                     params.nl_mp.slope)

    e_pn = _psi_scalar(q, r + dR, params.prox_pn)
    d_out = M_p.shape[1]
    M_glob = np.zeros((n, d_out))
    for i in range(n):
        for c in range(d_out):
            for j in range(n_p):
                M_glob[i, c] += e_pn[i, j] * M_p[j, c]
    return Tensor(M_glob), Tensor(dR)


def local_mp_oracle(M: Tensor, graph: Graph, params: LocalMPParams) -> Tensor:
    m = M.data
    nl = params.nl_edge
    out = np.zeros_like(m)
    for v in range(graph.n):
        acc = m[v].copy()
        count = 1
        for e in range(graph.m):
            if graph.edges[e, 1] != v:
                continue
            u = graph.edges[e, 0]
            row = m[u]
            if graph.d_e:
                row = np.concatenate([row, graph.edge_feats[e]])
            acc = acc + _nl_scalar(row[None, :], nl.w.data, nl.b.data, nl.slope)[0]
            count += 1
        out[v] = acc / count
    return Tensor(out)
