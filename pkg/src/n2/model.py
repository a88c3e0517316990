"""The full network: input embedding, the shared recurrent layer
(pseudo-node adaptation + dynamic message passing), and class-node heads.

One recursive step moves every embedded node in the state space:

  adapt     query messages and displaced pseudo states from a global pass
            over the previous step's messages
  local     neighbors exchange (own messages | query messages | states),
            which displaces graph nodes
  global    a second global pass over the fresh local messages displaces
            everything again and accumulates node messages

Logits are proximities to learnable class-node states: rows of Q for node
tasks, an NL + mean readout of R for graph tasks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Segments, ShapeError, Tensor
from .graphs import BatchedGraph, Graph
from .message_passing import (GlobMPParams, LocalMPParams, glob_mp,
                              glob_mp_batched, local_mp, uniform_glob_mp)
from .proximity import (NLParams, ProximityParams, init_nl, init_proximity,
                        proximity_matrix)

CONNECTIONS = ("dynamic", "uniform")
MEASUREMENTS = ("proximity", "attention")


@dataclass
class ModelConfig:
    L: int = 4                  # recursive steps (0 = embedding only)
    d: int = 64                 # hidden (message) dim
    q: int = 32                 # state-space dim
    k: int = 8                  # proximity pieces
    n_p: int = 8                # pseudo nodes
    dropout: float = 0.0        # drop rate on the two state-update NLs
    n_c: int = 2                # class nodes
    d_in: int = 1
    d_e: int = 0
    share_layers: bool = True
    connection: str = "dynamic"
    measurement: str = "proximity"

    def __post_init__(self):
        if min(self.d, self.q, self.k, self.n_p, self.n_c, self.d_in) < 1:
            raise ValueError("all dims/counts must be >= 1")
        if self.L < 0 or self.d_e < 0:
            raise ValueError("L and d_e must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} not in [0, 1)")
        if self.connection not in CONNECTIONS:
            raise ValueError(f"connection {self.connection!r}")
        if self.measurement not in MEASUREMENTS:
            raise ValueError(f"measurement {self.measurement!r}")

    @property
    def d_loc(self) -> int:
        return 2 * self.d + self.q


@dataclass
class LayerParams:
    """One recurrent block; reused across steps when layers are shared."""
    adapt: GlobMPParams         # d_msg = d,        d_out = d
    local: LocalMPParams        # (2d + q + d_e) -> 2d + q
    dyn: GlobMPParams           # d_msg = 2d + q,   d_out = d
    nl_q_local: NLParams        # 2d + q -> q
    nl_q_glob: NLParams         # d -> q

    def leaves(self, prefix: str):
        out = []
        out.extend(self.adapt.leaves(f"{prefix}.adapt"))
        out.extend(self.local.leaves(f"{prefix}.local"))
        out.extend(self.dyn.leaves(f"{prefix}.dyn"))
        out.extend(self.nl_q_local.leaves(f"{prefix}.q_local"))
        out.extend(self.nl_q_glob.leaves(f"{prefix}.q_glob"))
        return out


@dataclass
class ModelParams:
    input_proj: NLParams        # d_in -> d, slope 1 (plain linear)
    f_embed: NLParams           # d -> q
    r_init: Tensor              # n_p x q
    layers: list[LayerParams]
    readout: NLParams           # q -> q
    class_nodes: Tensor         # n_c x q
    prox_out: ProximityParams

    def leaves(self) -> list[tuple[str, Tensor, bool]]:
        """(name, tensor, weight-decay flag) in a fixed order."""
        out = []
        out.extend(self.input_proj.leaves("input"))
        out.extend(self.f_embed.leaves("embed"))
        out.append(("r_init", self.r_init, True))
        for i, layer in enumerate(self.layers):
            out.extend(layer.leaves(f"layer{i}"))
        out.extend(self.readout.leaves("readout"))
        out.append(("class_nodes", self.class_nodes, True))
        out.extend(self.prox_out.leaves("out"))
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t, _ in self.leaves()]

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors())


@dataclass
class RecursionState:
    Q: Tensor                   # n x q
    R: Tensor                   # (B*)n_p x q
    M_n: Tensor                 # n x d
    step: int = 0


def init_pseudo(n_p: int, q: int, rng: Rng) -> Tensor:
    """Random positions in the state space, i.i.d. normal(0, 1/sqrt(q))."""
    if n_p < 1 or q < 1:
        raise ValueError("n_p and q must be >= 1")
    return rng.normal(n_p, q, std=1.0 / np.sqrt(q))


def _init_glob(q: int, d_msg: int, d_out: int, k: int, rng: Rng) -> GlobMPParams:
    return GlobMPParams(
        prox_np=init_proximity(q, k, rng.child(0)),
        prox_pp=init_proximity(q, k, rng.child(1)),
        prox_pn=init_proximity(q, k, rng.child(2)),
        nl_deltaR=init_nl(d_msg, q, rng.child(3)),
        nl_mp=init_nl(d_msg, d_out, rng.child(4)),
    )


def init_model(config: ModelConfig, rng: Rng) -> ModelParams:
    c = config
    n_layers = 1 if c.share_layers else max(c.L, 1)
    layers = []
    for i in range(n_layers):
        lr = rng.child(10 + i)
        layers.append(LayerParams(
            adapt=_init_glob(c.q, c.d, c.d, c.k, lr.child(0)),
            local=LocalMPParams(init_nl(c.d_loc + c.d_e, c.d_loc, lr.child(1))),
            dyn=_init_glob(c.q, c.d_loc, c.d, c.k, lr.child(2)),
            nl_q_local=init_nl(c.d_loc, c.q, lr.child(3)),
            nl_q_glob=init_nl(c.d, c.q, lr.child(4)),
        ))
    input_proj = init_nl(c.d_in, c.d, rng.child(0), slope=1.0)
    return ModelParams(
        input_proj=input_proj,
        f_embed=init_nl(c.d, c.q, rng.child(1)),
        r_init=init_pseudo(c.n_p, c.q, rng.child(2)),
        layers=layers,
        readout=init_nl(c.q, c.q, rng.child(3)),
        class_nodes=rng.child(4).normal(c.n_c, c.q, std=1.0 / np.sqrt(c.q)),
        prox_out=init_proximity(c.q, c.k, rng.child(5)),
    )


def _segments(graph: Graph, n_p: int) -> tuple[Segments, Segments] | None:
    if isinstance(graph, BatchedGraph):
        return (Segments(graph.node_counts),
                Segments([n_p] * graph.num_graphs))
    return None


def embed_inputs(graph: Graph, params: ModelParams, rng: Rng | None = None) -> RecursionState:
    """Project features to messages and states; pseudo nodes start at their
    learned positions (one copy per graph in a batch)."""
    if graph.d_in != params.input_proj.w.rows:
        raise ShapeError("embed_inputs", (graph.n, graph.d_in), params.input_proj.w.shape)
    X = Tensor(graph.x)
    X1 = params.input_proj.apply(X, row_stable=True)
    Q0 = params.f_embed.apply(X1, row_stable=True)
    if isinstance(graph, BatchedGraph):
        R0 = ad.tile_rows(params.r_init, graph.num_graphs)
    else:
        R0 = params.r_init
    return RecursionState(Q=Q0, R=R0, M_n=X1, step=0)


def adapt_pseudo(state: RecursionState, layer: LayerParams, config: ModelConfig,
                 graph: Graph):
    """Global pass that queries the graph and shifts the pseudo nodes."""
    segs = _segments(graph, config.n_p)
    if segs is not None:
        M_hat, dR = glob_mp_batched(state.Q, state.M_n, state.R, layer.adapt,
                                    segs[0], segs[1],
                                    measurement=config.measurement,
                                    connection=config.connection)
    elif config.connection == "uniform":
        M_hat, dR = uniform_glob_mp(state.Q, state.M_n, state.R, layer.adapt,
                                    measurement=config.measurement)
    else:
        M_hat, dR = glob_mp(state.Q, state.M_n, state.R, layer.adapt,
                            measurement=config.measurement)
    return M_hat, ad.add(state.R, dR)


def recurrent_step(state: RecursionState, graph: Graph, layer: LayerParams,
                   config: ModelConfig, mode: str = "eval",
                   rng: Rng | None = None) -> RecursionState:
    """One application of the recurrent layer (adaptation, local, global)."""
    M_hat, R_hat = adapt_pseudo(state, layer, config, graph)

    cat = ad.concat_cols(state.M_n, M_hat, state.Q)
    M_local = local_mp(cat, graph, layer.local)
    dq_local = layer.nl_q_local.apply(M_local, row_stable=True)
    if mode == "train" and config.dropout > 0.0:
        dq_local = ad.dropout(dq_local, 1.0 - config.dropout, rng)
    Q_hat = ad.add(state.Q, dq_local)

    segs = _segments(graph, config.n_p)
    if segs is not None:
        M_glob, dR = glob_mp_batched(Q_hat, M_local, R_hat, layer.dyn,
                                     segs[0], segs[1],
                                     measurement=config.measurement,
                                     connection=config.connection)
    elif config.connection == "uniform":
        M_glob, dR = uniform_glob_mp(Q_hat, M_local, R_hat, layer.dyn,
                                     measurement=config.measurement)
    else:
        M_glob, dR = glob_mp(Q_hat, M_local, R_hat, layer.dyn,
                             measurement=config.measurement)
    dq_glob = layer.nl_q_glob.apply(M_glob, row_stable=True)
    if mode == "train" and config.dropout > 0.0:
        dq_glob = ad.dropout(dq_glob, 1.0 - config.dropout, rng)
    return RecursionState(
        Q=ad.add(Q_hat, dq_glob),
        R=ad.add(R_hat, dR),
        M_n=ad.add(state.M_n, M_glob),
        step=state.step + 1,
    )


def forward(graph: Graph, params: ModelParams, config: ModelConfig,
            mode: str = "eval", rng: Rng | None = None,
            keep_trajectory: bool = False, n_steps: int | None = None):
    """Embed then apply the recurrent layer n_steps (default L) times.

    Returns (final state, trajectory); the trajectory holds every state
    including step 0 when requested, else just the final one.
    """
    steps = config.L if n_steps is None else n_steps
    state = embed_inputs(graph, params, rng)
    trajectory = [state] if keep_trajectory else []
    for l in range(steps):
        layer = params.layers[0] if config.share_layers else params.layers[min(l, len(params.layers) - 1)]
        state = recurrent_step(state, graph, layer, config, mode=mode, rng=rng)
        if keep_trajectory:
            trajectory.append(state)
    if not keep_trajectory:
        trajectory = [state]
    return state, trajectory


def node_logits(Q_L: Tensor, params: ModelParams) -> Tensor:
    """Proximity of every graph-node state to each class node."""
    return proximity_matrix(Q_L, params.class_nodes, params.prox_out,
                            stable_rows=True)


def graph_logits(R_L: Tensor, params: ModelParams, segs: Segments | None = None) -> Tensor:
    """NL + mean readout of the pseudo states, then proximity to classes.

    With `segs`, one logits row per block (batched graphs)."""
    transformed = params.readout.apply(R_L)
    pooled = ad.seg_row_mean(transformed, segs) if segs is not None else ad.row_mean(transformed)
    return proximity_matrix(pooled, params.class_nodes, params.prox_out)


def logits_for(graph: Graph, state: RecursionState, params: ModelParams,
               config: ModelConfig, task: str) -> Tensor:
    if task == "graph-class" or (task == "multilabel" and graph.y is not None
                                 and graph.y.shape[0] != graph.n):
        segs = None
        if isinstance(graph, BatchedGraph):
            segs = Segments([config.n_p] * graph.num_graphs)
        return graph_logits(state.R, params, segs)
    return node_logits(state.Q, params)


# ---------------------------------------------------------------------------
# checkpoint io: versioned binary blob (JSON header + raw f64 buffers)

_MAGIC = b"N2CK"
_VERSION = 1


def save_checkpoint(path: str, config: ModelConfig, params: ModelParams) -> None:
    leaves = params.leaves()
    header = {
        "version": _VERSION,
        "config": asdict(config),
        "tensors": [{"name": n, "rows": t.rows, "cols": t.cols} for n, t, _ in leaves],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for _, t, _ in leaves:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[ModelConfig, ModelParams]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = ModelConfig(**header["config"])
        params = init_model(config, Rng(0))
        leaves = params.leaves()
        if len(leaves) != len(header["tensors"]):
            raise ValueError(f"{path}: tensor count mismatch")
        for (name, t, _), meta in zip(leaves, header["tensors"]):
            if meta["name"] != name or (meta["rows"], meta["cols"]) != t.shape:
                raise ValueError(
                    f"{path}: shape mismatch for {meta['name']}: "
                    f"stored {(meta['rows'], meta['cols'])}, expected {name} {t.shape}")
            buf = fh.read(meta["rows"] * meta["cols"] * 8)
            t.data = np.frombuffer(buf, dtype="<f8").reshape(t.shape).copy()
    return config, params


def mark_trainable(params: ModelParams) -> None:
    for t in params.tensors():
        t.requires_grad = True
