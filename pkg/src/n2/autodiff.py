"""Dense 2-D float64 tensors with reverse-mode automatic differentiation.

Every value in the package is a rank-2 tensor. Ops build a dynamic tape
(parent links plus a backward closure per node); `backward` walks the tape
in reverse topological order and returns gradients for the leaves.

Bit-level reproducibility notes:
  * Products whose output rows are node-indexed go through `np.einsum`,
    which reduces each output entry independently, so relabeling input
    rows relabels output rows with identical bits. BLAS gemm does not
    guarantee this (its panel blocking depends on row position).
  * Contractions *over* a node axis (the diffuse phase) are made
    order-canonical by sorting the contraction index by a content hash
    before multiplying; both the original and any row-permuted run then
    reduce the same physical sequence.
  * Randomness comes from PCG64 seeded through SeedSequence spawn keys,
    which is platform-independent and splittable.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Rng", "ShapeError", "NonFiniteError", "no_grad",
    "tensor", "zeros", "matmul", "matmul_nt", "cmatmul", "add", "sub",
    "mul", "scale", "scalar_mul", "concat_cols", "row_mean", "sum_all",
    "transpose", "gather_rows", "tile_rows", "row_softmax", "dropout",
    "nl_apply", "uniform_mm", "scatter_mean_self", "seg_psi_mm",
    "seg_uniform_mm", "seg_attention_mm", "seg_row_mean", "cross_entropy",
    "bce_multilabel", "elementwise", "backward", "grad_check", "tape_tensors",
    "monitor_preactivations",
]


class ShapeError(ValueError):
    """Raised on dimension mismatches; carries both offending shapes."""

    def __init__(self, op: str, left: tuple, right: tuple | None = None):
        self.op = op
        self.left_shape = left
        self.right_shape = right
        if right is None:
            super().__init__(f"{op}: bad shape {left}")
        else:
            super().__init__(f"{op}: incompatible shapes {left} and {right}")


class NonFiniteError(FloatingPointError):
    """Raised when a non-finite value appears; names the producing op."""

    def __init__(self, where: str, op_id: int | None = None):
        self.where = where
        self.op_id = op_id
        tag = f" (op id {op_id})" if op_id is not None else ""
        super().__init__(f"non-finite values in {where}{tag}")


_ids = itertools.count()
_grad_enabled = [True]


@contextmanager
def no_grad():
    """Disable tape recording inside the block (eval / finite differences)."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


class Tensor:
    """A rows x cols float64 matrix, optionally recorded on the tape."""

    __slots__ = ("data", "requires_grad", "op", "parents", "_vjp", "id", "name")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 op: str = "leaf", parents: tuple = (), vjp=None,
                 name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError("tensor", arr.shape)
        self.data = arr
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._vjp = vjp
        self.id = next(_ids)
        self.name = name

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError("item", self.data.shape)
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        nm = f" {self.name!r}" if self.name else ""
        return f"Tensor{self.data.shape} op={self.op}{nm}"


def tensor(values, name: str | None = None, requires_grad: bool = False) -> Tensor:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim == 0:
        arr = arr.reshape(1, 1)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)))


def _make(data, op, parents, vjp) -> Tensor:
    if _grad_enabled[-1] and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, vjp=vjp)
    return Tensor(data, op=op)


def tape_tensors(*roots: Tensor) -> list[Tensor]:
    """All tensors reachable through parent links (for shape audits)."""
    seen: dict[int, Tensor] = {}
    stack = list(roots)
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        stack.extend(t.parents)
    return list(seen.values())


# ---------------------------------------------------------------------------
# content-canonical ordering (see module docstring)

_HASH_MIX_A = np.uint64(0x9E3779B97F4A7C15)
_HASH_MIX_B = np.uint64(0xC2B2AE3D27D4EB4F)


def _hash_weights(n: int, lane: int) -> np.ndarray:
    # fixed odd multipliers; derived from a constant-seeded stream so the
    # canonical order is identical across processes and platforms
    g = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0xC0FFEE, spawn_key=(lane,))))
    w = g.integers(1, 2 ** 62, n, dtype=np.uint64)
    return (w << np.uint64(1)) | np.uint64(1)


def _content_order(row_blocks: Sequence[np.ndarray], col_blocks: Sequence[np.ndarray]) -> np.ndarray:
    """Permutation of the shared axis sorted by a 128-bit content hash.

    `row_blocks` contribute their rows, `col_blocks` their columns. Ties can
    only occur for identical content (up to a ~2^-128 hash collision), for
    which any order yields the same sums.
    """
    n = row_blocks[0].shape[0] if row_blocks else col_blocks[0].shape[1]
    k1 = np.full(n, _HASH_MIX_A)
    k2 = np.full(n, _HASH_MIX_B)
    lane = 0
    for blk in row_blocks:
        u = blk.view(np.uint64)
        w1 = _hash_weights(u.shape[1], lane)
        w2 = _hash_weights(u.shape[1], lane + 1)
        k1 = (k1 * _HASH_MIX_B) ^ (u @ w1)
        k2 = (k2 * _HASH_MIX_A) ^ (u @ w2)
        lane += 2
    for blk in col_blocks:
        u = blk.view(np.uint64)
        w1 = _hash_weights(u.shape[0], lane)
        w2 = _hash_weights(u.shape[0], lane + 1)
        k1 = (k1 * _HASH_MIX_B) ^ np.einsum("pn,p->n", u, w1)
        k2 = (k2 * _HASH_MIX_A) ^ np.einsum("pn,p->n", u, w2)
        lane += 2
    return np.lexsort((k2, k1))


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Tensor, b: Tensor, row_stable: bool = False) -> Tensor:
    """Matrix product a @ b.

    `row_stable=True` computes each output row independently (einsum), so
    jointly permuting rows of `a` permutes output rows bit-identically.
    """
    if a.cols != b.rows:
        raise ShapeError("matmul", a.shape, b.shape)
    if row_stable:
        out = np.einsum("ij,jk->ik", a.data, b.data)
    else:
        out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, "matmul", (a, b), vjp)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T with per-entry reduction; stable under row permutations of
    either side (rows of `a` index output rows, rows of `b` output cols)."""
    if a.cols != b.cols:
        raise ShapeError("matmul_nt", a.shape, b.shape)
    out = np.einsum("iq,jq->ij", a.data, b.data)

    def vjp(g):
        return g @ b.data, g.T @ a.data

    return _make(out, "matmul_nt", (a, b), vjp)


def cmatmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b with the contraction axis reduced in content-canonical order.

    Used where the summed-over axis is node-indexed: any relabeling of that
    axis reorders to the same physical sequence, so the result is
    bit-identical under node permutations.
    """
    if a.cols != b.rows:
        raise ShapeError("cmatmul", a.shape, b.shape)
    order = _content_order([b.data], [a.data])
    out = a.data[:, order] @ b.data[order]

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, "cmatmul", (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)

    def vjp(g):
        return g, g

    return _make(a.data + b.data, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)

    def vjp(g):
        return g, -g

    return _make(a.data - b.data, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)

    def vjp(g):
        return g * b.data, g * a.data

    return _make(a.data * b.data, "mul", (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _make(x.data * c, "scale", (x,), vjp)


def scalar_mul(s: Tensor, x: Tensor) -> Tensor:
    """(1x1 tensor) * matrix, with gradient for the scalar."""
    if s.shape != (1, 1):
        raise ShapeError("scalar_mul", s.shape, x.shape)
    sval = s.data[0, 0]

    def vjp(g):
        return np.array([[np.sum(g * x.data)]]), g * sval

    return _make(x.data * sval, "scalar_mul", (s, x), vjp)


def concat_cols(*xs: Tensor) -> Tensor:
    rows = xs[0].rows
    for x in xs[1:]:
        if x.rows != rows:
            raise ShapeError("concat_cols", xs[0].shape, x.shape)
    widths = [x.cols for x in xs]
    out = np.concatenate([x.data for x in xs], axis=1)

    def vjp(g):
        parts, at = [], 0
        for w in widths:
            parts.append(np.ascontiguousarray(g[:, at:at + w]))
            at += w
        return tuple(parts)

    return _make(out, "concat_cols", xs, vjp)


def row_mean(x: Tensor) -> Tensor:
    """Mean over rows -> 1 x cols."""
    n = x.rows
    out = x.data.mean(axis=0, keepdims=True)

    def vjp(g):
        return (np.repeat(g / n, n, axis=0),)

    return _make(out, "row_mean", (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    out = np.array([[x.data.sum()]])

    def vjp(g):
        return (np.full_like(x.data, g[0, 0]),)

    return _make(out, "sum_all", (x,), vjp)


def transpose(x: Tensor) -> Tensor:
    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return _make(np.ascontiguousarray(x.data.T), "transpose", (x,), vjp)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.rows):
        raise ShapeError("gather_rows", x.shape, (int(idx.min()), int(idx.max())))
    out = x.data[idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, "gather_rows", (x,), vjp)


def tile_rows(x: Tensor, times: int) -> Tensor:
    """Stack `times` copies of x along rows (per-graph pseudo-node blocks)."""
    out = np.tile(x.data, (times, 1))
    r = x.rows

    def vjp(g):
        return (g.reshape(times, r, x.cols).sum(axis=0),)

    return _make(out, "tile_rows", (x,), vjp)


def row_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = np.sum(g * p, axis=1, keepdims=True)
        return (p * (g - dot),)

    return _make(p, "row_softmax", (x,), vjp)


def dropout(x: Tensor, p_keep: float, rng: "Rng") -> Tensor:
    """Inverted dropout: kept entries scaled by 1/p_keep."""
    if not 0.0 < p_keep <= 1.0:
        raise ValueError(f"dropout keep probability {p_keep} not in (0, 1]")
    if p_keep == 1.0:
        def vjp_id(g):
            return (g,)
        return _make(x.data.copy(), "dropout", (x,), vjp_id)
    mask = (rng.generator.random(x.shape) < p_keep) / p_keep

    def vjp(g):
        return (g * mask,)

    return _make(x.data * mask, "dropout", (x,), vjp)


_pre_monitor: list[list[float]] = []


@contextmanager
def monitor_preactivations():
    """Collect min |pre-activation| of every nl_apply in the block.

    Gradient checks of a piecewise-linear net are only meaningful at points
    where no unit sits on its kink; this reports the margin."""
    sink: list[float] = []
    _pre_monitor.append(sink)
    try:
        yield sink
    finally:
        _pre_monitor.pop()


def nl_apply(x: Tensor, w: Tensor, b: Tensor, slope: float = 0.01,
             row_stable: bool = False) -> Tensor:
    """LeakyReLU(x @ w + b) with negative slope `slope`; b is 1 x w.cols."""
    if x.cols != w.rows:
        raise ShapeError("nl_apply", x.shape, w.shape)
    if b.shape != (1, w.cols):
        raise ShapeError("nl_apply bias", b.shape, w.shape)
    if row_stable:
        pre = np.einsum("ij,jk->ik", x.data, w.data)
    else:
        pre = x.data @ w.data
    pre += b.data
    if _pre_monitor and slope != 1.0 and pre.size:
        _pre_monitor[-1].append(float(np.min(np.abs(pre))))
    neg = pre < 0
    out = np.where(neg, pre * slope, pre)

    def vjp(g):
        gpre = np.where(neg, g * slope, g)
        return gpre @ w.data.T, x.data.T @ gpre, gpre.sum(axis=0, keepdims=True)

    return _make(out, "nl_apply", (x, w, b), vjp)


def uniform_mm(m: Tensor, out_rows: int, canonical: bool = False) -> Tensor:
    """Rows-mean of m broadcast to `out_rows` rows (uniform-pathway product).

    `canonical=True` sums rows in content-sorted order so the mean is
    bit-identical under row permutations of m.
    """
    n = m.rows
    if canonical:
        order = _content_order([m.data], [])
        mean = np.add.reduce(m.data[order], axis=0) / n
    else:
        mean = np.add.reduce(m.data, axis=0) / n
    out = np.tile(mean, (out_rows, 1))

    def vjp(g):
        return (np.tile(g.sum(axis=0, keepdims=True) / n, (n, 1)),)

    return _make(out, "uniform_mm", (m,), vjp)


def scatter_mean_self(t_edges: Tensor, dst: np.ndarray, base: Tensor,
                      inv_counts: np.ndarray) -> Tensor:
    """(base + sum of edge rows into their dst row) * inv_counts per row.

    Accumulation follows edge-list order, which node relabeling preserves.
    """
    if t_edges.cols != base.cols:
        raise ShapeError("scatter_mean_self", t_edges.shape, base.shape)
    acc = base.data.copy()
    np.add.at(acc, dst, t_edges.data)
    out = acc * inv_counts[:, None]

    def vjp(g):
        gacc = g * inv_counts[:, None]
        return gacc[dst], gacc

    return _make(out, "scatter_mean_self", (t_edges, base), vjp)


# ---------------------------------------------------------------------------
# fused segment ops for block-diagonal graph batches


class Segments:
    """Block sizes along an axis, with cached offsets and an equal-size flag."""

    __slots__ = ("sizes", "offsets", "equal", "total")

    def __init__(self, sizes: Iterable[int]):
        self.sizes = np.asarray(list(sizes), dtype=np.intp)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.total = int(self.offsets[-1])
        self.equal = bool(self.sizes.size) and int(self.sizes.min()) == int(self.sizes.max())

    def __len__(self) -> int:
        return len(self.sizes)


def seg_psi_mm(a_pieces: Sequence[Tensor], b_pieces: Sequence[Tensor],
               lambdas: Sequence[Tensor], m: Tensor,
               seg_a: Segments, seg_b: Segments) -> Tensor:
    """Per-block (sum_t lam_t A_t B_t^T) @ M for stacked row blocks.

    A_t blocks are seg_a rows, B_t and M blocks seg_b rows; output has seg_a
    rows. One tape node; equal-size blocks use batched 3-D products.
    """
    k = len(a_pieces)
    lam = np.array([l.data[0, 0] for l in lambdas])
    A = [t.data for t in a_pieces]
    B = [t.data for t in b_pieces]
    M = m.data
    nb = len(seg_a)
    d = M.shape[1]

    if seg_a.equal and seg_b.equal:
        sa, sb = int(seg_a.sizes[0]), int(seg_b.sizes[0])
        q = A[0].shape[1]
        A3 = [a.reshape(nb, sa, q) for a in A]
        B3 = [b.reshape(nb, sb, q) for b in B]
        M3 = M.reshape(nb, sb, d)
        E = lam[0] * np.matmul(A3[0], B3[0].transpose(0, 2, 1))
        for t in range(1, k):
            E += lam[t] * np.matmul(A3[t], B3[t].transpose(0, 2, 1))
        out = np.matmul(E, M3).reshape(nb * sa, d)

        def vjp(g):
            G3 = g.reshape(nb, sa, d)
            dE = np.matmul(G3, M3.transpose(0, 2, 1))
            dM = np.matmul(E.transpose(0, 2, 1), G3).reshape(nb * sb, d)
            dEt = dE.transpose(0, 2, 1)
            grads = []
            dlams = []
            for t in range(k):
                pre = np.matmul(dE, B3[t])          # dL/dA_t before lam
                dlams.append(np.sum(pre * A3[t]))
                grads.append((lam[t] * pre).reshape(nb * sa, q))
            for t in range(k):
                gB = lam[t] * np.matmul(dEt, A3[t])
                grads.append(gB.reshape(nb * sb, q))
            grads.extend(np.array([[dl]]) for dl in dlams)
            grads.append(dM)
            return tuple(grads)

    else:
        out = np.empty((seg_a.total, d))
        blocks = []
        for i in range(nb):
            ra = slice(seg_a.offsets[i], seg_a.offsets[i + 1])
            rb = slice(seg_b.offsets[i], seg_b.offsets[i + 1])
            Eg = lam[0] * (A[0][ra] @ B[0][rb].T)
            for t in range(1, k):
                Eg += lam[t] * (A[t][ra] @ B[t][rb].T)
            blocks.append(Eg)
            out[ra] = Eg @ M[rb]

        def vjp(g):
            dA = [np.empty_like(A[t]) for t in range(k)]
            dB = [np.empty_like(B[t]) for t in range(k)]
            dM = np.empty_like(M)
            dlams = np.zeros(k)
            for i in range(nb):
                ra = slice(seg_a.offsets[i], seg_a.offsets[i + 1])
                rb = slice(seg_b.offsets[i], seg_b.offsets[i + 1])
                Gg = g[ra]
                Eg = blocks[i]
                dEg = Gg @ M[rb].T
                dM[rb] = Eg.T @ Gg
                for t in range(k):
                    pre = dEg @ B[t][rb]
                    dlams[t] += np.sum(pre * A[t][ra])
                    dA[t][ra] = lam[t] * pre
                    dB[t][rb] = lam[t] * (dEg.T @ A[t][ra])
            grads = list(dA) + list(dB)
            grads.extend(np.array([[dl]]) for dl in dlams)
            grads.append(dM)
            return tuple(grads)

    parents = tuple(a_pieces) + tuple(b_pieces) + tuple(lambdas) + (m,)
    return _make(out, "seg_psi_mm", parents, vjp)


def seg_uniform_mm(m: Tensor, seg_m: Segments, seg_out: Segments) -> Tensor:
    """Per-block rows-mean of m broadcast to the block's output rows."""
    d = m.cols
    nb = len(seg_m)
    if seg_m.equal and seg_out.equal:
        sm, so = int(seg_m.sizes[0]), int(seg_out.sizes[0])
        mean = m.data.reshape(nb, sm, d).mean(axis=1)
        out = np.repeat(mean, so, axis=0)

        def vjp(g):
            gsum = g.reshape(nb, so, d).sum(axis=1) / sm
            return (np.repeat(gsum, sm, axis=0),)
    else:
        out = np.empty((seg_out.total, d))
        for i in range(nb):
            rm = slice(seg_m.offsets[i], seg_m.offsets[i + 1])
            ro = slice(seg_out.offsets[i], seg_out.offsets[i + 1])
            out[ro] = m.data[rm].mean(axis=0)

        def vjp(g):
            gm = np.empty_like(m.data)
            for i in range(nb):
                rm = slice(seg_m.offsets[i], seg_m.offsets[i + 1])
                ro = slice(seg_out.offsets[i], seg_out.offsets[i + 1])
                gm[rm] = g[ro].sum(axis=0) / (rm.stop - rm.start)
            return (gm,)

    return _make(out, "seg_uniform_mm", (m,), vjp)


def seg_attention_mm(aq: Tensor, bk: Tensor, m: Tensor,
                     seg_a: Segments, seg_b: Segments, inv_sqrt_q: float) -> Tensor:
    """Per-block softmax(aq_g @ bk_g^T * inv_sqrt_q) @ m_g."""
    nb = len(seg_a)
    d = m.cols

    def softmax(z):
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    if seg_a.equal and seg_b.equal:
        sa, sb = int(seg_a.sizes[0]), int(seg_b.sizes[0])
        q = aq.cols
        A3 = aq.data.reshape(nb, sa, q)
        B3 = bk.data.reshape(nb, sb, q)
        M3 = m.data.reshape(nb, sb, d)
        S = softmax(np.matmul(A3, B3.transpose(0, 2, 1)) * inv_sqrt_q)
        out = np.matmul(S, M3).reshape(nb * sa, d)

        def vjp(g):
            G3 = g.reshape(nb, sa, d)
            dS = np.matmul(G3, M3.transpose(0, 2, 1))
            dZ = S * (dS - np.sum(dS * S, axis=-1, keepdims=True))
            dZ *= inv_sqrt_q
            dA = np.matmul(dZ, B3).reshape(nb * sa, q)
            dB = np.matmul(dZ.transpose(0, 2, 1), A3).reshape(nb * sb, q)
            dM = np.matmul(S.transpose(0, 2, 1), G3).reshape(nb * sb, d)
            return dA, dB, dM
    else:
        out = np.empty((seg_a.total, d))
        scores = []
        for i in range(nb):
            ra = slice(seg_a.offsets[i], seg_a.offsets[i + 1])
            rb = slice(seg_b.offsets[i], seg_b.offsets[i + 1])
            S = softmax(aq.data[ra] @ bk.data[rb].T * inv_sqrt_q)
            scores.append(S)
            out[ra] = S @ m.data[rb]

        def vjp(g):
            dA = np.empty_like(aq.data)
            dB = np.empty_like(bk.data)
            dM = np.empty_like(m.data)
            for i in range(nb):
                ra = slice(seg_a.offsets[i], seg_a.offsets[i + 1])
                rb = slice(seg_b.offsets[i], seg_b.offsets[i + 1])
                S = scores[i]
                dS = g[ra] @ m.data[rb].T
                dZ = S * (dS - np.sum(dS * S, axis=-1, keepdims=True)) * inv_sqrt_q
                dA[ra] = dZ @ bk.data[rb]
                dB[rb] = dZ.T @ aq.data[ra]
                dM[rb] = S.T @ g[ra]
            return dA, dB, dM

    return _make(out, "seg_attention_mm", (aq, bk, m), vjp)


def seg_row_mean(x: Tensor, segs: Segments) -> Tensor:
    """Per-block mean over rows -> one row per block."""
    nb = len(segs)
    if segs.equal:
        s = int(segs.sizes[0])
        out = x.data.reshape(nb, s, x.cols).mean(axis=1)

        def vjp(g):
            return (np.repeat(g / s, s, axis=0),)
    else:
        out = np.empty((nb, x.cols))
        for i in range(nb):
            r = slice(segs.offsets[i], segs.offsets[i + 1])
            out[i] = x.data[r].mean(axis=0)

        def vjp(g):
            gx = np.empty_like(x.data)
            for i in range(nb):
                r = slice(segs.offsets[i], segs.offsets[i + 1])
                gx[r] = g[i] / (r.stop - r.start)
            return (gx,)

    return _make(out, "seg_row_mean", (x,), vjp)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over rows of -log softmax(logits)[label], log-sum-exp stable."""
    y = np.asarray(labels, dtype=np.intp).ravel()
    n, c = logits.shape
    if y.shape[0] != n:
        raise ShapeError("cross_entropy", logits.shape, (y.shape[0],))
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    se = e.sum(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(se[:, 0])
    loss = np.array([[np.mean(lse - z[np.arange(n), y])]])

    def vjp(g):
        p = e / se
        p[np.arange(n), y] -= 1.0
        return (p * (g[0, 0] / n),)

    return _make(loss, "cross_entropy", (logits,), vjp)


def bce_multilabel(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean sigmoid binary cross-entropy over all entries, stabilized."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError("bce_multilabel", logits.shape, t.shape)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("targets must be binary")
    z = logits.data
    loss_terms = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = np.array([[loss_terms.mean()]])

    def vjp(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        return ((sig - t) * (g[0, 0] / z.size),)

    return _make(loss, "bce_multilabel", (logits,), vjp)


# ---------------------------------------------------------------------------
# spec'd elementwise dispatcher


def elementwise(kind: str, *args):
    ops: dict[str, Callable] = {
        "add": add, "sub": sub, "mul": mul, "scale": scale,
        "concat_cols": concat_cols, "row_mean": row_mean,
        "dropout_mask": dropout,
    }
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](*args)


# ---------------------------------------------------------------------------
# backward / gradient checking


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a 1x1 loss; returns {leaf: gradient array}.

    Leaves passed in `wrt` but unreachable from the loss get zero gradients.
    Non-finite gradients raise NonFiniteError naming the producing op.
    """
    if loss.shape != (1, 1):
        raise ShapeError("backward: loss must be 1x1", loss.shape)

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.parents:
            stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    by_id: dict[int, Tensor] = {id(loss): loss}
    for t in reversed(order):
        g = grads.get(id(t))
        if g is None or t._vjp is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient into op {t.op!r}", t.id)
        parent_grads = t._vjp(g)
        for p, pg in zip(t.parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg.copy() if acc is None else acc + pg
            by_id[id(p)] = p

    out: dict[Tensor, np.ndarray] = {}
    if wrt is not None:
        for p in wrt:
            out[p] = grads.get(id(p), np.zeros_like(p.data))
    else:
        for tid, t in by_id.items():
            if t._vjp is None:
                out[t] = grads[tid]
    for t, g in out.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of leaf {t.name or t.op!r}", t.id)
    return out


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error of analytic grads vs central finite differences.

    Error per entry is |analytic - fd| / max(1, |fd|); f must be
    deterministic given the current parameter values.
    """
    loss = f()
    grads = backward(loss, wrt=params)
    worst = 0.0
    for p in params:
        g = grads[p]
        flat = p.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = f().item()
            flat[i] = orig - eps
            with no_grad():
                fm = f().item()
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            if not (math.isfinite(fd) and math.isfinite(g.ravel()[i])):
                raise NonFiniteError("grad_check finite difference")
            err = abs(g.ravel()[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# randomness


class Rng:
    """Deterministic, splittable randomness (PCG64 over SeedSequence).

    A child stream is addressed by the spawn path from the root seed, so
    identical seeds reproduce identical streams on every platform and a
    component can hand out independent sub-streams without coordination.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, index: int) -> "Rng":
        return Rng(self.seed, self.path + (int(index),))

    def split(self, n: int) -> list["Rng"]:
        return [self.child(i) for i in range(n)]

    def normal(self, rows: int, cols: int, std: float = 1.0) -> Tensor:
        return Tensor(self.generator.normal(0.0, std, (rows, cols)))

    def uniform(self, rows: int, cols: int, bound: float) -> Tensor:
        return Tensor(self.generator.uniform(-bound, bound, (rows, cols)))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size)
