"""Full network: embedding, recursion vs a straight-line transcription,
bit-exact permutation properties, heads, checkpoints, gradient check."""

import numpy as np
import pytest

import n2.autodiff as ad
from n2.autodiff import Rng, Tensor
from n2.graphs import Graph, make_batch
from n2.message_passing import glob_mp_oracle, local_mp_oracle
from n2.model import (ModelConfig, RecursionState, adapt_pseudo, embed_inputs,
                      forward, graph_logits, init_model, init_pseudo,
                      load_checkpoint, logits_for, mark_trainable, node_logits,
                      recurrent_step, save_checkpoint)
from n2.proximity import proximity_matrix


def small_config(**kw):
    base = dict(L=2, d=4, q=3, k=2, n_p=2, dropout=0.0, n_c=3, d_in=3, d_e=0)
    base.update(kw)
    return ModelConfig(**base)


def path_graph(n, d_in, seed=0, labels=None):
    edges = []
    for v in range(n - 1):
        edges.extend([(v, v + 1), (v + 1, v)])
    x = Rng(seed).normal(n, d_in).data
    return Graph(n, np.array(edges, dtype=np.intp), x, y=labels)


def zero_params(config):
    params = init_model(config, Rng(0))
    for _, t, _ in params.leaves():
        if t.name is None:
            pass
    return params


# ---------------------------------------------------------------------------
# embedding


def test_embed_shapes():
    config = small_config(d_in=3, d=8, q=4)
    params = init_model(config, Rng(1))
    g = path_graph(7, 3)
    state = embed_inputs(g, params)
    assert state.M_n.shape == (7, 8)
    assert state.Q.shape == (7, 4)
    assert state.R.shape == (config.n_p, 4)
    assert state.step == 0


def test_embed_zero_features_zero_bias():
    config = small_config()
    params = init_model(config, Rng(2))
    g = Graph(4, np.zeros((0, 2), dtype=np.intp), np.zeros((4, 3)))
    state = embed_inputs(g, params)
    assert np.array_equal(state.Q.data, np.zeros((4, config.q)))
    assert np.array_equal(state.M_n.data, np.zeros((4, config.d)))


def test_embed_row_permutation():
    config = small_config()
    params = init_model(config, Rng(3))
    g = path_graph(6, 3, seed=4)
    state = embed_inputs(g, params)
    perm = Rng(5).permutation(6)
    state_p = embed_inputs(g.permuted(perm), params)
    assert np.array_equal(state_p.Q.data[perm], state.Q.data)
    assert np.array_equal(state_p.M_n.data[perm], state.M_n.data)


def test_init_pseudo_contract():
    a = init_pseudo(3, 4, Rng(6))
    b = init_pseudo(3, 4, Rng(6))
    assert a.shape == (3, 4)
    assert np.array_equal(a.data, b.data)
    big = init_pseudo(100, 128, Rng(7))
    assert abs(big.data.var() - 1.0 / 128) / (1.0 / 128) < 0.2


# ---------------------------------------------------------------------------
# recursion


def test_zero_messages_are_fixed_point():
    config = small_config()
    params = init_model(config, Rng(8))
    g = Graph(5, np.array([[0, 1], [1, 0]]), np.zeros((5, 3)))
    state0 = embed_inputs(g, params)
    state1 = recurrent_step(state0, g, params.layers[0], config)
    assert np.array_equal(state1.Q.data, state0.Q.data)
    assert np.array_equal(state1.M_n.data, state0.M_n.data)
    assert np.array_equal(state1.R.data, state0.R.data)


def test_adapt_pseudo_composes_glob_mp():
    config = small_config()
    params = init_model(config, Rng(9))
    g = path_graph(5, 3, seed=10)
    state = embed_inputs(g, params)
    M_hat, R_hat = adapt_pseudo(state, params.layers[0], config, g)
    want_M, want_dR = glob_mp_oracle(state.Q, state.M_n, state.R,
                                     params.layers[0].adapt)
    assert np.max(np.abs(M_hat.data - want_M.data)) < 1e-10
    assert np.max(np.abs(R_hat.data - (state.R.data + want_dR.data))) < 1e-10
    assert M_hat.shape == (5, config.d)
    assert R_hat.shape == (config.n_p, config.q)


def _nl_np(x, nl):
    pre = x @ nl.w.data + nl.b.data[0]
    return np.where(pre >= 0, pre, nl.slope * pre)


def transcribe_step(state, graph, layer, config):
    """Straight-line recursion step built only from the loop oracles."""
    Q, R, M = state.Q.data, state.R.data, state.M_n.data
    Mh, dRh = glob_mp_oracle(state.Q, state.M_n, state.R, layer.adapt)
    Rh = R + dRh.data
    cat = Tensor(np.concatenate([M, Mh.data, Q], axis=1))
    Mloc = local_mp_oracle(cat, graph, layer.local)
    Qh = Q + _nl_np(Mloc.data, layer.nl_q_local)
    Mg, dR = glob_mp_oracle(Tensor(Qh), Mloc, Tensor(Rh), layer.dyn)
    Q1 = Qh + _nl_np(Mg.data, layer.nl_q_glob)
    M1 = M + Mg.data
    R1 = Rh + dR.data
    return Q1, R1, M1


def test_recurrent_step_matches_transcription():
    config = small_config()
    params = init_model(config, Rng(11))
    g = path_graph(5, 3, seed=12)
    state = embed_inputs(g, params)
    nxt = recurrent_step(state, g, params.layers[0], config)
    Q1, R1, M1 = transcribe_step(state, g, params.layers[0], config)
    assert np.max(np.abs(nxt.Q.data - Q1)) < 1e-10
    assert np.max(np.abs(nxt.R.data - R1)) < 1e-10
    assert np.max(np.abs(nxt.M_n.data - M1)) < 1e-10
    assert nxt.step == 1


def test_forward_zero_steps_is_embedding():
    config = small_config(L=0)
    params = init_model(config, Rng(13))
    g = path_graph(4, 3, seed=14)
    final, traj = forward(g, params, config)
    want = embed_inputs(g, params)
    assert np.array_equal(final.Q.data, want.Q.data)
    assert final.step == 0


def test_forward_composes_steps():
    config = small_config(L=2)
    params = init_model(config, Rng(15))
    g = path_graph(5, 3, seed=16)
    final, traj = forward(g, params, config, keep_trajectory=True)
    state = embed_inputs(g, params)
    state = recurrent_step(state, g, params.layers[0], config)
    state = recurrent_step(state, g, params.layers[0], config)
    assert np.array_equal(final.Q.data, state.Q.data)
    assert np.array_equal(final.R.data, state.R.data)
    assert len(traj) == 3


def test_forward_eval_deterministic():
    config = small_config(dropout=0.3)
    params = init_model(config, Rng(17))
    g = path_graph(6, 3, seed=18)
    a, _ = forward(g, params, config, mode="eval", rng=Rng(1))
    b, _ = forward(g, params, config, mode="eval", rng=Rng(2))
    assert np.array_equal(a.Q.data, b.Q.data)


def test_forward_train_dropout_reproducible_per_seed():
    config = small_config(dropout=0.5)
    params = init_model(config, Rng(19))
    g = path_graph(6, 3, seed=20)
    a, _ = forward(g, params, config, mode="train", rng=Rng(3))
    b, _ = forward(g, params, config, mode="train", rng=Rng(3))
    c, _ = forward(g, params, config, mode="train", rng=Rng(4))
    assert np.array_equal(a.Q.data, b.Q.data)
    assert not np.array_equal(a.Q.data, c.Q.data)


# ---------------------------------------------------------------------------
# heads


def test_node_logits_zero_states():
    config = small_config()
    params = init_model(config, Rng(21))
    logits = node_logits(Tensor(np.zeros((4, config.q))), params)
    assert np.array_equal(logits.data, np.zeros((4, config.n_c)))


def test_node_logits_single_class_column():
    config = small_config(n_c=1)
    params = init_model(config, Rng(22))
    out = node_logits(Rng(0).normal(5, config.q), params)
    assert out.shape == (5, 1)


def test_node_logits_matches_entrywise():
    config = small_config()
    params = init_model(config, Rng(23))
    Q = Rng(1).normal(4, config.q)
    got = node_logits(Q, params).data
    want = proximity_matrix(Q, params.class_nodes, params.prox_out).data
    assert np.max(np.abs(got - want)) < 1e-12


def test_graph_logits_single_pseudo_and_symmetry():
    config = small_config(n_p=1)
    params = init_model(config, Rng(24))
    R = Rng(2).normal(1, config.q)
    got = graph_logits(R, params).data
    transformed = _nl_np(R.data, params.readout)
    want = proximity_matrix(Tensor(transformed), params.class_nodes,
                            params.prox_out).data
    assert np.max(np.abs(got - want)) < 1e-12

    config = small_config(n_p=4)
    params = init_model(config, Rng(25))
    R = Rng(3).normal(4, config.q)
    base = graph_logits(R, params).data
    perm = np.array([2, 0, 3, 1])
    permuted = graph_logits(Tensor(R.data[perm]), params).data
    assert np.max(np.abs(base - permuted)) < 1e-12


def test_graph_logits_manual_composition():
    config = small_config(n_p=3)
    params = init_model(config, Rng(26))
    R = Rng(4).normal(3, config.q)
    got = graph_logits(R, params).data
    pooled = _nl_np(R.data, params.readout).mean(axis=0, keepdims=True)
    want = proximity_matrix(Tensor(pooled), params.class_nodes,
                            params.prox_out).data
    assert np.max(np.abs(got - want)) < 1e-10


def test_lambda_scaling_preserves_argmax():
    config = small_config()
    params = init_model(config, Rng(27))
    Q = Rng(5).normal(6, config.q)
    base = node_logits(Q, params).data
    for lam in params.prox_out.lambdas:
        lam.data = lam.data * 2.0
    doubled = node_logits(Q, params).data
    assert np.array_equal(doubled, 2.0 * base)
    assert np.array_equal(doubled.argmax(axis=1), base.argmax(axis=1))


# ---------------------------------------------------------------------------
# permutation contract (bit-level)


def _permutation_case(config, seed, n=7):
    params = init_model(config, Rng(seed))
    g = path_graph(n, config.d_in, seed=seed + 1,
                   labels=np.arange(n) % config.n_c)
    final, _ = forward(g, params, config, mode="eval")
    logits = node_logits(final.Q, params).data
    glog = graph_logits(final.R, params).data
    return params, g, logits, glog


def test_node_permutation_equivariance_bitwise():
    config = small_config(L=3, d=5, q=4, k=2, n_p=3, n_c=4)
    params, g, logits, glog = _permutation_case(config, seed=28)
    rng = Rng(29)
    for _ in range(8):
        perm = rng.permutation(g.n)
        gp = g.permuted(perm)
        final, _ = forward(gp, params, config, mode="eval")
        logits_p = node_logits(final.Q, params).data
        assert np.array_equal(logits_p[perm], logits), "bit-level equivariance"
        glog_p = graph_logits(final.R, params).data
        assert np.array_equal(glog_p, glog), "bit-level invariance"


def test_node_permutation_equivariance_uniform_connection():
    config = small_config(L=2, connection="uniform")
    params, g, logits, glog = _permutation_case(config, seed=30)
    perm = Rng(31).permutation(g.n)
    final, _ = forward(g.permuted(perm), params, config, mode="eval")
    assert np.array_equal(node_logits(final.Q, params).data[perm], logits)
    assert np.array_equal(graph_logits(final.R, params).data, glog)


def test_pseudo_permutation_invariance_tolerance():
    # pseudo relabeling is a property of the math, not of bit layout
    config = small_config(L=2, n_p=4)
    params = init_model(config, Rng(32))
    g = path_graph(6, 3, seed=33)
    final, _ = forward(g, params, config)
    base = graph_logits(final.R, params).data
    perm = np.array([3, 1, 0, 2])
    r = params.r_init.data
    params.r_init.data = np.ascontiguousarray(r[perm])
    final_p, _ = forward(g, params, config)
    assert np.max(np.abs(graph_logits(final_p.R, params).data - base)) < 1e-10


# ---------------------------------------------------------------------------
# shared parameters


def test_share_layers_parameter_count_independent_of_L():
    c2 = small_config(L=2)
    c9 = small_config(L=9)
    assert init_model(c2, Rng(34)).count() == init_model(c9, Rng(34)).count()
    unshared = small_config(L=3, share_layers=False)
    assert init_model(unshared, Rng(34)).count() > init_model(c2, Rng(34)).count()
    assert len(init_model(unshared, Rng(34)).layers) == 3


# ---------------------------------------------------------------------------
# batched forward equals per-graph forwards


def test_batched_forward_matches_individual():
    config = small_config(L=2, n_c=2)
    params = init_model(config, Rng(35))
    gs = [path_graph(4, 3, seed=40, labels=np.array([0])),
          path_graph(6, 3, seed=41, labels=np.array([1])),
          path_graph(5, 3, seed=42, labels=np.array([1]))]
    batch = make_batch(gs)
    final, _ = forward(batch, params, config)
    logits = logits_for(batch, final, params, config, "graph-class").data
    for i, g in enumerate(gs):
        f, _ = forward(g, params, config)
        want = graph_logits(f.R, params).data
        assert np.max(np.abs(logits[i] - want)) < 1e-9


# ---------------------------------------------------------------------------
# full-model gradient check


def kink_margin(f) -> float:
    """Smallest |pre-activation| across the net at the current point.

    Central differences only measure the analytic gradient where no
    LeakyReLU unit flips side within the step; callers require the margin
    to dominate the finite-difference perturbation."""
    with ad.monitor_preactivations() as pres:
        with ad.no_grad():
            f()
    return min(pres) if pres else np.inf


def full_model_case(seed, n=6, n_c=2):
    config = small_config(L=2, d=4, q=3, k=2, n_p=2, n_c=n_c, d_in=3)
    params = init_model(config, Rng(seed))
    mark_trainable(params)
    labels = np.array([i % n_c for i in range(n)])
    g = path_graph(n, 3, seed=seed + 1, labels=labels)

    def f():
        final, _ = forward(g, params, config, mode="eval")
        return ad.cross_entropy(node_logits(final.Q, params), g.y)

    return f, [t for _, t, _ in params.leaves()]


def test_full_model_grad_check():
    checked = 0
    for seed in range(40):
        f, leaves = full_model_case(seed)
        margin = kink_margin(f)
        if margin < 1e-6:
            continue  # a unit sits on its kink: gradient undefined there
        eps = float(np.clip(margin / 100.0, 1e-8, 1e-6))
        assert ad.grad_check(f, leaves, eps=eps) < 1e-4
        checked += 1
        if checked == 2:
            break
    assert checked == 2, "no kink-free evaluation points found"


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    config = small_config(L=3, d=6, q=4, n_p=3, n_c=4, d_in=5)
    params = init_model(config, Rng(38))
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, config, params)
    config2, params2 = load_checkpoint(path)
    assert config2 == config
    for (n1, t1, _), (n2, t2, _) in zip(params.leaves(), params2.leaves()):
        assert n1 == n2
        assert np.array_equal(t1.data, t2.data)
    g = path_graph(5, 5, seed=39)
    a, _ = forward(g, params, config)
    b, _ = forward(g, params2, config2)
    assert np.array_equal(a.Q.data, b.Q.data)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"definitely not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(str(path))


def test_checkpoint_bytes_deterministic(tmp_path):
    config = small_config()
    params = init_model(config, Rng(40))
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(p1, config, params)
    save_checkpoint(p2, config, params)
    assert open(p1, "rb").read() == open(p2, "rb").read()
