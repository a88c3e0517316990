"""Dataset containers, file round-trips, generators, batching, splits."""

import json

import numpy as np
import pytest

from n2.graphs import (Dataset, DatasetError, Graph, degree_onehot,
                       gen_community_graph, gen_random_graph, gen_trees_match,
                       kfold_splits, load_dataset, make_batch, random_split,
                       save_dataset, unbatch)


def toy_graph(n=3, with_edge_feats=False, y=None):
    edges = np.array([[0, 1], [1, 0], [1, 2], [2, 1]])
    ef = np.arange(8.0).reshape(4, 2) if with_edge_feats else None
    return Graph(n, edges, np.arange(n * 2, dtype=float).reshape(n, 2), ef, y)


# ---------------------------------------------------------------------------
# loading / validation


def test_load_single_graph(tmp_path):
    path = tmp_path / "ds.json"
    path.write_text(json.dumps({
        "task": "graph-class", "num_classes": 2,
        "graphs": [{"n": 2, "edges": [[0, 1], [1, 0]],
                    "x": [[1.0], [2.0]], "y": 1}],
    }))
    ds = load_dataset(str(path))
    assert len(ds) == 1
    assert ds.graphs[0].m == 2
    assert int(ds.graphs[0].y[0]) == 1


def test_load_rejects_bad_endpoint(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({
        "task": "graph-class", "num_classes": 2,
        "graphs": [{"n": 3, "edges": [[0, 5]], "x": [[0.0]] * 3, "y": 0}],
    }))
    with pytest.raises(DatasetError) as err:
        load_dataset(str(path))
    assert "graph 0" in str(err.value)


def test_load_reports_parse_position(tmp_path):
    path = tmp_path / "trunc.json"
    path.write_text('{"task": "graph-class",\n  "num_classes": ')
    with pytest.raises(DatasetError) as err:
        load_dataset(str(path))
    assert "line" in str(err.value)


def test_roundtrip_save_load(tmp_path):
    masks = {"train": np.array([True, False, True]),
             "val": np.array([False, True, False]),
             "test": np.array([False, False, False])}
    g1 = Graph(3, np.array([[0, 1], [1, 0]]), np.eye(3),
               y=np.array([0, 1, 1]), masks=masks)
    g2 = toy_graph(with_edge_feats=False, y=np.array([2, 0, 1]))
    g2 = Graph(3, g2.edges, g2.x, np.ones((4, 2)), g2.y)
    ds = Dataset([g1, g2], "node-class", 3, name="toy")
    path = tmp_path / "rt.json"
    save_dataset(ds, str(path))
    back = load_dataset(str(path))
    assert back.task == ds.task and back.num_classes == 3 and back.name == "toy"
    for a, b in zip(ds.graphs, back.graphs):
        assert a.n == b.n
        assert np.array_equal(a.edges, b.edges)
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.y, b.y)
        if a.edge_feats is None:
            assert b.edge_feats is None
        else:
            assert np.array_equal(a.edge_feats, b.edge_feats)
        if a.masks:
            for key in a.masks:
                assert np.array_equal(a.masks[key], b.masks[key])


def test_graph_invariants_checked():
    with pytest.raises(DatasetError):
        Graph(2, np.array([[0, 2]]), np.zeros((2, 1)))
    with pytest.raises(DatasetError):
        Graph(2, np.zeros((0, 2), dtype=int), np.zeros((3, 1)))
    with pytest.raises(DatasetError):
        Graph(3, np.array([[0, 1]]), np.zeros((3, 1)),
              edge_feats=np.zeros((2, 1)))
    with pytest.raises(DatasetError):
        Dataset([toy_graph()], "node-class", 1)


# ---------------------------------------------------------------------------
# degree one-hot


def test_degree_onehot_isolated_and_capped():
    g = Graph(1, np.zeros((0, 2), dtype=int), np.zeros((1, 1)))
    out = degree_onehot(g, 3)
    assert np.array_equal(out.x, [[1.0, 0.0, 0.0, 0.0]])

    star = Graph(4, np.array([[1, 0], [0, 1], [2, 0], [0, 2], [3, 0], [0, 3]]),
                 np.zeros((4, 1)))
    out = degree_onehot(star, 5)
    assert out.x[0, 3] == 1.0 and out.x[0].sum() == 1.0
    out = degree_onehot(star, 2)
    assert out.x[0, 2] == 1.0  # capped at max_degree


def test_degree_onehot_rows_sum_to_one():
    g = gen_random_graph(60, 5.0, 3, seed=1)
    out = degree_onehot(g, 10)
    assert np.allclose(out.x.sum(axis=1), 1.0)


# ---------------------------------------------------------------------------
# batching


def test_make_batch_offsets():
    a = Graph(2, np.array([[0, 1], [1, 0]]), np.ones((2, 2)), y=np.array([0]))
    b = Graph(3, np.array([[0, 1], [1, 2]]), np.zeros((3, 2)), y=np.array([1]))
    batch = make_batch([a, b])
    assert batch.n == 5
    assert np.array_equal(batch.edges[2], [2, 3])
    assert np.array_equal(batch.graph_ids, [0, 0, 1, 1, 1])


def test_batch_of_one_is_identity_with_zero_ids():
    g = toy_graph(y=np.array([1]))
    batch = make_batch([g])
    assert np.array_equal(batch.x, g.x)
    assert np.array_equal(batch.edges, g.edges)
    assert np.array_equal(batch.graph_ids, np.zeros(3, dtype=int))


def test_unbatch_roundtrip():
    gs = [toy_graph(y=np.array([0])),
          Graph(2, np.array([[0, 1], [1, 0]]), np.full((2, 2), 7.0), y=np.array([1])),
          Graph(4, np.zeros((0, 2), dtype=int), np.eye(4)[:, :2], y=np.array([2]))]
    back = unbatch(make_batch(gs))
    assert len(back) == 3
    for a, b in zip(gs, back):
        assert a.n == b.n
        assert np.array_equal(a.edges, b.edges)
        assert np.array_equal(a.x, b.x)
        if a.y is not None:
            assert np.array_equal(a.y, b.y)


def test_make_batch_rejects_dim_mismatch():
    with pytest.raises(DatasetError):
        make_batch([toy_graph(), Graph(2, np.zeros((0, 2), dtype=int),
                                       np.zeros((2, 3)))])


# ---------------------------------------------------------------------------
# splits


def test_random_split_sizes_and_determinism():
    s = random_split(10, (0.6, 0.2, 0.2), seed=5)
    assert (len(s.train), len(s.val), len(s.test)) == (6, 2, 2)
    s2 = random_split(10, (0.6, 0.2, 0.2), seed=5)
    assert np.array_equal(s.train, s2.train)
    assert np.array_equal(s.val, s2.val)
    with pytest.raises(DatasetError):
        random_split(2, (0.6, 0.2, 0.2), seed=0)
    with pytest.raises(DatasetError):
        random_split(10, (0.5, 0.2, 0.2), seed=0)


def test_random_split_partition_property():
    rng = np.random.default_rng(0)
    for _ in range(10):
        n = int(rng.integers(5, 200))
        s = random_split(n, (0.6, 0.2, 0.2), seed=int(rng.integers(1 << 30)))
        merged = np.concatenate([s.train, s.val, s.test])
        assert np.array_equal(np.sort(merged), np.arange(n))


def test_kfold_each_item_once_and_val_is_next_fold():
    splits = kfold_splits(10, 10, seed=3)
    assert all(len(s.test) == 1 for s in splits)
    tests = np.sort(np.concatenate([s.test for s in splits]))
    assert np.array_equal(tests, np.arange(10))
    splits = kfold_splits(23, 10, seed=3)
    sizes = [len(s.test) for s in splits]
    assert max(sizes) - min(sizes) <= 1
    assert sum(sizes) == 23
    for i, s in enumerate(splits):
        assert len(np.intersect1d(s.test, s.val)) == 0
        assert len(s.train) + len(s.val) + len(s.test) == 23
    with pytest.raises(DatasetError):
        kfold_splits(5, 10, seed=0)


# ---------------------------------------------------------------------------
# trees-match generator


def test_trees_match_shapes():
    ds = gen_trees_match(2, 5, seed=1)
    assert ds.num_classes == 4
    for g in ds.graphs:
        assert g.n == 7
        assert g.m == 12  # 6 undirected edges, both directions
        assert g.d_in == 9  # 4 keys + 4 classes + root flag


def test_trees_match_depth1_label_recoverable():
    ds = gen_trees_match(1, 20, seed=2)
    for g in ds.graphs:
        root_key = int(np.argmax(g.x[0, :2]))
        label = None
        for leaf in (1, 2):
            if g.x[leaf, root_key] == 1.0:
                label = int(np.argmax(g.x[leaf, 2:4]))
        assert label == int(g.y[0])


def test_trees_match_label_distribution():
    ds = gen_trees_match(2, 10000, seed=3)
    counts = np.bincount([int(g.y[0]) for g in ds.graphs], minlength=4)
    sigma = np.sqrt(10000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 2500) <= 3 * sigma)


def test_trees_match_deterministic():
    a = gen_trees_match(3, 4, seed=9)
    b = gen_trees_match(3, 4, seed=9)
    for ga, gb in zip(a.graphs, b.graphs):
        assert np.array_equal(ga.x, gb.x)
        assert np.array_equal(ga.y, gb.y)


# ---------------------------------------------------------------------------
# random graph generator


def test_random_graph_edge_cases():
    assert gen_random_graph(1, 3.0, 2, seed=0).m == 0
    assert gen_random_graph(50, 0.0, 2, seed=0).m == 0


def test_random_graph_mean_degree():
    g = gen_random_graph(10000, 6.0, 1, seed=4)
    mean_deg = g.m / g.n  # directed storage counts each side once
    assert abs(mean_deg - 6.0) / 6.0 < 0.1


def test_random_graph_deterministic():
    a = gen_random_graph(100, 4.0, 3, seed=11)
    b = gen_random_graph(100, 4.0, 3, seed=11)
    assert np.array_equal(a.edges, b.edges)
    assert np.array_equal(a.x, b.x)


def test_community_graph_labels_and_structure():
    g = gen_community_graph(120, 4, 0.2, 0.5, 8, seed=5)
    assert g.y is not None and set(np.unique(g.y)) == {0, 1, 2, 3}
    labels = g.y
    same = np.sum(labels[g.edges[:, 0]] == labels[g.edges[:, 1]])
    assert same > g.m * 0.7  # communities dominate
    perm = np.argsort(np.argsort(labels))  # graph is valid after relabeling too
    _ = g.permuted(np.random.default_rng(0).permutation(g.n))
