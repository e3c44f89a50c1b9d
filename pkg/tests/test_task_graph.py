import numpy as np
import pytest

from graphprompter.autograd import Tensor
from graphprompter.model import ModelConfig, init_params
from graphprompter.task_graph import (build_task_graph, label_init, merge, predict,
                                      propagate, query_cosines)


@pytest.fixture
def params():
    return init_params(ModelConfig(feature_dim=4, embedding_dim=6, task_rounds=2), seed=0)


def test_counts_for_two_way_one_shot():
    tg = build_task_graph([0, 1], 1, 2)
    assert tg.num_data == 3 and tg.num_labels == 2 and tg.num_edges == 6
    types = [t for _, _, t in tg.edge_list()]
    assert types.count("T") == 2 and types.count("Q") == 2 and types.count("F") == 2


def test_structure_invariants():
    tg = build_task_graph([0, 1, 2, 0, 1, 2, 1], 4, 3)
    edges = tg.edge_list()
    assert len(edges) == (7 + 4) * 3
    for d in range(7):
        mine = [t for (dd, _, t) in edges if dd == d]
        assert len(mine) == 3 and mine.count("T") == 1
    for d in range(7, 11):
        assert [t for (dd, _, t) in edges if dd == d] == ["Q"] * 3
    # bipartite: every edge joins a data node to a label node
    assert all(d < tg.num_data <= l for d, l, _ in edges)


def test_class_without_prompts_rejected():
    with pytest.raises(ValueError, match=r"\[1\]"):
        build_task_graph([0, 0, 2], 1, 3)
    with pytest.raises(ValueError):
        build_task_graph([0, 3], 1, 3)


def test_label_init_is_mean_of_true_prompts():
    tg = build_task_graph([0, 0, 1], 1, 2)
    data = Tensor(np.array([[2.0, 2.0], [2.0, 2.0], [1.0, 0.0], [9.0, 9.0]]))
    np.testing.assert_array_equal(label_init(tg, data).data, [[2.0, 2.0], [1.0, 0.0]])
    eye = np.eye(3)
    tg = build_task_graph([0, 1, 2], 0, 3)
    np.testing.assert_array_equal(label_init(tg, Tensor(eye)).data, eye)


def test_zero_rounds_is_identity(params):
    tg = build_task_graph([0, 1], 2, 2)
    data = np.random.default_rng(0).normal(size=(4, 6))
    H = propagate(tg, Tensor(data), params, 0).data
    np.testing.assert_array_equal(H[:4], data)
    np.testing.assert_array_equal(H[4:], data[:2])


def test_single_edge_attention_closed_form(params):
    """One prompt, one label, one round: attention weight is 1 on the only edge."""
    h = np.random.default_rng(1).normal(size=(1, 6))
    tg = build_task_graph([0], 0, 1)
    H = propagate(tg, Tensor(h), params, 1).data
    P = {n: params[n].data for n in params}
    E_T = P["edge_type"][0]
    label = h @ P["task_gnn.0.label.W_self"] + (h + E_T) @ P["task_gnn.0.label.W_v"]
    data = h @ P["task_gnn.0.data.W_self"] + (label + E_T) @ P["task_gnn.0.data.W_v"]
    np.testing.assert_allclose(H[1], label[0], rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(H[0], data[0], rtol=1e-13, atol=1e-13)


def test_two_label_attention_closed_form(params):
    """A query attending over two labels: explicit softmax of scaled dot products."""
    rng = np.random.default_rng(2)
    h = rng.normal(size=(3, 6))        # prompts of class 0 and 1, then one query
    tg = build_task_graph([0, 1], 1, 2)
    H = propagate(tg, Tensor(h), params, 1).data
    P = {n: params[n].data for n in params}
    E = P["edge_type"]
    labels = []
    for c in range(2):
        # each label sees both prompts: its own via T, the other via F
        msgs = [h[p] + E[0 if p == c else 1] for p in range(2)]
        qv = h[c] @ P["task_gnn.0.label.W_q"]
        s = np.array([qv @ (m @ P["task_gnn.0.label.W_k"]) for m in msgs]) / np.sqrt(6)
        a = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
        labels.append(h[c] @ P["task_gnn.0.label.W_self"] + sum(ai * (m @ P["task_gnn.0.label.W_v"])
                                                            for ai, m in zip(a, msgs)))
    msgs = [labels[c] + E[2] for c in range(2)]
    qv = h[2] @ P["task_gnn.0.data.W_q"]
    s = np.array([qv @ (m @ P["task_gnn.0.data.W_k"]) for m in msgs]) / np.sqrt(6)
    a = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    query = h[2] @ P["task_gnn.0.data.W_self"] + sum(ai * (m @ P["task_gnn.0.data.W_v"]) for ai, m in zip(a, msgs))
    np.testing.assert_allclose(H[3:5], np.array(labels), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(H[2], query, rtol=1e-12, atol=1e-12)


def test_query_permutation_equivariance(params):
    rng = np.random.default_rng(3)
    prompts = rng.normal(size=(4, 6))
    queries = rng.normal(size=(5, 6))
    tg = build_task_graph([0, 1, 0, 1], 5, 2)
    perm = rng.permutation(5)
    H1 = propagate(tg, Tensor(np.vstack([prompts, queries])), params, 2).data
    H2 = propagate(tg, Tensor(np.vstack([prompts, queries[perm]])), params, 2).data
    np.testing.assert_allclose(H2[4:9], H1[4:9][perm], atol=1e-13)
    np.testing.assert_allclose(H2[9:], H1[9:], atol=1e-13)


def test_query_independence(params):
    rng = np.random.default_rng(4)
    prompts = rng.normal(size=(6, 6))
    queries = rng.normal(size=(5, 6))
    pc = [0, 1, 2, 0, 1, 2]
    full = predict(build_task_graph(pc, 5, 3),
                   propagate(build_task_graph(pc, 5, 3), Tensor(np.vstack([prompts, queries])), params, 2))
    for drop in range(5):
        keep = [i for i in range(5) if i != drop]
        tg = build_task_graph(pc, 4, 3)
        sub = predict(tg, propagate(tg, Tensor(np.vstack([prompts, queries[keep]])), params, 2))
        np.testing.assert_array_equal(sub.pred, full.pred[keep])
        np.testing.assert_allclose(sub.proba, full.proba[keep], atol=1e-13)


def test_merge_equals_separate_graphs(params):
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(5, 6)), rng.normal(size=(8, 6))
    ta, tb = build_task_graph([0, 1, 1], 2, 2), build_task_graph([0, 1, 1, 0, 1], 3, 2)
    Hm = propagate(merge([ta, tb]), Tensor(np.vstack([a, b])), params, 2)
    cm = query_cosines(merge([ta, tb]), Hm).data
    ca = query_cosines(ta, propagate(ta, Tensor(a), params, 2)).data
    cb = query_cosines(tb, propagate(tb, Tensor(b), params, 2)).data
    np.testing.assert_allclose(cm[:2, :2], ca, atol=1e-13)
    np.testing.assert_allclose(cm[2:], cb, atol=1e-13)
    with pytest.raises(ValueError, match="ways"):
        merge([ta, build_task_graph([0, 1, 2], 1, 3)])


def H_from(data_rows, label_rows):
    return Tensor(np.vstack([data_rows, label_rows]))


def test_predict_matching_label():
    tg = build_task_graph([0, 1, 2], 1, 3)
    labels = np.eye(3)
    out = predict(tg, H_from(np.vstack([np.eye(3), [[0, 1, 0]]]), labels), temperature=1.0)
    assert out.pred.tolist() == [1]


def test_identical_labels_give_uniform_probabilities():
    tg = build_task_graph([0, 1, 2, 3], 2, 4)
    data = np.random.default_rng(0).normal(size=(6, 3))
    out = predict(tg, H_from(data, np.tile([1.0, 2.0, 3.0], (4, 1))), 1.0)
    np.testing.assert_allclose(out.proba, 0.25, atol=1e-15)
    assert out.pred.tolist() == [0, 0]
    np.testing.assert_allclose(out.confidence, 0.25, atol=1e-15)


@pytest.mark.parametrize("tau", [1.0, 0.1])
def test_probabilities_match_softmax_over_cosines(tau):
    rng = np.random.default_rng(6)
    tg = build_task_graph([0, 1, 2, 3], 5, 4)
    data, labels = rng.normal(size=(9, 6)), rng.normal(size=(4, 6))
    out = predict(tg, H_from(data, labels), tau)
    for qi, q in enumerate(data[4:]):
        cos = np.array([q @ l / (np.linalg.norm(q) * np.linalg.norm(l)) for l in labels])
        z = np.exp((cos - cos.max()) / tau)
        np.testing.assert_allclose(out.proba[qi], z / z.sum(), rtol=0, atol=1e-12)
        assert out.pred[qi] == int(np.argmax(cos))
    assert np.max(np.abs(out.proba.sum(axis=1) - 1)) <= 1e-9


def test_argmax_invariant_to_query_scaling():
    rng = np.random.default_rng(7)
    tg = build_task_graph([0, 1, 2], 3, 3)
    data, labels = rng.normal(size=(6, 5)), rng.normal(size=(3, 5))
    base = predict(tg, H_from(data, labels)).pred
    for s in (1e-3, 0.5, 7.0, 1e4):
        scaled = data.copy()
        scaled[3:] *= s
        assert np.array_equal(predict(tg, H_from(scaled, labels)).pred, base)
