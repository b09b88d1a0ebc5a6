import math

import numpy as np
import pytest
import torch
from sklearn.base import clone

from causal_fingerprint.errors import InputError, NonFiniteLossError
from causal_fingerprint.ingest import normalize
from causal_fingerprint.synth import CohortSpec, cohort_partition, simulate_cohort
from causal_fingerprint.sysid import CausalSignature, fit_recording
from causal_fingerprint.taskgnn import (Architecture, GnnParams, TaskGNNClassifier, TaskGraph,
                                        TrainConfig, build_graph, evaluate, forward, gat_forward,
                                        gatv2_forward, loss_and_gradients, readout_and_classify,
                                        topk_pool, train)
from causal_fingerprint.taskgnn.network import batch_loss, pool_size
from causal_fingerprint.taskgnn.training import make_optimizer, stratified_split

f64 = torch.float64


def leaky(x):
    return x if x > 0 else 0.2 * x


def elu(x):
    return x if x > 0 else math.expm1(x)


def reweighted_softmax(logits, weights):
    """Softmax over the listed neighbours, then edge-weight reweighting."""
    top = max(logits)
    ex = [math.exp(v - top) for v in logits]
    alpha = [v / sum(ex) for v in ex]
    num = [a * w for a, w in zip(alpha, weights)]
    return [v / sum(num) for v in num]


def gat_oracle(H, W, a, E, skip_W, skip_b):
    """Loop-by-loop attention layer on one graph (lists of floats)."""
    N, K, h = len(H), len(W), len(W[0][0])
    out = []
    for i in range(N):
        row = []
        for k in range(K):
            z = [[sum(H[j][f] * W[k][f][c] for f in range(len(H[j]))) for c in range(h)]
                 for j in range(N)]
            nbrs = [j for j in range(N) if E[i][j] > 0]
            logits = [leaky(sum(a[k][c] * z[i][c] for c in range(h))
                            + sum(a[k][h + c] * z[j][c] for c in range(h))) for j in nbrs]
            att = reweighted_softmax(logits, [E[i][j] for j in nbrs])
            row += [elu(sum(att[t] * z[j][c] for t, j in enumerate(nbrs))) for c in range(h)]
        skip = [sum(H[i][f] * skip_W[f][c] for f in range(len(H[i]))) + skip_b[c]
                for c in range(K * h)]
        out.append([r + s for r, s in zip(row, skip)])
    return out


def gatv2_oracle(H, W, a, E):
    N, F, h = len(H), len(H[0]), len(a)
    zl = [[sum(W[c][f] * H[i][f] for f in range(F)) for c in range(h)] for i in range(N)]
    zr = [[sum(W[c][F + f] * H[i][f] for f in range(F)) for c in range(h)] for i in range(N)]
    out = []
    for i in range(N):
        nbrs = [j for j in range(N) if E[i][j] > 0]
        logits = [sum(a[c] * leaky(zl[i][c] + zr[j][c]) for c in range(h)) for j in nbrs]
        att = reweighted_softmax(logits, [E[i][j] for j in nbrs])
        out.append([elu(sum(att[t] * zr[j][c] for t, j in enumerate(nbrs))) for c in range(h)])
    return out


def random_graph(rng, N=5, F=4, label=0, density=0.6):
    E = rng.uniform(0.1, 1.0, (N, N)) * (rng.random((N, N)) < density)
    np.fill_diagonal(E, 1.0)
    return TaskGraph(rng.standard_normal((N, F)), E, label)


def tiny_params(seed=0, in_features=4, n_classes=2, hidden=3, heads=1):
    return GnnParams.init(Architecture(in_features, n_classes, hidden, heads, 0.5), seed, f64)


def batched(*graphs):
    H = torch.tensor(np.stack([g.node_features for g in graphs]), dtype=f64)
    E = torch.tensor(np.stack([g.edge_weights for g in graphs]), dtype=f64)
    return H, E


# -- graph construction ------------------------------------------------------

def test_build_graph_examples():
    sig = CausalSignature(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 1)))
    g = build_graph(sig, 1)
    assert np.array_equal(g.edge_weights, np.eye(3)) and g.node_features.shape == (3, 7)
    A = np.zeros((3, 3))
    A[0, 2] = -2.0
    g = build_graph(CausalSignature(np.zeros((3, 3)), A, np.zeros((3, 1))), 0)
    assert g.edge_weights[0, 2] == 1.0 and g.edge_weights.sum() == 4.0
    big = CausalSignature(np.zeros((90, 90)), np.ones((90, 90)), np.zeros((90, 10)))
    assert build_graph(big, 0).node_features.shape == (90, 190)


def test_graph_validation():
    with pytest.raises(InputError):
        TaskGraph(np.zeros((3, 2)), np.eye(2), 0)
    with pytest.raises(InputError):
        TaskGraph(np.zeros((2, 2)), 2 * np.eye(2), 0)


# -- layers --------------------------------------------------------------------

def test_gat_single_node():
    H = torch.tensor([[[0.5, -1.0]]], dtype=f64)
    W = torch.tensor([[[1.0, 2.0], [0.5, -1.0]]], dtype=f64)
    a = torch.tensor([[0.3, -0.2, 0.7, 0.1]], dtype=f64)
    sW = torch.eye(2, dtype=f64)
    sb = torch.zeros(2, dtype=f64)
    out, att = gat_forward(H, W, a, torch.ones(1, 1, 1, dtype=f64), sW, sb, True)
    z = H[0, 0] @ W[0]
    assert att.item() == 1.0
    assert torch.allclose(out[0, 0], torch.nn.functional.elu(z) + H[0, 0])


def test_gat_identical_nodes_symmetric():
    H = torch.ones(1, 2, 3, dtype=f64)
    p = tiny_params(in_features=3)
    out = gat_forward(H, p["gat1.W"], p["gat1.a"], torch.ones(1, 2, 2, dtype=f64),
                      p["skip1.W"], p["skip1.b"])
    assert torch.equal(out[0, 0], out[0, 1])


def test_gat_matches_scalar_oracle(rng):
    g = random_graph(rng, N=4, F=3)
    p = tiny_params(in_features=3, hidden=2, heads=2)
    H, E = batched(g)
    got = gat_forward(H, p["gat1.W"], p["gat1.a"], E, p["skip1.W"], p["skip1.b"])[0]
    want = gat_oracle(g.node_features.tolist(), p["gat1.W"].tolist(), p["gat1.a"].tolist(),
                      g.edge_weights.tolist(), p["skip1.W"].tolist(), p["skip1.b"].tolist())
    assert np.allclose(got.detach().numpy(), want, atol=1e-12)


def test_gatv2_matches_scalar_oracle(rng):
    g = random_graph(rng, N=4, F=3)
    W = torch.tensor(rng.standard_normal((2, 6)), dtype=f64)
    a = torch.tensor(rng.standard_normal(2), dtype=f64)
    H, E = batched(g)
    got = gatv2_forward(H, W, a, E)[0]
    want = gatv2_oracle(g.node_features.tolist(), W.tolist(), a.tolist(), g.edge_weights.tolist())
    assert np.allclose(got.numpy(), want, atol=1e-12)


def test_gatv2_zero_attention_vector_is_uniform(rng):
    H = torch.tensor(rng.standard_normal((1, 4, 3)), dtype=f64)
    W = torch.tensor(rng.standard_normal((2, 6)), dtype=f64)
    out, att = gatv2_forward(H, W, torch.zeros(2, dtype=f64), torch.ones(1, 4, 4, dtype=f64),
                             True)
    assert torch.allclose(att, torch.full_like(att, 0.25))


def test_topk_examples():
    H = torch.tensor([[[3.0], [1.0], [2.0], [0.0]]], dtype=f64)
    E = torch.full((1, 4, 4), 0.5, dtype=f64)
    p = torch.tensor([1.0], dtype=f64)
    H2, E2, kept = topk_pool(H, p, E, 0.5)
    assert kept.tolist() == [[0, 2]]
    assert torch.allclose(H2[0, :, 0], torch.tensor([3 * math.tanh(3), 2 * math.tanh(2)], dtype=f64))
    assert torch.equal(E2[0], torch.tensor([[1.0, 0.5], [0.5, 1.0]], dtype=f64))
    H3, _, kept = topk_pool(H, p, E, 1.0)
    assert kept.shape[1] == 4 and torch.allclose(H3[0, 0, 0], torch.tensor(3 * math.tanh(3), dtype=f64))
    with pytest.raises(InputError):
        topk_pool(H, torch.zeros(1, dtype=f64), E, 0.5)
    assert pool_size(0.5, 5) == 3 and pool_size(0.01, 5) == 1 and pool_size(0.3, 10) == 3


def test_readout():
    H = torch.tensor([[[1.0, 2.0]]], dtype=f64)
    W = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=f64)
    b = torch.tensor([0.5, -0.5], dtype=f64)
    assert torch.equal(readout_and_classify(H, W, b), torch.tensor([[1.5, 1.5]], dtype=f64))
    assert torch.equal(readout_and_classify(H.repeat(1, 3, 1), W, b),
                       readout_and_classify(H, W, b))


# -- whole network -------------------------------------------------------------

def test_attention_rows_sum_to_one(rng):
    p = tiny_params(hidden=4, heads=2)
    H, E = batched(random_graph(rng), random_graph(rng))
    _, atts = forward(p, H, E, return_attention=True)
    for name in ("gat1", "gat2", "gatv2"):
        assert torch.allclose(atts[name].sum(-1), torch.ones((), dtype=f64), atol=1e-12)


def test_permutation_invariance(rng):
    p = tiny_params(hidden=4, heads=2)
    g = random_graph(rng, N=6)
    perm = rng.permutation(6)
    gp = TaskGraph(g.node_features[perm], g.edge_weights[np.ix_(perm, perm)], 0)
    assert torch.allclose(forward(p, *batched(g)), forward(p, *batched(gp)), atol=1e-10)


def test_uniform_logits_loss_is_log_c(rng):
    p = tiny_params(n_classes=3)
    with torch.no_grad():
        p["head.W"].zero_()
        p["head.b"].zero_()
    loss = batch_loss(p, [random_graph(rng, label=1), random_graph(rng, label=2)])
    assert abs(loss.item() - math.log(3)) <= 1e-12


def test_finite_difference_gradients(rng):
    p = tiny_params()
    batch = [random_graph(rng, label=0), random_graph(rng, label=1)]
    _, grads = loss_and_gradients(p, batch)
    eps, worst = 1e-5, 0.0
    with torch.no_grad():
        for name, t in p.tensors.items():
            flat = t.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + eps
                up = batch_loss(p, batch).item()
                flat[k] = orig - eps
                down = batch_loss(p, batch).item()
                flat[k] = orig
                fd = (up - down) / (2 * eps)
                g = grads[name].view(-1)[k].item()
                worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-6))
    assert worst <= 1e-4


def test_non_finite_loss_names_graph(rng):
    g = random_graph(rng)
    bad = TaskGraph(np.full((5, 4), np.nan), g.edge_weights, 0, "s009", "LANG", "A")
    with pytest.raises(NonFiniteLossError, match="s009/LANG/A"):
        batch_loss(tiny_params(), [g, bad])


def test_params_round_trip():
    p = tiny_params(seed=4)
    q = GnnParams.from_dict(p.to_dict())
    assert all(torch.equal(p[k], q[k]) for k in p)
    with pytest.raises(InputError):
        GnnParams(p.arch, {k: v for k, v in p.tensors.items() if k != "pool.p"})


# -- training ------------------------------------------------------------------

def test_weight_decay_shrinks_geometrically():
    p = tiny_params()
    cfg = TrainConfig(lr=0.01, weight_decay=0.5)
    opt = make_optimizer(p, cfg)
    before = {k: v.detach().clone() for k, v in p.tensors.items()}
    for _ in range(5):
        for t in p.parameters():
            t.grad = torch.zeros_like(t)
        opt.step()
    factor = (1 - cfg.lr * cfg.weight_decay) ** 5
    for k in p:
        assert torch.allclose(p[k].detach(), before[k] * factor, atol=1e-15)


def test_stratified_split():
    labels = [0] * 10 + [1] * 6
    tr, te = stratified_split(labels, 0.5, seed=3)
    assert sorted(tr + te) == list(range(16))
    assert sum(labels[i] == 0 for i in tr) == 5 and sum(labels[i] == 1 for i in tr) == 3
    assert (tr, te) == stratified_split(labels, 0.5, seed=3)


def test_train_config_validation():
    with pytest.raises(InputError):
        TrainConfig(split_fraction=1.0)
    with pytest.raises(InputError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


@pytest.fixture(scope="module")
def two_task_graphs():
    spec = CohortSpec(n_subjects=20, tasks=("REST", "LANG"), m=10, n=2, T=300,
                      sessions=("A",), seed=5)
    part = cohort_partition(spec)
    return [build_graph(fit_recording(normalize(r)[0], part), spec.tasks.index(r.task_id))
            for r in simulate_cohort(spec)]


def test_training_is_deterministic(two_task_graphs):
    cfg = TrainConfig(hidden=8, epochs=3)
    p1, h1, s1 = train(two_task_graphs, cfg)
    p2, h2, s2 = train(two_task_graphs, cfg)
    assert h1 == h2 and s1 == s2
    assert all(torch.equal(p1[k], p2[k]) for k in p1)
    assert [r["epoch"] for r in h1] == [1, 2, 3]


def test_separable_classes_are_learned(two_task_graphs):
    params, history, split = train(two_task_graphs, TrainConfig(hidden=16, epochs=200))
    ev = evaluate(params, [two_task_graphs[i] for i in split["test"]])
    assert ev["accuracy"] >= 0.95
    assert history[-1]["test_acc"] == ev["accuracy"]
    assert np.sum(ev["confusion"]) == len(split["test"])


def test_evaluate_constant_predictor(two_task_graphs):
    p = GnnParams.init(Architecture(two_task_graphs[0].node_features.shape[1], 2, 4, 1), 0)
    with torch.no_grad():
        p["head.W"].zero_()
        p["head.b"].copy_(torch.tensor([1.0, 0.0]))
    ev = evaluate(p, two_task_graphs)
    assert ev["accuracy"] == 0.5 and ev["per_class_accuracy"] == [1.0, 0.0]
    assert ev["confusion"] == [[20, 0], [20, 0]]


def test_classifier_estimator(two_task_graphs):
    y = np.array(["rest" if g.label == 0 else "lang" for g in two_task_graphs])
    clf = TaskGNNClassifier(hidden=8, epochs=20).fit(two_task_graphs, y)
    assert list(clf.classes_) == ["lang", "rest"]
    proba = clf.predict_proba(two_task_graphs)
    assert np.allclose(proba.sum(axis=1), 1.0)
    assert set(clf.predict(two_task_graphs)) <= {"lang", "rest"}
    assert clone(clf).get_params()["epochs"] == 20
