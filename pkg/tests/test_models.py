import math

import numpy as np
import pytest

from spgseg import gradcheck, models
from spgseg import nncore as nn
from spgseg.models import ModelConfig, SegmentationModel, SuperpointBatch

SMALL = dict(n_p=16, stn_widths=(8, 8, 16), stn_head=(16, 8), pn_widths=(8, 8, 16, 16, 32), pn_head=(32, 16))


def batch_for(n_nodes, edges, rng, n_p=16, embedded=None, n_feat=13):
    emb = np.arange(n_nodes) if embedded is None else np.asarray(embedded)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return SuperpointBatch(n_nodes, rng.normal(scale=0.5, size=(len(emb), n_p, 11)), rng.uniform(0.5, 2, len(emb)),
                           emb, edges, rng.normal(size=(len(edges), n_feat)))


def perturbed(model, rng, scale=0.1):
    for p in model.params():
        p.value = p.value + rng.normal(scale=scale, size=p.shape)
    return model


# -- embedder ----------------------------------------------------------------
def test_small_superpoints_get_zero_embedding():
    rng = np.random.default_rng(0)
    model = SegmentationModel(ModelConfig(kind="unary", **SMALL))
    batch = batch_for(3, [], rng, embedded=[0, 2])  # node 1 is below the point threshold
    out = model.logits(batch)
    assert out.shape == (3, 6)
    np.testing.assert_array_equal(out[1], 0)
    assert np.all(out[[0, 2]] != 0)
    np.testing.assert_allclose(nn.softmax(out[1:2]), 1 / 6)


def test_sample_superpoint_shapes_and_unit_ball():
    rng = np.random.default_rng(1)
    pos = rng.uniform(size=(300, 3)) * 5
    members = np.arange(0, 300, 2)
    c = pos[members].mean(0)
    x = models.sample_superpoint(rng, pos, rng.uniform(size=(300, 3)), rng.uniform(size=(300, 5)), members, c, 128)
    assert x.shape == (128, 11)
    assert np.linalg.norm(x[:, :3], axis=1).max() <= 1 + 1e-12
    # without replacement when the superpoint is big enough
    assert len(np.unique(x[:, :3], axis=0)) == 128
    few = models.sample_superpoint(rng, pos, np.zeros((300, 3)), np.zeros((300, 5)), members[:5], c, 128)
    assert few.shape == (128, 11)
    with pytest.raises(ValueError):
        models.sample_superpoint(rng, pos, pos, pos, [], c)


def test_pointnet_permutation_invariance():
    rng = np.random.default_rng(2)
    model = perturbed(SegmentationModel(ModelConfig(kind="unary", **SMALL)), rng)
    batch = batch_for(2, [], rng)
    ref = model.logits(batch)
    batch.points = batch.points[:, rng.permutation(16)]
    np.testing.assert_allclose(model.logits(batch), ref, atol=1e-12, rtol=0)


def test_scaling_changes_only_the_diameter_path():
    rng = np.random.default_rng(3)
    pos = rng.uniform(size=(200, 3))
    col, geof = rng.uniform(size=(200, 3)), rng.uniform(size=(200, 5))
    members = np.arange(200)
    model = perturbed(SegmentationModel(ModelConfig(kind="unary", **SMALL)), rng)
    outs, taps = [], []
    for s in (1.0, 2.0):
        p = pos * s
        x = models.sample_superpoint(np.random.default_rng(0), p, col, geof, members, p.mean(0), 16)
        b = SuperpointBatch(1, x[None], np.array([np.linalg.norm(np.ptp(p, axis=0))]), np.array([0]))
        tp = {}
        outs.append(model.forward(nn.Tape(record=False), b, train=False, taps=tp).value)
        taps.append(tp["pre_pool"])
    np.testing.assert_allclose(taps[0], taps[1], atol=1e-12)
    assert not np.allclose(outs[0], outs[1])


def test_stn_starts_as_identity():
    model = SegmentationModel(ModelConfig(**SMALL))
    last = model.embedder.stn_head.layers[-1]
    np.testing.assert_array_equal(last.W.value, 0)
    np.testing.assert_array_equal(last.b.value, 0)


# -- context network ---------------------------------------------------------
def test_zero_weights_halve_the_state():
    cfg = ModelConfig(n_classes=4, d_z=4, T=5, **SMALL)
    model = SegmentationModel(cfg)
    ctx = model.context
    for p in ctx.params():
        p.value = np.zeros_like(p.value)
    # read out only the last state
    ctx.W_o.W.value[-4:] = np.eye(4)
    z = np.random.default_rng(0).normal(size=(3, 4))
    edges = np.array([[0, 1], [1, 0], [1, 2]])
    out = ctx(nn.Tape(record=False), nn.Var(z), edges, np.ones((3, 13)), train=False)
    np.testing.assert_allclose(out.value, z / 2 ** 5, atol=1e-15)


def test_isolated_node_ignores_the_rest():
    rng = np.random.default_rng(4)
    model = perturbed(SegmentationModel(ModelConfig(**SMALL)), rng)
    batch = batch_for(4, [[0, 1], [1, 0], [1, 2], [2, 1]], rng)
    taps = {}
    ref = model.forward(nn.Tape(record=False), batch, train=False, taps=taps).value
    assert all(np.all(m[3] == 0) for m in taps["messages"])
    batch.points[:3] += 1.0
    out = model.logits(batch)
    np.testing.assert_array_equal(out[3], ref[3])
    assert not np.allclose(out[:3], ref[:3])


def _relu(v):
    return [max(0.0, x) for x in v]


def _affine(W, b, v):
    out = [sum(v[i] * W[i][o] for i in range(len(v))) for o in range(len(W[0]))]
    return out if b is None else [o + bo for o, bo in zip(out, b)]


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def _layer_norm(v, eps=1e-5):
    m = sum(v) / len(v)
    s = math.sqrt(sum((x - m) ** 2 for x in v) / len(v))
    return [(x - m) / (s + eps) for x in v]


def scalar_context(P, z, edges, F, T, d, bn):
    """Element-by-element re-implementation of the gated GRU with edge-conditioned messages."""
    def get(name):
        return P[name].tolist() if name in P else None

    def theta(f):
        h = _relu(_affine(get("theta.l0.W"), get("theta.l0.b"), f))
        h = _relu(_affine(get("theta.l1.W"), get("theta.l1.b"), h))
        h = _affine(get("theta.l2.W"), None, h)
        mean, var = bn
        h = [(x - mu) / math.sqrt(vv + 1e-5) * g + b
             for x, mu, vv, g, b in zip(h, mean, var, get("theta.bn2.gamma"), get("theta.bn2.beta"))]
        return _affine(get("theta.l3.W"), None, _relu(h))

    filters = [theta(f) for f in F]
    n = len(z)
    h = [list(r) for r in z]
    states = [h]
    for _ in range(T):
        new = []
        for i in range(n):
            ins = [e for e, (s, t) in enumerate(edges) if t == i]
            m = [0.0] * d
            for e in ins:
                j = edges[e][0]
                m = [m[k] + filters[e][k] * h[j][k] / len(ins) for k in range(d)]
            gate = [_sig(a) for a in _affine(get("W_g.W"), get("W_g.b"), h[i])]
            x = [g * mm for g, mm in zip(gate, m)]
            hh = _layer_norm(_affine(get("W_h.W"), get("W_h.b"), h[i]))
            xx = _layer_norm(_affine(get("W_x.W"), get("W_x.b"), x))
            r = [_sig(xx[2 * d + k] + hh[2 * d + k]) for k in range(d)]
            u = [_sig(xx[d + k] + hh[d + k]) for k in range(d)]
            q = [math.tanh(xx[k] + r[k] * hh[k]) for k in range(d)]
            new.append([(1 - u[k]) * q[k] + u[k] * h[i][k] for k in range(d)])
        h = new
        states.append(h)
    cat = [sum((s[i] for s in states), []) for i in range(n)]
    return [_affine(get("W_o.W"), None, c) for c in cat]


def test_two_node_context_matches_scalar_oracle():
    cfg = ModelConfig(n_classes=3, d_z=2, T=3, theta_widths=(3, 4, 2), **SMALL)
    model = perturbed(SegmentationModel(cfg, seed=1), np.random.default_rng(5), scale=0.3)
    ctx = model.context
    bn = ctx.theta.bns[2]
    bn.running_mean = np.array([0.1, -0.2])
    bn.running_var = np.array([0.5, 1.5])
    rng = np.random.default_rng(6)
    z = rng.normal(size=(2, 2))
    edges = [(0, 1), (1, 0)]
    F = rng.normal(size=(2, 13))
    got = ctx(nn.Tape(record=False), nn.Var(z), np.array(edges), F, train=False).value
    P = {k[len("context."):]: v for k, v in model.state().items() if k.startswith("context.")}
    want = scalar_context(P, z.tolist(), edges, F.tolist(), cfg.T, cfg.d_z,
                          (bn.running_mean.tolist(), bn.running_var.tolist()))
    np.testing.assert_allclose(got, want, atol=1e-9, rtol=0)


def test_mv_diagonal_equals_vv_bitwise():
    rng = np.random.default_rng(7)
    batch = batch_for(5, [[0, 1], [1, 0], [1, 2], [2, 1], [3, 1], [4, 3], [3, 4]], rng)
    outs, msgs = [], []
    for cfg in (ModelConfig(**SMALL), ModelConfig(ecc="mv", mv_diagonal=True, **SMALL)):
        model = SegmentationModel(cfg, seed=3)
        taps = {}
        outs.append(model.forward(nn.Tape(record=False), batch, train=False, taps=taps).value)
        msgs.append(taps["messages"])
    assert outs[0].tobytes() == outs[1].tobytes()
    for a, b in zip(*msgs):
        assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("ecc", ["vv", "mv"])
def test_relabeling_equivariance(ecc):
    rng = np.random.default_rng(8)
    model = perturbed(SegmentationModel(ModelConfig(ecc=ecc, **SMALL)), rng)
    edges = np.array([[0, 1], [1, 0], [1, 2], [2, 1], [2, 3], [3, 2], [0, 3]])
    batch = batch_for(4, edges, rng)
    ref = model.logits(batch)
    perm = rng.permutation(4)  # new id of old node k is perm[k]
    inv = np.argsort(perm)
    moved = SuperpointBatch(4, batch.points[inv], batch.diameters[inv], np.arange(4), perm[edges], batch.edge_features)
    np.testing.assert_allclose(model.logits(moved)[perm], ref, atol=1e-12)


def test_ablation_paths_are_structural():
    base = dict(**SMALL)
    names = set(SegmentationModel(ModelConfig(**base)).named_params())
    assert "context.W_g.W" in names
    assert "context.W_g.W" not in SegmentationModel(ModelConfig(input_gate=False, **base)).named_params()
    no_concat = SegmentationModel(ModelConfig(concat=False, **base)).context
    assert no_concat.W_o.W.shape == (32, 6)
    assert SegmentationModel(ModelConfig(**base)).context.W_o.W.shape == (11 * 32, 6)
    no_edge = SegmentationModel(ModelConfig(edge_features=False, **base)).context
    assert no_edge.theta.layers[0].W.shape[0] == 1
    mv = SegmentationModel(ModelConfig(ecc="mv", **base)).context
    assert mv.theta.layers[-1].W.shape[1] == 32 * 32
    assert mv.theta.layers[-1].b is None
    unary = SegmentationModel(ModelConfig(kind="unary", **base))
    assert unary.context is None and unary.embedder.head.layers[-1].W.shape[1] == 6
    with pytest.raises(ValueError):
        ModelConfig(kind="lstm")


def test_no_edge_features_ignores_their_values():
    rng = np.random.default_rng(9)
    model = perturbed(SegmentationModel(ModelConfig(edge_features=False, **SMALL)), rng)
    batch = batch_for(3, [[0, 1], [1, 0], [1, 2]], rng)
    ref = model.logits(batch)
    batch.edge_features = rng.normal(size=batch.edge_features.shape)
    np.testing.assert_array_equal(model.logits(batch), ref)


@pytest.mark.parametrize("cfg", [ModelConfig(n_p=16), ModelConfig(n_p=16, ecc="mv"),
                                 ModelConfig(n_p=16, kind="crf-ecc")], ids=["vv", "mv", "crf"])
def test_full_model_gradients(cfg):
    err, _ = gradcheck.check_model(cfg, np.random.default_rng(0))
    assert err < 1e-4


# -- CRF baselines -------------------------------------------------------------
def crf_model(rng):
    model = SegmentationModel(ModelConfig(kind="crf-ecc", n_classes=3, crf_iters=50, **SMALL))
    return perturbed(model, rng)


def test_crf_zero_compatibility_is_softmax_fixed_point():
    rng = np.random.default_rng(10)
    model = crf_model(rng)
    model.context.theta.layers[-1].W.value[:] = 0
    U = nn.Var(rng.normal(size=(4, 3)))
    taps = {}
    edges = np.array([[0, 1], [1, 0], [2, 3], [3, 2]])
    out = model.context(nn.Tape(record=False), U, edges, rng.normal(size=(4, 13)), False, taps)
    np.testing.assert_array_equal(out.value, U.value)
    np.testing.assert_array_equal(taps["Q"][0], nn.softmax(U.value))
    assert len(taps["Q"]) == 1


def test_crf_rows_normalized_and_converges():
    rng = np.random.default_rng(11)
    model = crf_model(rng)
    edges = np.array([[0, 1], [1, 0], [1, 2], [2, 1], [0, 2]])
    taps = {}
    model.context(nn.Tape(record=False), nn.Var(rng.normal(size=(3, 3))), edges, rng.normal(size=(5, 13)), False, taps)
    Q = taps["Q"]
    assert all(np.abs(q.sum(1) - 1).max() < 1e-12 for q in Q)
    assert len(Q) < 50
    assert np.abs(Q[-1] - Q[-2]).max() < 1e-6


def test_crf_module_matches_numpy_mean_field():
    rng = np.random.default_rng(12)
    model = crf_model(rng)
    edges = np.array([[0, 1], [1, 0], [1, 2], [2, 1]])
    F = rng.normal(size=(4, 13))
    U = rng.normal(size=(3, 3))
    kernel = model.context.theta(nn.Tape(record=False), nn.Var(F), False).value.reshape(4, 3, 3)
    scores = model.context(nn.Tape(record=False), nn.Var(U), edges, F, False).value
    np.testing.assert_allclose(nn.softmax(scores), models.mean_field(U, edges, kernel, iters=50), atol=1e-12)


def test_mean_field_two_node_hand_computation():
    U = np.array([[1.0, 0.0], [0.0, 0.5]])
    kernel = np.array([[0.0, 1.0], [2.0, 0.0]])
    Q, hist = models.mean_field(U, [[0, 1], [1, 0]], kernel, iters=2, tol=0.0, history=True)

    def sm(a, b):
        return [math.exp(a) / (math.exp(a) + math.exp(b)), math.exp(b) / (math.exp(a) + math.exp(b))]
    q0, q1 = sm(1.0, 0.0), sm(0.0, 0.5)
    for _ in range(2):
        m0 = [q1[1], 2 * q1[0]]  # kernel @ Q_1
        m1 = [q0[1], 2 * q0[0]]
        q0, q1 = sm(1.0 - m0[0], 0.0 - m0[1]), sm(0.0 - m1[0], 0.5 - m1[1])
    np.testing.assert_allclose(Q, [q0, q1], atol=1e-15)
    assert len(hist) == 3


def test_icrf_cases():
    rng = np.random.default_rng(13)
    U = rng.normal(size=(6, 4))
    edges = np.array([[i, i + 1] for i in range(5)] + [[i + 1, i] for i in range(5)])
    np.testing.assert_array_equal(models.icrf(U, edges, 0.0), U.argmax(1))
    np.testing.assert_array_equal(models.icrf(U + 3.7, edges, 1.5), models.icrf(U, edges, 1.5))
    pair = np.array([[5.0, 0.0], [0.0, 0.3]])
    both = np.array([[0, 1], [1, 0]])
    np.testing.assert_array_equal(models.icrf(pair, both, 0.1), [0, 1])
    np.testing.assert_array_equal(models.icrf(pair, both, 3.0), [0, 0])


def test_config_roundtrip():
    cfg = ModelConfig(kind="crf-ecc", ecc="mv", T=4)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.embed_dim == 6 and ModelConfig().embed_dim == 32
