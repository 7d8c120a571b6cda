"""Finite-difference checks of every layer and of the full model on a toy superpoint graph."""

from __future__ import annotations

import numpy as np

from . import nncore as nn
from .models import ModelConfig, SegmentationModel, SuperpointBatch


def _op_cases():
    seg = np.array([0, 0, 2, 2, 2])
    tgt = np.array([0, 2, 1, 1])
    sel = np.array([1, 1, 0, 1], bool)
    return {
        "linear": ([(4, 3), (3, 5), (5,)], lambda t, x, W, b: t.linear(x, W, b)),
        "relu": ([(4, 3)], lambda t, x: t.relu(x)),
        "tanh": ([(4, 3)], lambda t, x: t.tanh(x)),
        "sigmoid": ([(4, 3)], lambda t, x: t.sigmoid(x)),
        "softmax": ([(4, 3)], lambda t, x: t.softmax(x)),
        "elementwise_mul": ([(4, 3), (4, 3)], lambda t, x, y: t.mul(x, y)),
        "concat": ([(4, 3), (4, 2)], lambda t, x, y: t.concat([x, y], axis=1)),
        "max_pool_over_set": ([(2, 5, 3)], lambda t, x: t.max_pool_over_set(x)),
        "mean_over_set": ([(5, 3)], lambda t, x: t.mean_over_set(x, seg, 4)),
        "batch_norm_train": ([(6, 3)], "bn_train"),
        "batch_norm_eval": ([(6, 3)], "bn_eval"),
        "layer_norm": ([(4, 6)], lambda t, x: t.layer_norm(x)),
        "einsum_matvec": ([(3, 2, 2), (3, 2)], lambda t, A, x: t.einsum("eij,ej->ei", A, x)),
        "cross_entropy": ([(4, 3)], lambda t, x: t.cross_entropy(x, tgt, sel)),
    }


def check_op(name, shapes, build, rng, h=1e-5):
    """Max relative error of one op under a random linear read-out of its output."""
    params = [nn.Param(rng.normal(size=s), f"{name}.{i}") for i, s in enumerate(shapes)]
    extra = []
    if isinstance(build, str):
        bn = nn.BatchNorm(shapes[0][1])
        bn.gamma.value = rng.normal(size=bn.gamma.shape)
        bn.beta.value = rng.normal(size=bn.beta.shape)
        bn.running_mean = rng.normal(size=bn.gamma.shape)
        bn.running_var = rng.uniform(0.5, 2.0, size=bn.gamma.shape)
        train = build == "bn_train"
        extra = [bn.gamma, bn.beta]

        def build(t, x):
            return t.batch_norm(x, bn, train)
    weights = {}

    def loss_fn():
        t = nn.Tape()
        y = build(t, *params)
        if "w" not in weights:
            weights["w"] = rng.normal(size=y.shape)
        return t, t.sum(t.mul(y, nn.Var(weights["w"], needs_grad=False)))
    err, _ = nn.grad_check(loss_fn, params + extra, h=h)
    return err


def toy_model_batch(rng, n_p=16):
    """Three superpoints in a chain, all embedded, with random normalized edge features."""
    edges = np.array([[0, 1], [1, 0], [1, 2], [2, 1]])
    return SuperpointBatch(
        n_nodes=3,
        points=rng.normal(scale=0.5, size=(3, n_p, 11)),
        diameters=np.array([1.0, 2.0, 0.5]),
        embedded=np.arange(3),
        edges=edges,
        edge_features=rng.normal(size=(4, 13)),
        labels=np.array([0, 3, 5]),
        counts=np.array([100, 100, 100]),
    )


def check_model(cfg: ModelConfig, rng, seed=0, h=1e-5, max_per_param=8):
    """Full embedder + context model on the 3-node toy batch.

    Batch norm runs in inference mode so the loss is a fixed function of the parameters.
    """
    model = SegmentationModel(cfg, seed=seed)
    # move every parameter off its initial value so no gradient is structurally zero
    for p in model.params():
        p.value = p.value + rng.normal(scale=0.05, size=p.shape)
    batch = toy_model_batch(rng, cfg.n_p)

    def loss_fn():
        t = nn.Tape()
        y = model.forward(t, batch, train=False)
        return t, t.cross_entropy(y, batch.labels)
    return nn.grad_check(loss_fn, model.params(), h=h, max_per_param=max_per_param, rng=rng)


def run_all(seed=0):
    rng = np.random.default_rng(seed)
    lines = []
    worst_ops = 0.0
    for name, (shapes, build) in _op_cases().items():
        e = check_op(name, shapes, build, rng)
        worst_ops = max(worst_ops, e)
        lines.append(f"op {name:<20s} {e:.3e}")
    worst_model = 0.0
    for label, cfg in (("gru-ecc-vv", ModelConfig(n_p=16)), ("gru-ecc-mv", ModelConfig(n_p=16, ecc="mv")),
                       ("crf-ecc", ModelConfig(n_p=16, kind="crf-ecc"))):
        e, _ = check_model(cfg, rng, seed)
        worst_model = max(worst_model, e)
        lines.append(f"model {label:<17s} {e:.3e}")
    return worst_ops, worst_model, lines
