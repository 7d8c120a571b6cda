"""Networks: PointNet superpoint embedder, GRU + edge-conditioned context net, CRF baselines."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nncore as nn
from .spg import N_EDGE_FEATURES

N_POINT_FEATURES = 11  # normalized xyz, rgb, 5 geometric features
N_MINP = 40
N_P = 128
SCORE_GAIN = 0.1  # class-score layers start small so the first softmax is close to uniform

KINDS = ("context", "unary", "crf-ecc")


@dataclass
class ModelConfig:
    n_classes: int = 6
    kind: str = "context"  # context | unary | crf-ecc
    d_z: int = 32
    T: int = 10
    ecc: str = "vv"  # vv | mv
    mv_diagonal: bool = False
    input_gate: bool = True
    concat: bool = True
    edge_features: bool = True
    stn: bool = True
    n_p: int = N_P
    n_minp: int = N_MINP
    crf_iters: int = 10
    crf_tol: float = 1e-6
    stn_widths: tuple = (64, 64, 128)
    stn_head: tuple = (128, 64)
    pn_widths: tuple = (64, 64, 128, 128, 256)
    pn_head: tuple = (256, 64)
    theta_widths: tuple = (32, 128, 64)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.ecc not in ("vv", "mv"):
            raise ValueError(f"unknown ECC variant {self.ecc!r}")
        for k in ("stn_widths", "stn_head", "pn_widths", "pn_head", "theta_widths"):
            setattr(self, k, tuple(int(v) for v in getattr(self, k)))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @property
    def embed_dim(self) -> int:
        return self.n_classes if self.kind in ("unary", "crf-ecc") else self.d_z


# -- inputs ----------------------------------------------------------------
@dataclass
class SuperpointBatch:
    """Inputs for one forward pass over a (block-diagonal union of) SPG(s).

    ``points`` (B, n_p, 11) and ``diameters`` (B,) cover the embedded superpoints
    ``embedded`` (indices into the N nodes); the rest get zero embeddings.
    """

    n_nodes: int
    points: np.ndarray
    diameters: np.ndarray
    embedded: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    edge_features: np.ndarray = field(default_factory=lambda: np.zeros((0, N_EDGE_FEATURES)))
    labels: np.ndarray | None = None
    counts: np.ndarray | None = None


def sample_superpoint(rng, positions, colors, geof, members, centroid, n_p=N_P):
    """(n_p, 11) point features of one superpoint, sampled with replacement only if |S| < n_p."""
    members = np.asarray(members)
    if len(members) == 0:
        raise ValueError("cannot embed an empty superpoint")
    if len(members) >= n_p:
        pick = members[np.sort(rng.choice(len(members), n_p, replace=False))]
    else:
        pick = members[rng.integers(0, len(members), n_p)]
    # the radius comes from the full superpoint so it does not depend on the sample
    r = np.sqrt(((positions[members] - centroid) ** 2).sum(1)).max()
    p = positions[pick] - centroid
    if r > 0:
        p = p / r
    return np.concatenate([p, colors[pick], geof[pick]], axis=1)


# -- networks --------------------------------------------------------------
class PointNet(nn.Module):
    """Shared MLP -> max-pool -> concat diameter -> MLP, with a 2x2 XY spatial transformer."""

    def __init__(self, rng, cfg: ModelConfig, d_out: int):
        super().__init__()
        self.cfg = cfg
        d = N_POINT_FEATURES
        if cfg.stn:
            self.stn_pts = self.add_module("stn_pts", nn.MLP(rng, (d,) + cfg.stn_widths, last_act=True))
            # last STN layer starts at zero so the transform starts as the identity
            self.stn_head = self.add_module(
                "stn_head", nn.MLP(rng, (cfg.stn_widths[-1],) + cfg.stn_head + (4,), last_zero=True))
        self.pts = self.add_module("pts", nn.MLP(rng, (d,) + cfg.pn_widths, last_act=True))
        gain = SCORE_GAIN if d_out == cfg.n_classes and cfg.kind != "context" else 1.0
        self.head = self.add_module("head", nn.MLP(rng, (cfg.pn_widths[-1] + 1,) + cfg.pn_head + (d_out,),
                                                   last_gain=gain))

    def __call__(self, tape: nn.Tape, points: np.ndarray, diameters: np.ndarray, train: bool, taps=None):
        B, n, d = points.shape
        x = nn.Var(points, needs_grad=False)
        if self.cfg.stn:
            flat = tape.reshape(x, (B * n, d))
            s = self.stn_pts(tape, flat, train)
            s = tape.max_pool_over_set(tape.reshape(s, (B, n, -1)))
            phi = tape.reshape(self.stn_head(tape, s, train), (B, 2, 2))
            M = tape.add(phi, np.eye(2))
            xy = tape.einsum("bnj,bij->bni", tape.cols(x, 0, 2), M)
            x = tape.concat([xy, tape.cols(x, 2, d)], axis=2)
        h = self.pts(tape, tape.reshape(x, (B * n, d)), train)
        if taps is not None:
            taps["pre_pool"] = h.value.reshape(B, n, -1)
        g = tape.max_pool_over_set(tape.reshape(h, (B, n, -1)))
        g = tape.concat([g, nn.Var(np.asarray(diameters, dtype=np.float64).reshape(B, 1), False)], axis=1)
        return self.head(tape, g, train)


def theta_net(rng, d_in, d_out, widths=(32, 128, 64), gain=1.0):
    """Filter-generating MLP: ReLU after each hidden layer, batch norm after the third only, bias-free output."""
    return nn.MLP(rng, (d_in,) + tuple(widths) + (d_out,), bn_at={2}, last_bias=False, last_gain=gain)


class ContextNet(nn.Module):
    """GRU over superpoints with edge-conditioned messages, input gating and state concatenation."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_z
        d_f = N_EDGE_FEATURES if cfg.edge_features else 1
        if cfg.ecc == "vv" or cfg.mv_diagonal:
            theta_out = d
        else:
            theta_out = d * d
        self.theta = self.add_module("theta", theta_net(rng, d_f, theta_out, cfg.theta_widths))
        self.W_h = self.add_module("W_h", nn.Linear(rng, d, 3 * d))
        self.W_x = self.add_module("W_x", nn.Linear(rng, d, 3 * d))
        if cfg.input_gate:
            self.W_g = self.add_module("W_g", nn.Linear(rng, d, d))
        n_states = cfg.T + 1 if cfg.concat else 1
        self.W_o = self.add_module("W_o", nn.Linear(rng, n_states * d, cfg.n_classes, bias=False, gain=SCORE_GAIN))

    def filters(self, tape, edge_features, train):
        E = len(edge_features)
        F = edge_features if self.cfg.edge_features else np.ones((E, 1))
        th = self.theta(tape, nn.Var(F, needs_grad=False), train)
        d = self.cfg.d_z
        if self.cfg.ecc == "mv":
            th = tape.diag_embed(th) if self.cfg.mv_diagonal else tape.reshape(th, (E, d, d))
        return th

    def messages(self, tape, theta, h, edges, n_nodes):
        src, dst = edges[:, 0], edges[:, 1]
        hj = tape.gather_rows(h, src)
        msg = tape.einsum("eij,ej->ei", theta, hj) if self.cfg.ecc == "mv" else tape.mul(theta, hj)
        return tape.mean_over_set(msg, dst, n_nodes)

    def __call__(self, tape: nn.Tape, z, edges, edge_features, train: bool, taps=None):
        cfg = self.cfg
        d = cfg.d_z
        n = z.shape[0]
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        theta = self.filters(tape, edge_features, train) if len(edges) else None
        h = z
        states = [h]
        for _ in range(cfg.T):
            if theta is not None:
                m = self.messages(tape, theta, h, edges, n)
            else:
                m = nn.Var(np.zeros((n, d)), needs_grad=False)
            if taps is not None:
                taps.setdefault("messages", []).append(m.value)
            x = tape.mul(tape.sigmoid(self.W_g(tape, h)), m) if cfg.input_gate else m
            hh = tape.layer_norm(self.W_h(tape, h))
            xx = tape.layer_norm(self.W_x(tape, x))
            r = tape.sigmoid(tape.add(tape.cols(xx, 2 * d, 3 * d), tape.cols(hh, 2 * d, 3 * d)))
            u = tape.sigmoid(tape.add(tape.cols(xx, d, 2 * d), tape.cols(hh, d, 2 * d)))
            q = tape.tanh(tape.add(tape.cols(xx, 0, d), tape.mul(r, tape.cols(hh, 0, d))))
            # h' = (1 - u) q + u h
            h = tape.add(q, tape.mul(u, tape.sub(h, q)))
            states.append(h)
        out = tape.concat(states, axis=1) if cfg.concat else h
        return self.W_o(tape, out)


class CRFECC(nn.Module):
    """Mean-field iterations with an edge-conditioned K x K compatibility (differentiable)."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        K = cfg.n_classes
        d_f = N_EDGE_FEATURES if cfg.edge_features else 1
        self.theta = self.add_module("theta", theta_net(rng, d_f, K * K, cfg.theta_widths, SCORE_GAIN))

    def __call__(self, tape, U, edges, edge_features, train, taps=None):
        """Returns the final pre-softmax scores, so softmax of the output is Q."""
        cfg = self.cfg
        K = cfg.n_classes
        n = U.shape[0]
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        Q = tape.softmax(U)
        if len(edges) == 0:
            return U
        E = len(edges)
        F = edge_features if cfg.edge_features else np.ones((E, 1))
        theta = tape.reshape(self.theta(tape, nn.Var(F, False), train), (E, K, K))
        scores = U
        for it in range(cfg.crf_iters):
            Qj = tape.gather_rows(Q, edges[:, 0])
            Qhat = tape.sum_over_set(tape.einsum("eij,ej->ei", theta, Qj), edges[:, 1], n)
            scores = tape.sub(U, Qhat)
            Qn = tape.softmax(scores)
            delta = np.abs(Qn.value - Q.value).max()
            if taps is not None:
                taps.setdefault("Q", []).append(Qn.value)
            Q = Qn
            if delta < cfg.crf_tol:
                break
        return scores


class SegmentationModel(nn.Module):
    """Embedder plus the configured contextual stage (none for the unary baseline)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.embedder = self.add_module("embed", PointNet(rng, cfg, cfg.embed_dim))
        self.context = None
        if cfg.kind == "context":
            self.context = self.add_module("context", ContextNet(rng, cfg))
        elif cfg.kind == "crf-ecc":
            self.context = self.add_module("crf", CRFECC(rng, cfg))

    def embed(self, tape, batch: SuperpointBatch, train: bool, taps=None):
        emb = batch.embedded
        if len(emb):
            z = self.embedder(tape, batch.points, batch.diameters, train, taps)
            return tape.scatter_rows(z, emb, batch.n_nodes)
        return nn.Var(np.zeros((batch.n_nodes, self.cfg.embed_dim)), needs_grad=False)

    def forward(self, tape, batch: SuperpointBatch, train: bool, taps=None):
        z = self.embed(tape, batch, train, taps)
        if self.context is None:
            return z
        return self.context(tape, z, batch.edges, batch.edge_features, train, taps)

    def logits(self, batch: SuperpointBatch) -> np.ndarray:
        """Eval-mode forward without recording gradients."""
        return self.forward(nn.Tape(record=False), batch, train=False).value


# -- plain numpy mean field ------------------------------------------------
def mean_field(U, edges, kernel, iters=10, tol=1e-6, history=False):
    """Q_i <- softmax(U_i - sum_{(j,i)} kernel_e Q_j).

    ``kernel`` is (E, K, K) per-edge or one (K, K) matrix shared by all edges.
    Returns Q (and the list of iterates if ``history``).
    """
    U = np.asarray(U, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    Q = nn.softmax(U)
    hist = [Q]
    for _ in range(iters):
        Qj = Q[edges[:, 0]]
        msg = Qj @ kernel.T if kernel.ndim == 2 else np.einsum("eij,ej->ei", kernel, Qj)
        Qhat = np.zeros_like(U)
        np.add.at(Qhat, edges[:, 1], msg)
        Qn = nn.softmax(U - Qhat)
        done = np.abs(Qn - Q).max() < tol
        Q = Qn
        hist.append(Q)
        if done:
            break
    return (Q, hist) if history else Q


def potts_kernel(K, sigma_t):
    return sigma_t * (1.0 - np.eye(K))


def icrf(U, edges, sigma_t, iters=10, tol=1e-6):
    """Mean field with a constant Potts compatibility; returns argmax labels."""
    U = np.asarray(U, dtype=np.float64)
    Q = mean_field(U, edges, potts_kernel(U.shape[1], sigma_t), iters, tol)
    return np.argmax(Q, axis=1)


def with_overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **kw)
