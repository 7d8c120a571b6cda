"""Small reverse-mode autodiff core in float64: tape, layers, Adam, clipping, gradient checks, checkpoints."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    pass


class Var:
    """A value on the tape; ``grad`` is filled by :meth:`Tape.backward`."""

    __slots__ = ("value", "grad", "needs_grad")

    def __init__(self, value, needs_grad=True):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def _acc(self, g):
        if not self.needs_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self):
        return f"Var(shape={self.shape})"


class Param(Var):
    """Trainable tensor; gradients accumulate across tapes until ``zero_grad``."""

    __slots__ = ("name", "trainable")

    def __init__(self, value, name="", trainable=True):
        super().__init__(value, needs_grad=True)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def _acc(self, g):
        self.grad += g

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


def _check(cond, op, msg):
    if not cond:
        raise ShapeError(f"{op}: {msg}")


def _const(x):
    return x if isinstance(x, Var) else Var(x, needs_grad=False)


_track_decisions = False


class Tape:
    """Records operations; :meth:`backward` replays them in reverse order."""

    def __init__(self, record: bool = True):
        self._ops: list = []
        self.record = record
        # fingerprints of branch decisions (relu masks, max-pool winners), only while grad-checking
        self.decisions = [] if _track_decisions else None

    def _decide(self, arr):
        if self.decisions is not None:
            self.decisions.append(hash(np.ascontiguousarray(arr).tobytes()))

    def __len__(self):
        return len(self._ops)

    def _record(self, out, fn):
        if self.record:
            self._ops.append((out, fn))
        return out

    def backward(self, out: Var, seed=None):
        out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for node, fn in reversed(self._ops):
            if node.grad is not None:
                fn(node.grad)
        self._ops.clear()

    # -- elementwise ---------------------------------------------------
    def add(self, a, b):
        a, b = _const(a), _const(b)
        _check(a.shape[a.value.ndim - b.value.ndim:] == b.shape, "add", f"{a.shape} vs {b.shape}")
        out = Var(a.value + b.value)

        def back(g):
            a._acc(g)
            b._acc(g if g.shape == b.shape else g.reshape((-1,) + b.shape).sum(0))
        return self._record(out, back)

    def sub(self, a, b):
        a, b = _const(a), _const(b)
        _check(a.shape == b.shape, "sub", f"{a.shape} vs {b.shape}")
        out = Var(a.value - b.value)

        def back(g):
            a._acc(g)
            b._acc(-g)
        return self._record(out, back)

    def mul(self, a, b):
        a, b = _const(a), _const(b)
        _check(a.shape == b.shape, "mul", f"{a.shape} vs {b.shape}")
        out = Var(a.value * b.value)

        def back(g):
            a._acc(g * b.value)
            b._acc(g * a.value)
        return self._record(out, back)

    def scale(self, a, c: float, shift: float = 0.0):
        """c * a + shift for python scalars c, shift."""
        out = Var(c * a.value + shift)
        return self._record(out, lambda g: a._acc(c * g))

    def relu(self, a):
        mask = a.value > 0
        self._decide(mask)
        out = Var(np.where(mask, a.value, 0.0))
        return self._record(out, lambda g: a._acc(g * mask))

    def tanh(self, a):
        y = np.tanh(a.value)
        out = Var(y)
        return self._record(out, lambda g: a._acc(g * (1.0 - y * y)))

    def sigmoid(self, a):
        y = _sigmoid(a.value)
        out = Var(y)
        return self._record(out, lambda g: a._acc(g * y * (1.0 - y)))

    def softmax(self, a):
        y = softmax(a.value)
        out = Var(y)

        def back(g):
            a._acc(y * (g - (g * y).sum(-1, keepdims=True)))
        return self._record(out, back)

    # -- shape ---------------------------------------------------------
    def concat(self, xs, axis=-1):
        xs = [_const(x) for x in xs]
        ax = axis % xs[0].value.ndim
        for x in xs:
            _check(x.value.ndim == xs[0].value.ndim and
                   all(s == t for k, (s, t) in enumerate(zip(x.shape, xs[0].shape)) if k != ax),
                   "concat", f"incompatible shapes {[x.shape for x in xs]}")
        out = Var(np.concatenate([x.value for x in xs], axis=ax))
        bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

        def back(g):
            for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
                x._acc(np.take(g, np.arange(lo, hi), axis=ax))
        return self._record(out, back)

    def reshape(self, a, shape):
        out = Var(a.value.reshape(shape))
        return self._record(out, lambda g: a._acc(g.reshape(a.shape)))

    def getitem(self, a, key):
        out = Var(a.value[key])

        def back(g):
            full = np.zeros_like(a.value)
            np.add.at(full, key, g)
            a._acc(full)
        return self._record(out, back)

    def cols(self, a, lo, hi):
        """a[..., lo:hi]"""
        out = Var(a.value[..., lo:hi])

        def back(g):
            full = np.zeros_like(a.value)
            full[..., lo:hi] = g
            a._acc(full)
        return self._record(out, back)

    def scatter_rows(self, a, index, n_rows):
        """Rows of ``a`` placed at ``index`` in an (n_rows, ...) zero array (index unique)."""
        index = np.asarray(index, dtype=np.int64)
        _check(len(index) == a.shape[0], "scatter_rows", "one index per row required")
        val = np.zeros((n_rows,) + a.shape[1:])
        val[index] = a.value
        out = Var(val)
        return self._record(out, lambda g: a._acc(g[index]))

    def diag_embed(self, a):
        """(..., d) -> (..., d, d) diagonal matrices."""
        d = a.shape[-1]
        val = np.zeros(a.shape + (d,))
        idx = np.arange(d)
        val[..., idx, idx] = a.value
        out = Var(val)
        return self._record(out, lambda g: a._acc(g[..., idx, idx]))

    # -- linear algebra ------------------------------------------------
    def linear(self, x, W, b=None):
        """x @ W + b with x (n, i), W (i, o), b (o,)."""
        x = _const(x)
        _check(x.value.ndim == 2 and x.shape[1] == W.shape[0], "linear", f"x {x.shape} vs W {W.shape}")
        y = x.value @ W.value
        if b is not None:
            _check(b.shape == (W.shape[1],), "linear", f"bias {b.shape} vs W {W.shape}")
            y = y + b.value
        out = Var(y)

        def back(g):
            W._acc(x.value.T @ g)
            if b is not None:
                b._acc(g.sum(0))
            if x.needs_grad:
                x._acc(g @ W.value.T)
        return self._record(out, back)

    def einsum(self, spec, a, b):
        """Two-operand einsum; every input index must appear in the output or the other operand."""
        a, b = _const(a), _const(b)
        ins, o = spec.replace(" ", "").split("->")
        sa, sb = ins.split(",")
        out = Var(np.einsum(spec, a.value, b.value))

        def back(g):
            if a.needs_grad:
                a._acc(np.einsum(f"{o},{sb}->{sa}", g, b.value))
            if b.needs_grad:
                b._acc(np.einsum(f"{o},{sa}->{sb}", g, a.value))
        return self._record(out, back)

    # -- set / graph reductions ---------------------------------------
    def max_pool_over_set(self, x):
        """(S, n, C) -> (S, C); gradient to the first argmax of each (S, C) column."""
        _check(x.value.ndim == 3 and x.shape[1] > 0, "max_pool_over_set", f"expected (S, n, C), got {x.shape}")
        arg = np.argmax(x.value, axis=1)
        self._decide(arg)
        out = Var(np.take_along_axis(x.value, arg[:, None, :], axis=1)[:, 0, :])

        def back(g):
            full = np.zeros_like(x.value)
            np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
            x._acc(full)
        return self._record(out, back)

    def gather_rows(self, x, index):
        index = np.asarray(index, dtype=np.int64)
        out = Var(x.value[index])

        def back(g):
            full = np.zeros_like(x.value)
            np.add.at(full, index, g)
            x._acc(full)
        return self._record(out, back)

    def mean_over_set(self, x, segment, n_segments):
        """Mean of rows of ``x`` grouped by ``segment``; empty segments give zero rows."""
        segment = np.asarray(segment, dtype=np.int64)
        _check(len(segment) == x.shape[0], "mean_over_set", "one segment id per row required")
        cnt = np.bincount(segment, minlength=n_segments).astype(np.float64)
        inv = np.where(cnt > 0, 1.0 / np.maximum(cnt, 1.0), 0.0)
        s = np.zeros((n_segments,) + x.shape[1:])
        np.add.at(s, segment, x.value)
        shape = (-1,) + (1,) * (x.value.ndim - 1)
        out = Var(s * inv.reshape(shape))
        return self._record(out, lambda g: x._acc(g[segment] * inv[segment].reshape(shape)))

    def sum_over_set(self, x, segment, n_segments):
        segment = np.asarray(segment, dtype=np.int64)
        s = np.zeros((n_segments,) + x.shape[1:])
        np.add.at(s, segment, x.value)
        out = Var(s)
        return self._record(out, lambda g: x._acc(g[segment]))

    # -- normalization -------------------------------------------------
    def batch_norm(self, x, bn: "BatchNorm", train: bool):
        """Per-feature normalization over the rows of a 2-D input."""
        _check(x.value.ndim == 2 and x.shape[1] == bn.gamma.shape[0], "batch_norm", f"x {x.shape} vs {bn.gamma.shape}")
        if train:
            mean = x.value.mean(0)
            var = x.value.var(0)
            bn.running_mean = BN_MOMENTUM * bn.running_mean + (1 - BN_MOMENTUM) * mean
            bn.running_var = BN_MOMENTUM * bn.running_var + (1 - BN_MOMENTUM) * var
        else:
            mean, var = bn.running_mean, bn.running_var
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x.value - mean) * inv
        out = Var(xhat * bn.gamma.value + bn.beta.value)

        def back(g):
            bn.gamma._acc((g * xhat).sum(0))
            bn.beta._acc(g.sum(0))
            if not x.needs_grad:
                return
            gx = g * bn.gamma.value
            if train:
                gx = inv * (gx - gx.mean(0) - xhat * (gx * xhat).mean(0))
            else:
                gx = gx * inv
            x._acc(gx)
        return self._record(out, back)

    def layer_norm(self, a, eps=LN_EPS):
        """(a - mean(a)) / (std(a) + eps) over the last axis, population std, no affine."""
        c = a.value - a.value.mean(-1, keepdims=True)
        s = np.sqrt((c * c).mean(-1, keepdims=True))
        d = s + eps
        out = Var(c / d)
        n = a.shape[-1]

        def back(g):
            safe_s = np.where(s > 0, s, 1.0)
            coef = np.where(s > 0, (g * c).sum(-1, keepdims=True) / (d * d * n * safe_s), 0.0)
            gc = g / d - coef * c
            a._acc(gc - gc.mean(-1, keepdims=True))
        return self._record(out, back)

    # -- losses --------------------------------------------------------
    def sum(self, a):
        out = Var(a.value.sum())
        return self._record(out, lambda g: a._acc(np.full(a.shape, float(g))))

    def mse(self, a, target):
        diff = a.value - np.asarray(target)
        out = Var(np.mean(diff * diff))
        return self._record(out, lambda g: a._acc(g * 2.0 * diff / diff.size))

    def cross_entropy(self, logits, targets, mask=None):
        """Mean negative log-likelihood over rows selected by ``mask``."""
        targets = np.asarray(targets, dtype=np.int64)
        m = np.ones(len(targets), bool) if mask is None else np.asarray(mask, bool)
        cnt = int(m.sum())
        _check(cnt > 0, "cross_entropy", "no rows selected")
        z = logits.value - logits.value.max(-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
        rows = np.flatnonzero(m)
        out = Var(-logp[rows, targets[rows]].sum() / cnt)

        def back(g):
            p = np.exp(logp)
            full = np.zeros_like(p)
            full[rows] = p[rows]
            full[rows, targets[rows]] -= 1.0
            logits._acc(g * full / cnt)
        return self._record(out, back)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    return _sigmoid(np.asarray(x, dtype=np.float64))


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(-1, keepdims=True))
    return z / z.sum(-1, keepdims=True)


# -- parameters and modules ------------------------------------------------
def kaiming_uniform(rng, fan_in, shape):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Holds named parameters; subclasses register them via ``self.param``."""

    def __init__(self):
        self._params: dict[str, Param] = {}
        self._buffers: dict[str, object] = {}

    def param(self, name, value, trainable=True):
        p = Param(value, name, trainable)
        self._params[name] = p
        return p

    def add_module(self, prefix, mod: "Module"):
        for k, p in mod.named_params().items():
            p.name = f"{prefix}.{k}"
            self._params[p.name] = p
        for k, b in mod._buffers.items():
            self._buffers[f"{prefix}.{k}"] = b
        return mod

    def named_params(self) -> dict:
        return dict(self._params)

    def params(self, trainable_only=True):
        return [p for p in self._params.values() if p.trainable or not trainable_only]

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def state(self) -> dict:
        """All parameter values plus batch-norm running statistics."""
        st = {k: p.value for k, p in self._params.items()}
        for k, bn in self._buffers.items():
            st[k + ".running_mean"] = bn.running_mean
            st[k + ".running_var"] = bn.running_var
        return st

    def load_state(self, st: dict):
        for k, p in self._params.items():
            if k not in st or st[k].shape != p.value.shape:
                raise ValueError(f"checkpoint missing or misshaped parameter {k}")
            p.value = np.array(st[k], dtype=np.float64)
        for k, bn in self._buffers.items():
            bn.running_mean = np.array(st[k + ".running_mean"], dtype=np.float64)
            bn.running_var = np.array(st[k + ".running_var"], dtype=np.float64)


class BatchNorm(Module):
    def __init__(self, dim):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(dim))
        self.beta = self.param("beta", np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self._buffers[""] = self

    def add_to(self, owner: Module, prefix: str):
        owner.add_module(prefix, self)
        owner._buffers[prefix] = owner._buffers.pop(f"{prefix}.")
        return self


class Linear(Module):
    def __init__(self, rng, n_in, n_out, bias=True, zero=False, gain=1.0):
        super().__init__()
        w = np.zeros((n_in, n_out)) if zero else gain * kaiming_uniform(rng, n_in, (n_in, n_out))
        self.W = self.param("W", w)
        self.b = self.param("b", np.zeros(n_out)) if bias else None

    def __call__(self, tape: Tape, x):
        return tape.linear(x, self.W, self.b)


class MLP(Module):
    """Stack of linear layers; ``bn_at`` lists hidden layers followed by batch norm, all hidden use ReLU.

    ``last_act`` applies batch norm + ReLU after the final layer too (a shared-MLP block).
    """

    def __init__(self, rng, widths, bn_at=None, last_bias=True, last_act=False, last_zero=False, last_gain=1.0):
        super().__init__()
        self.layers = []
        self.bns = {}
        self.last_act = last_act
        n = len(widths) - 1
        bn_at = set(range(n)) if bn_at is None else set(bn_at)
        for k in range(n):
            last = k == n - 1
            has_bn = k in bn_at and (not last or last_act)
            # a bias in front of batch norm is cancelled by the mean subtraction
            bias = not has_bn and (last_bias or not last)
            lin = Linear(rng, widths[k], widths[k + 1], bias=bias, zero=(last and last_zero),
                         gain=last_gain if last else 1.0)
            self.add_module(f"l{k}", lin)
            self.layers.append(lin)
            if has_bn:
                self.bns[k] = BatchNorm(widths[k + 1]).add_to(self, f"bn{k}")

    def __call__(self, tape: Tape, x, train: bool):
        n = len(self.layers)
        for k, lin in enumerate(self.layers):
            x = lin(tape, x)
            if k < n - 1 or self.last_act:
                if k in self.bns:
                    x = tape.batch_norm(x, self.bns[k], train)
                x = tape.relu(x)
        return x


# -- optimization ----------------------------------------------------------
def clip_gradients(grads, bound=1.0):
    """Element-wise clamp into [-bound, bound]; accepts arrays or Params (in place)."""
    out = []
    for g in grads:
        if isinstance(g, Param):
            np.clip(g.grad, -bound, bound, out=g.grad)
            out.append(g.grad)
        else:
            out.append(np.clip(g, -bound, bound))
    return out


class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads=None):
        grads = [p.grad for p in self.params] if grads is None else list(grads)
        for p, g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for {p.name}; update rejected")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, lr, state=None, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional form: returns (new_params, state) for plain arrays."""
    if state is None:
        state = {"t": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient; update rejected")
    t = state["t"] + 1
    new, ms, vs = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        new.append(p - lr * mh / (np.sqrt(vh) + eps))
        ms.append(m)
        vs.append(v)
    return new, {"t": t, "m": ms, "v": vs}


# -- gradient checking -----------------------------------------------------
def rel_error(a, n):
    return np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-12)


def grad_check(loss_fn, params, h=1e-5, max_per_param=None, rng=None, max_resample=20):
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn()`` must build a fresh tape and return ``(tape, loss_var)``.  Frozen
    parameters are skipped.  A coordinate whose +-h evaluations take a different
    branch of a relu or max-pool than the unperturbed pass straddles a kink, where
    finite differences are meaningless; it is replaced by another coordinate of
    the same tensor (when sampling) or skipped.  Returns ``(max_error, per_param_errors)``.
    """
    global _track_decisions
    params = [p for p in params if p.trainable]
    for p in params:
        p.zero_grad()
    _track_decisions = True
    try:
        tape, loss = loss_fn()
        base = list(tape.decisions)
        tape.backward(loss)
        analytic = {p.name: p.grad.copy() for p in params}
        rng = rng or np.random.default_rng(0)
        report = {}
        worst = 0.0
        for p in params:
            flat = p.value.reshape(-1)
            if max_per_param is not None and flat.size > max_per_param:
                candidates = list(rng.permutation(flat.size))
                want = max_per_param
            else:
                candidates = list(range(flat.size))
                want = flat.size
            errs = []
            kinks = 0
            for k in candidates:
                if len(errs) >= want or kinks > max_resample:
                    break
                old = flat[k]
                flat[k] = old + h
                tp, lp = loss_fn()
                flat[k] = old - h
                tm, lm = loss_fn()
                flat[k] = old
                if tp.decisions != base or tm.decisions != base:
                    kinks += 1
                    continue
                num = (float(lp.value) - float(lm.value)) / (2 * h)
                errs.append(rel_error(analytic[p.name].reshape(-1)[k], num))
            e = float(max(errs)) if errs else 0.0
            report[p.name] = e
            worst = max(worst, e)
    finally:
        _track_decisions = False
    for p in params:
        p.zero_grad()
    return worst, report


# -- checkpoints -----------------------------------------------------------
MAGIC = b"SPGCKPT1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    """Magic, u64 manifest length, JSON manifest, then little-endian float64 payload."""
    manifest = {"version": CHECKPOINT_VERSION, "meta": meta or {}, "tensors": []}
    offset = 0
    chunks = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        manifest["tensors"].append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.reshape(-1))
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c.tobytes())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + hlen])
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {manifest.get('version')} unsupported")
    payload = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    arrays = {}
    for t in manifest["tensors"]:
        size = int(np.prod(t["shape"], dtype=np.int64))
        arrays[t["name"]] = payload[t["offset"]:t["offset"] + size].reshape(t["shape"]).astype(np.float64)
    return arrays, manifest["meta"]
