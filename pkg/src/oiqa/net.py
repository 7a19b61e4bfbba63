"""Layered scoring networks with reverse-mode gradients.

A model is an ordered list of :class:`LayerSpec` plus a flat parameter
dict; ``forward`` maps a C x H x W image in [0, 1] to a scalar quality
score and ``backward`` returns exact gradients w.r.t. both the parameters
(for training) and the input (for attacks).  All math is float64.

Layer kinds are registered in ``LAYER_KINDS``; the Fourier-domain
orthogonal block registers itself from :mod:`oiqa.cayley`.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, DataError, ShapeError, TrainingError
from .tensor import check_finite

ACTIVATION_KINDS = ("relu", "elu", "silu", "gelu")


def conv_out_size(s_in, ker, pad, stride, dilation):
    """Output size of a conv axis: floor((s_in + 2p - (k-1)d - 1)/stride + 1).

    Equivalently eta*s_in - mu with eta = 1/stride, up to the floor.
    """
    for name, v in (("s_in", s_in), ("ker", ker), ("stride", stride), ("dilation", dilation)):
        if int(v) != v or v < 1:
            raise ConfigurationError(f"conv_out_size: {name} must be a positive integer, got {v}")
    if int(pad) != pad or pad < 0:
        raise ConfigurationError(f"conv_out_size: pad must be a non-negative integer, got {pad}")
    s_out = (s_in + 2 * pad - (ker - 1) * dilation - 1) // stride + 1
    if s_out < 1:
        raise ConfigurationError(
            f"conv output size {s_out} < 1 for s_in={s_in}, ker={ker}, pad={pad}, "
            f"stride={stride}, dilation={dilation}"
        )
    return int(s_out)


@dataclass
class LayerSpec:
    """One layer: a kind tag, kind-specific hyperparams, owned parameter ids."""

    kind: str
    hyper: dict = field(default_factory=dict)
    param_ids: list = field(default_factory=list)
    fresh: bool = False  # not pre-trained (robust-block internals, new heads)

    def copy(self):
        return LayerSpec(self.kind, dict(self.hyper), list(self.param_ids), self.fresh)


@dataclass
class ModelGraph:
    """Ordered layers + parameters; scores one image at a time."""

    layers: list
    params: dict
    input_shape: tuple
    score_range: tuple = None  # (lo, hi), set after training
    masks: dict = field(default_factory=dict)  # layer index -> pruned channel list

    def copy(self):
        return ModelGraph(
            layers=[s.copy() for s in self.layers],
            params={k: v.copy() for k, v in self.params.items()},
            input_shape=tuple(self.input_shape),
            score_range=tuple(self.score_range) if self.score_range else None,
            masks={k: list(v) for k, v in self.masks.items()},
        )


@dataclass
class Gradients:
    by_param: dict
    by_input: np.ndarray


# ---------------------------------------------------------------------------
# layer registry
# ---------------------------------------------------------------------------

LAYER_KINDS = {}


def register_layer_kind(kind, forward, backward, out_shape):
    """Register a layer implementation (forward/backward/shape inference)."""
    LAYER_KINDS[kind] = (forward, backward, out_shape)


def _require_chw(x, kind):
    if x.ndim != 3:
        raise ShapeError(f"{kind} expects a C x H x W input, got shape {x.shape}")


# -- conv2d ------------------------------------------------------------------

def _conv2d_geometry(spec, in_shape):
    c, h, w = in_shape
    hy = spec.hyper
    k, p, s, d = hy["kernel"], hy.get("padding", 0), hy.get("stride", 1), hy.get("dilation", 1)
    return (hy["out_channels"], conv_out_size(h, k, p, s, d), conv_out_size(w, k, p, s, d))


def _conv2d_forward(spec, params, x):
    _require_chw(x, "conv2d")
    hy = spec.hyper
    k, p, s, d = hy["kernel"], hy.get("padding", 0), hy.get("stride", 1), hy.get("dilation", 1)
    w = params[spec.param_ids[0]]
    b = params[spec.param_ids[1]]
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d expects {w.shape[1]} channels, got {x.shape[0]}")
    _, h_out, w_out = _conv2d_geometry(spec, x.shape)
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    y = np.zeros((w.shape[0], h_out, w_out))
    for kp in range(k):
        for kq in range(k):
            sl = xp[:, kp * d: kp * d + (h_out - 1) * s + 1: s,
                    kq * d: kq * d + (w_out - 1) * s + 1: s]
            y += np.einsum("oc,chw->ohw", w[:, :, kp, kq], sl)
    y += b[:, None, None]
    return y, (xp, x.shape)


def _conv2d_backward(spec, params, cache, gy):
    xp, x_shape = cache
    hy = spec.hyper
    k, p, s, d = hy["kernel"], hy.get("padding", 0), hy.get("stride", 1), hy.get("dilation", 1)
    w = params[spec.param_ids[0]]
    h_out, w_out = gy.shape[1], gy.shape[2]
    gw = np.zeros_like(w)
    gxp = np.zeros_like(xp)
    for kp in range(k):
        for kq in range(k):
            rows = slice(kp * d, kp * d + (h_out - 1) * s + 1, s)
            cols = slice(kq * d, kq * d + (w_out - 1) * s + 1, s)
            gw[:, :, kp, kq] = np.einsum("ohw,chw->oc", gy, xp[:, rows, cols])
            gxp[:, rows, cols] += np.einsum("oc,ohw->chw", w[:, :, kp, kq], gy)
    gx = gxp[:, p: p + x_shape[1], p: p + x_shape[2]] if p else gxp
    return gx, {spec.param_ids[0]: gw, spec.param_ids[1]: gy.sum(axis=(1, 2))}


# -- dense -------------------------------------------------------------------

def _dense_forward(spec, params, x):
    w = params[spec.param_ids[0]]
    b = params[spec.param_ids[1]]
    if x.ndim != 1 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"dense expects a flat vector of {w.shape[1]}, got shape {x.shape}")
    return w @ x + b, x


def _dense_backward(spec, params, cache, gy):
    w = params[spec.param_ids[0]]
    return w.T @ gy, {spec.param_ids[0]: np.outer(gy, cache), spec.param_ids[1]: gy.copy()}


def _dense_shape(spec, in_shape):
    if len(in_shape) != 1:
        raise ShapeError(f"dense expects a flat input, got shape {in_shape}")
    return (spec.hyper["out_features"],)


# -- activations -------------------------------------------------------------

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _act_value(kind, x):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "elu":
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    if kind == "silu":
        sig = 1.0 / (1.0 + np.exp(-x))
        return x * sig
    if kind == "gelu":
        return 0.5 * x * (1.0 + erf(x / _SQRT2))
    raise ConfigurationError(f"unknown activation {kind!r}")


def _act_grad(kind, x):
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "elu":
        return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))
    if kind == "silu":
        sig = 1.0 / (1.0 + np.exp(-x))
        return sig * (1.0 + x * (1.0 - sig))
    if kind == "gelu":
        phi = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return 0.5 * (1.0 + erf(x / _SQRT2)) + x * phi
    raise ConfigurationError(f"unknown activation {kind!r}")


def _make_activation(kind):
    def fwd(spec, params, x):
        return _act_value(kind, x), x

    def bwd(spec, params, cache, gy):
        return gy * _act_grad(kind, cache), {}

    return fwd, bwd, lambda spec, in_shape: in_shape


# -- pooling / flatten -------------------------------------------------------

def _adaptive_windows(size, out):
    starts = [(i * size) // out for i in range(out)]
    ends = [-(-((i + 1) * size) // out) for i in range(out)]  # ceil
    return starts, ends


def _adaptive_square_pool_forward(spec, params, x):
    _require_chw(x, "adaptive_square_pool")
    c, h, w = x.shape
    out = min(h, w)
    rs, re = _adaptive_windows(h, out)
    cs, ce = _adaptive_windows(w, out)
    y = np.empty((c, out, out))
    for i in range(out):
        for j in range(out):
            y[:, i, j] = x[:, rs[i]: re[i], cs[j]: ce[j]].mean(axis=(1, 2))
    return y, x.shape


def _adaptive_square_pool_backward(spec, params, cache, gy):
    c, h, w = cache
    out = gy.shape[1]
    rs, re = _adaptive_windows(h, out)
    cs, ce = _adaptive_windows(w, out)
    gx = np.zeros((c, h, w))
    for i in range(out):
        for j in range(out):
            area = (re[i] - rs[i]) * (ce[j] - cs[j])
            gx[:, rs[i]: re[i], cs[j]: ce[j]] += gy[:, i, j][:, None, None] / area
    return gx, {}


def _adaptive_square_pool_shape(spec, in_shape):
    c, h, w = in_shape
    return (c, min(h, w), min(h, w))


def _avg_pool_geometry(spec, in_shape):
    c, h, w = in_shape
    k = spec.hyper.get("kernel")
    if k is None:  # global average
        return (h, w), (h, w), (c, 1, 1)
    s = spec.hyper.get("stride", k)
    return (k, k), (s, s), (c, (h - k) // s + 1, (w - k) // s + 1)


def _avg_pool_forward(spec, params, x):
    _require_chw(x, "avg_pool")
    (kh, kw), (sh, sw), out_shape = _avg_pool_geometry(spec, x.shape)
    c, ho, wo = out_shape
    if ho < 1 or wo < 1:
        raise ShapeError(f"avg_pool kernel {kh} too large for input {x.shape}")
    y = np.zeros(out_shape)
    for p in range(kh):
        for q in range(kw):
            y += x[:, p: p + (ho - 1) * sh + 1: sh, q: q + (wo - 1) * sw + 1: sw]
    return y / (kh * kw), x.shape


def _avg_pool_backward(spec, params, cache, gy):
    (kh, kw), (sh, sw), _ = _avg_pool_geometry(spec, cache)
    ho, wo = gy.shape[1], gy.shape[2]
    gx = np.zeros(cache)
    g = gy / (kh * kw)
    for p in range(kh):
        for q in range(kw):
            gx[:, p: p + (ho - 1) * sh + 1: sh, q: q + (wo - 1) * sw + 1: sw] += g
    return gx, {}


def _avg_pool_shape(spec, in_shape):
    _, _, out_shape = _avg_pool_geometry(spec, in_shape)
    if out_shape[1] < 1 or out_shape[2] < 1:
        raise ShapeError(f"avg_pool output collapses for input {in_shape}")
    return out_shape


def _flatten_forward(spec, params, x):
    return x.reshape(-1).copy(), x.shape


def _flatten_backward(spec, params, cache, gy):
    return gy.reshape(cache), {}


register_layer_kind("conv2d", _conv2d_forward, _conv2d_backward,
                    lambda spec, in_shape: _conv2d_geometry(spec, in_shape))
register_layer_kind("dense", _dense_forward, _dense_backward, _dense_shape)
register_layer_kind("adaptive_square_pool", _adaptive_square_pool_forward,
                    _adaptive_square_pool_backward, _adaptive_square_pool_shape)
register_layer_kind("avg_pool", _avg_pool_forward, _avg_pool_backward, _avg_pool_shape)
register_layer_kind("flatten", _flatten_forward, _flatten_backward,
                    lambda spec, in_shape: (int(np.prod(in_shape)),))
for _kind in ACTIVATION_KINDS:
    register_layer_kind(_kind, *_make_activation(_kind))


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------

def infer_shapes(model):
    """Static shape pass; returns the shape entering each layer plus the
    final output shape.  Raises ShapeError naming the failing layer."""
    shapes = [tuple(model.input_shape)]
    for idx, spec in enumerate(model.layers):
        if spec.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {spec.kind!r} at layer {idx}")
        out_shape = LAYER_KINDS[spec.kind][2]
        try:
            shapes.append(tuple(out_shape(spec, shapes[-1])))
        except (ShapeError, ConfigurationError) as exc:
            raise ShapeError(f"shape pass failed at layer {idx} ({spec.kind}): {exc}") from exc
    return shapes


def _check_input(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(model.input_shape):
        raise ShapeError(f"input shape {x.shape} != model input {tuple(model.input_shape)}")
    check_finite(x, "model input")
    return x


def _run_forward(model, x):
    caches = []
    y = x
    for idx, spec in enumerate(model.layers):
        fwd = LAYER_KINDS[spec.kind][0]
        y, cache = fwd(spec, model.params, y)
        caches.append(cache)
    return y, caches


def _as_score(y):
    if np.ndim(y) == 0:
        return float(y)
    if y.size == 1:
        return float(y.reshape(-1)[0])
    raise ShapeError(f"model output has shape {np.shape(y)}, expected a scalar score")


def forward(model, x):
    """Scalar quality score for one image."""
    x = _check_input(model, x)
    y, _ = _run_forward(model, x)
    return _as_score(y)


def value_and_grad(model, x):
    """(score, Gradients) in a single forward/backward pass."""
    x = _check_input(model, x)
    y, caches = _run_forward(model, x)
    score = _as_score(y)
    gy = np.ones_like(np.atleast_1d(y), dtype=np.float64).reshape(np.shape(y))
    by_param = {pid: np.zeros_like(p) for pid, p in model.params.items()}
    for idx in range(len(model.layers) - 1, -1, -1):
        spec = model.layers[idx]
        bwd = LAYER_KINDS[spec.kind][1]
        gy, pgrads = bwd(spec, model.params, caches[idx], gy)
        for pid, g in pgrads.items():
            by_param[pid] += g
    return score, Gradients(by_param=by_param, by_input=gy)


def backward(model, x):
    """Gradients of the score w.r.t. every parameter and the input."""
    return value_and_grad(model, x)[1]


def apply_masks(model):
    """Zero out pruned output channels (weights and bias); idempotent."""
    for layer_idx, channels in model.masks.items():
        spec = model.layers[layer_idx]
        if not channels:
            continue
        w = model.params[spec.param_ids[0]]
        w[list(channels)] = 0.0
        if len(spec.param_ids) > 1:
            model.params[spec.param_ids[1]][list(channels)] = 0.0


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for pid, g in grads.items():
            params[pid] -= self.lr * g


class _Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        for pid, g in grads.items():
            m = self.m.setdefault(pid, np.zeros_like(g))
            v = self.v.setdefault(pid, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            params[pid] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    model: ModelGraph
    losses: list  # mean training loss per epoch


_NT_FD_STEP = 1e-4  # probe step for the gradient-norm penalty


def _sample_grads(model, x, label, nt_lambda):
    """Loss and parameter gradients for one (image, label) pair.

    Loss = (score - label)^2 + nt_lambda * ||d score/d x||^2.  The penalty's
    parameter gradient is 2||g|| * d/dtheta (v . grad_x score) with v = g/||g||
    held fixed, evaluated by a central difference in x (the standard
    double-backprop shortcut).
    """
    score, grads = value_and_grad(model, x)
    resid = score - label
    loss = resid * resid
    total = {pid: 2.0 * resid * g for pid, g in grads.by_param.items()}
    if nt_lambda > 0.0:
        g_in = grads.by_input
        gnorm = float(np.linalg.norm(g_in))
        loss += nt_lambda * gnorm * gnorm
        if gnorm > 1e-15:
            v = g_in / gnorm
            h = _NT_FD_STEP
            plus = backward(model, x + h * v).by_param
            minus = backward(model, x - h * v).by_param
            coef = nt_lambda * 2.0 * gnorm / (2.0 * h)
            for pid in total:
                total[pid] += coef * (plus[pid] - minus[pid])
    return loss, total


def train(model, dataset, epochs, lr=1e-3, optimizer="adam", nt_lambda=0.0,
          batch_size=32, seed=0, shuffle=True, betas=(0.9, 0.999), adam_eps=1e-8):
    """Train in place with MSE loss (plus optional gradient-norm penalty).

    Labels must lie in [0, 1].  After the final epoch the model's
    score_range is set to (min, max) of its predictions on the training
    set.  Pruning masks recorded on the model are re-applied after every
    optimizer step.
    """
    samples = list(dataset)
    if not samples:
        raise DataError("train: dataset is empty")
    if nt_lambda < 0:
        raise ConfigurationError(f"nt_lambda must be >= 0, got {nt_lambda}")
    if optimizer == "adam":
        opt = _Adam(lr, betas=betas, eps=adam_eps)
    elif optimizer == "sgd":
        opt = _Sgd(lr)
    else:
        raise ConfigurationError(f"unknown optimizer {optimizer!r}")

    rng = np.random.default_rng(seed)
    losses = []
    n = len(samples)
    for epoch in range(epochs):
        order = rng.permutation(n) if shuffle else np.arange(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            batch = order[start: start + batch_size]
            acc = None
            batch_loss = 0.0
            for i in batch:  # fixed index order: deterministic accumulation
                x, label = samples[i]
                loss, grads = _sample_grads(model, x, float(label), nt_lambda)
                batch_loss += loss
                if acc is None:
                    acc = grads
                else:
                    for pid in acc:
                        acc[pid] += grads[pid]
            for pid in acc:
                acc[pid] /= len(batch)
            opt.step(model.params, acc)
            apply_masks(model)
            epoch_loss += batch_loss
        epoch_loss /= n
        if not np.isfinite(epoch_loss):
            raise TrainingError("training diverged (loss is not finite)", epoch=epoch)
        losses.append(epoch_loss)

    preds = [forward(model, x) for x, _ in samples]
    model.score_range = (float(min(preds)), float(max(preds)))
    return TrainResult(model=model, losses=losses)


# ---------------------------------------------------------------------------
# toy architecture
# ---------------------------------------------------------------------------

def build_toy_model(seed=0, input_shape=(3, 16, 16)):
    """Seeded 4-conv scoring CNN.

    Channel growth slows with depth, so the deepest conv has the smallest
    output/input volume ratio (the preferred insertion point for the
    orthogonal block).
    """
    rng = np.random.default_rng(seed)
    c0 = input_shape[0]
    layers = []
    params = {}

    def add_conv(idx, c_in, c_out, kernel=3, padding=1):
        wid, bid = f"l{idx}.w", f"l{idx}.b"
        fan_in = c_in * kernel * kernel
        params[wid] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel))
        params[bid] = np.zeros(c_out)
        layers.append(LayerSpec("conv2d", {"out_channels": c_out, "kernel": kernel,
                                           "padding": padding}, [wid, bid]))

    add_conv(0, c0, 10)
    layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("avg_pool", {"kernel": 2}))
    add_conv(3, 10, 12)
    layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("avg_pool", {"kernel": 2}))
    add_conv(6, 12, 14)
    layers.append(LayerSpec("relu"))
    add_conv(8, 14, 16)
    layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("avg_pool", {"kernel": None}))
    layers.append(LayerSpec("flatten"))
    params["head.w"] = rng.normal(0.0, 0.25, size=(1, 16))
    params["head.b"] = np.array([0.5])
    layers.append(LayerSpec("dense", {"out_features": 1}, ["head.w", "head.b"]))

    model = ModelGraph(layers=layers, params=params, input_shape=tuple(input_shape))
    infer_shapes(model)
    return model


def count_params(model):
    return int(sum(p.size for p in model.params.values()))


def clone_without_layer(model, index):
    """Rebuild the model with one layer removed (dropping its parameters)."""
    m = model.copy()
    dropped = m.layers.pop(index)
    for pid in dropped.param_ids:
        m.params.pop(pid, None)
    m.masks = {i - 1 if i > index else i: v for i, v in m.masks.items() if i != index}
    return m
