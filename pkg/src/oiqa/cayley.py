"""Norm-preserving convolution via per-frequency Cayley transforms.

A real c x c x k x k kernel is zero-embedded into the n x n spatial grid
and DFT'd, giving one c x c complex matrix W(f) per frequency.  Each is
skew-Hermitianized, A(f) = W(f) - W(f)^H, and mapped through the Cayley
transform Q(f) = (I - A(f)) (I + A(f))^(-1), which is unitary because the
spectrum of a skew-Hermitian A is purely imaginary (so I + A is always
invertible).  Applying Q(f) per frequency implements a circular
convolution that is an exact isometry of R^(c*n*n): perturbations pass
through with their l2 norm unchanged.

The composite robust block is: adaptive square pooling -> 1x1 conv halving
the channels -> zero-pad lift back to the original channel count ->
Cayley-orthogonal convolution.  The lift + orthogonal stage is an isometry
on the lifted subspace, so the block's amplification is bounded by the
spectral norm of its 1x1 conv.

The backward pass is exact: the derivative is propagated through the
matrix inverse analytically (d(M^-1) = -M^-1 dM M^-1), not approximated.
"""

from dataclasses import dataclass

import numpy as np

from . import net
from .errors import ConfigurationError, ShapeError
from .tensor import check_finite, cinv, idft2

DEFAULT_KERNEL_SIZE = 3


@dataclass
class CayleyConvParams:
    """Free parameters of the orthogonal layer: a real spatial kernel
    operating on c channels at spatial size n x n."""

    kernel: np.ndarray  # (c, c, k, k) real
    size: int           # operating spatial size n
    channels: int

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.ndim != 4 or k.shape[0] != k.shape[1]:
            raise ConfigurationError(f"Cayley kernel must be c x c x k x k, got {k.shape}")
        if k.shape[0] != self.channels:
            raise ConfigurationError(
                f"Cayley kernel has {k.shape[0]} channels, expected {self.channels}")
        if k.shape[2] > self.size or k.shape[3] > self.size:
            raise ConfigurationError(
                f"Cayley kernel {k.shape[2]}x{k.shape[3]} does not fit the {self.size}x"
                f"{self.size} operating grid")
        check_finite(k, "Cayley kernel")
        self.kernel = k


def cayley_orthogonalize(w_hat):
    """Unitary Q = (I - A) (I + A)^(-1) with A = w_hat - w_hat^H."""
    w_hat = np.asarray(w_hat, dtype=np.complex128)
    if w_hat.ndim != 2 or w_hat.shape[0] != w_hat.shape[1]:
        raise ShapeError(f"cayley_orthogonalize expects a square matrix, got {w_hat.shape}")
    check_finite(w_hat, "cayley input")
    a = w_hat - w_hat.conj().T
    eye = np.eye(w_hat.shape[0], dtype=np.complex128)
    return (eye - a) @ cinv(eye + a)


def _freq_stack(kernel, n):
    """Per-frequency kernel matrices W(f): shape (n, n, c, c)."""
    c = kernel.shape[0]
    k = kernel.shape[2]
    padded = np.zeros((c, c, n, n))
    padded[:, :, :k, :k] = kernel
    w_hat = np.fft.fft2(padded, axes=(-2, -1))      # (c, c, n, n)
    return np.transpose(w_hat, (2, 3, 0, 1))        # (n, n, c, c)


def orth_conv_q(params):
    """Stack of per-frequency unitaries Q(f), shape (n, n, c, c)."""
    w = _freq_stack(params.kernel, params.size)
    a = w - np.conj(np.swapaxes(w, -1, -2))
    eye = np.eye(params.channels, dtype=np.complex128)
    m_inv = np.linalg.inv(eye + a)
    return (eye - a) @ m_inv


def _orth_conv_apply(params, x):
    """Forward with intermediates cached for the backward pass."""
    c, n = params.channels, params.size
    if x.shape != (c, n, n):
        raise ShapeError(
            f"orthogonal conv expects {(c, n, n)} (square spatial), got {x.shape}")
    w = _freq_stack(params.kernel, n)
    a = w - np.conj(np.swapaxes(w, -1, -2))
    eye = np.eye(c, dtype=np.complex128)
    m_inv = np.linalg.inv(eye + a)
    q = (eye - a) @ m_inv
    x_hat = np.fft.fft2(x, axes=(-2, -1))           # (c, n, n)
    y_hat = np.einsum("uvij,juv->iuv", q, x_hat)
    y = idft2(y_hat)
    return y, (q, m_inv, x_hat)


def orth_conv_forward(params, x):
    """Apply the orthogonal convolution; preserves the l2 norm of x."""
    x = np.asarray(x, dtype=np.float64)
    check_finite(x, "orthogonal conv input")
    return _orth_conv_apply(params, x)[0]


def orth_conv_backward(params, cache, gy):
    """Gradients of sum(gy * y) w.r.t. the input and the real spatial kernel.

    Complex cotangents follow the convention dL = Re(sum(conj(c_z) * dz));
    all stages (DFT, skew-Hermitianization, Cayley, per-frequency apply)
    are differentiated analytically.
    """
    q, m_inv, x_hat = cache
    n = params.size
    k = params.kernel.shape[2]
    big_n = n * n

    c_y_hat = np.fft.fft2(gy, axes=(-2, -1)) / big_n
    # y_hat(f) = Q(f) x_hat(f)
    c_q = np.einsum("iuv,juv->uvij", c_y_hat, np.conj(x_hat))
    c_x_hat = np.einsum("uvji,juv->iuv", np.conj(q), c_y_hat)
    gx = np.fft.fft2(np.conj(c_x_hat), axes=(-2, -1)).real

    # Q = (I - A) inv(I + A):  c_A = -(I + Q^H) c_Q inv(I + A)^H
    q_h = np.conj(np.swapaxes(q, -1, -2))
    m_inv_h = np.conj(np.swapaxes(m_inv, -1, -2))
    eye = np.eye(params.channels, dtype=np.complex128)
    c_a = -(eye + q_h) @ c_q @ m_inv_h
    # A = W - W^H
    c_w = c_a - np.conj(np.swapaxes(c_a, -1, -2))
    # W(f) = DFT of the zero-embedded kernel: pull back and crop.
    c_w_spatial = np.transpose(c_w, (2, 3, 0, 1))   # (c, c, n, n)
    g_pad = np.fft.fft2(np.conj(c_w_spatial), axes=(-2, -1)).real
    gk = g_pad[:, :, :k, :k].copy()
    return gx, gk


# ---------------------------------------------------------------------------
# robust block: pool -> channel-halving 1x1 conv -> lift -> orthogonal conv
# ---------------------------------------------------------------------------

@dataclass
class RobustBlockSpec:
    """Placement and sizing of the orthogonalizing insert."""

    insert_position: int
    in_channels: int
    mid_channels: int
    size: int

    def __post_init__(self):
        if self.in_channels < 2:
            raise ConfigurationError(
                f"robust block needs at least 2 input channels, got {self.in_channels}")
        if self.mid_channels < 1:
            raise ConfigurationError("robust block mid_channels must be >= 1")


def make_block_spec(insert_position, in_channels, height, width):
    return RobustBlockSpec(
        insert_position=insert_position,
        in_channels=in_channels,
        mid_channels=in_channels // 2,
        size=min(height, width),
    )


def init_block_params(spec, rng, kernel_size=DEFAULT_KERNEL_SIZE):
    """Fresh block parameters: (reduce_w, cayley_kernel).

    The 1x1 reduce conv starts with random orthonormal rows, so the whole
    block is 1-Lipschitz at insertion; the Cayley kernel is random but
    small, keeping the initial frequency unitaries near (not at) identity.
    """
    k = min(kernel_size, spec.size)
    gauss = rng.normal(size=(spec.in_channels, spec.in_channels))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))
    reduce_w = np.ascontiguousarray(q[: spec.mid_channels, :, None, None])
    cayley_kernel = 0.1 * rng.normal(0.0, np.sqrt(1.0 / (spec.in_channels * k * k)),
                                     size=(spec.in_channels, spec.in_channels, k, k))
    return reduce_w, cayley_kernel


def robust_block_forward(spec, reduce_w, cayley_kernel, x):
    """x (C x H x W) -> (C x n x n) with n = min(H, W)."""
    y, _ = _robust_block_apply(spec, reduce_w, cayley_kernel, np.asarray(x, dtype=np.float64))
    return y


def _robust_block_apply(spec, reduce_w, cayley_kernel, x):
    if x.ndim != 3 or x.shape[0] != spec.in_channels:
        raise ShapeError(f"robust block expects {spec.in_channels} x H x W, got {x.shape}")
    pooled, pool_cache = net._adaptive_square_pool_forward(None, None, x)
    if pooled.shape[1] != spec.size:
        raise ShapeError(
            f"robust block built for size {spec.size}, input pools to {pooled.shape[1]}")
    reduced = np.einsum("mc,chw->mhw", reduce_w[:, :, 0, 0], pooled)
    lifted = np.zeros((spec.in_channels, spec.size, spec.size))
    lifted[: spec.mid_channels] = reduced
    cparams = CayleyConvParams(cayley_kernel, spec.size, spec.in_channels)
    out, orth_cache = _orth_conv_apply(cparams, lifted)
    return out, (pool_cache, pooled, cparams, orth_cache)


def robust_block_backward(spec, reduce_w, cayley_kernel, cache, gy):
    pool_cache, pooled, cparams, orth_cache = cache
    g_lifted, g_kernel = orth_conv_backward(cparams, orth_cache, gy)
    g_reduced = g_lifted[: spec.mid_channels]
    g_reduce_w = np.einsum("mhw,chw->mc", g_reduced, pooled)[:, :, None, None]
    g_pooled = np.einsum("mc,mhw->chw", reduce_w[:, :, 0, 0], g_reduced)
    gx, _ = net._adaptive_square_pool_backward(None, None, pool_cache, g_pooled)
    return gx, g_reduce_w, g_kernel


def robust_block_bound(reduce_w):
    """Amplification bound of the whole block: the spectral norm of its
    1x1 channel-reducing conv (the orthogonal stage contributes 1)."""
    from .tensor import svd_small

    s, _ = svd_small(reduce_w[:, :, 0, 0])
    return float(s[0])


# -- layer-kind registration so ModelGraph can host the block ---------------

def _block_spec_from_layer(layer_spec):
    hy = layer_spec.hyper
    return RobustBlockSpec(insert_position=hy.get("insert_position", -1),
                           in_channels=hy["channels"],
                           mid_channels=hy["mid_channels"],
                           size=hy["size"])


def _rb_forward(layer_spec, params, x):
    spec = _block_spec_from_layer(layer_spec)
    reduce_w = params[layer_spec.param_ids[0]]
    kernel = params[layer_spec.param_ids[1]]
    return _robust_block_apply(spec, reduce_w, kernel, x)


def _rb_backward(layer_spec, params, cache, gy):
    spec = _block_spec_from_layer(layer_spec)
    reduce_w = params[layer_spec.param_ids[0]]
    kernel = params[layer_spec.param_ids[1]]
    gx, g_reduce, g_kernel = robust_block_backward(spec, reduce_w, kernel, cache, gy)
    return gx, {layer_spec.param_ids[0]: g_reduce, layer_spec.param_ids[1]: g_kernel}


def _rb_shape(layer_spec, in_shape):
    c, h, w = in_shape
    hy = layer_spec.hyper
    if c != hy["channels"]:
        raise ShapeError(f"robust block expects {hy['channels']} channels, got {c}")
    if min(h, w) != hy["size"]:
        raise ShapeError(f"robust block built for size {hy['size']}, input is {h}x{w}")
    return (c, hy["size"], hy["size"])


net.register_layer_kind("robust_block", _rb_forward, _rb_backward, _rb_shape)


def insert_robust_block(model, position, seed=0, kernel_size=DEFAULT_KERNEL_SIZE):
    """Insert a freshly initialized robust block before the conv layer at
    `position`.  Existing parameters are preserved bit-exactly; the
    downstream shape pass is re-validated."""
    if position < 0 or position >= len(model.layers):
        raise ConfigurationError(f"insert position {position} out of range")
    if model.layers[position].kind != "conv2d":
        raise ConfigurationError(
            f"insert position {position} is a {model.layers[position].kind!r} layer, "
            "expected conv2d")
    shapes = net.infer_shapes(model)
    c, h, w = shapes[position]
    spec = make_block_spec(position, c, h, w)

    new = model.copy()
    tag = 0
    while any(pid.startswith(f"rb{tag}.") for pid in new.params):
        tag += 1
    rw_id, ck_id = f"rb{tag}.reduce_w", f"rb{tag}.cayley_k"
    rng = np.random.default_rng(seed)
    reduce_w, cayley_kernel = init_block_params(spec, rng, kernel_size)
    new.params[rw_id] = reduce_w
    new.params[ck_id] = cayley_kernel
    layer = net.LayerSpec("robust_block",
                          {"channels": c, "mid_channels": spec.mid_channels,
                           "size": spec.size, "insert_position": position},
                          [rw_id, ck_id], fresh=True)
    new.layers.insert(position, layer)
    new.masks = {i + 1 if i >= position else i: v for i, v in model.masks.items()}
    try:
        net.infer_shapes(new)
    except ShapeError as exc:
        raise ConfigurationError(f"robust block at {position} breaks downstream shapes: {exc}") from exc
    return new
