"""Exact spectra of convolution operators and placement analysis.

A circular convolution on an n x n grid block-diagonalizes per DFT
frequency: the operator's singular values are the union of the singular
values of the c_out x c_in frequency blocks, so its spectral norm is the
max block norm.  The same operator can be materialized as an explicit
(c_out*n^2) x (c_in*n^2) matrix; both routes must agree and are kept as
independent cross-checks.

Also here: the Monte-Carlo verifier for the composition bound
||W H delta|| > (m/n) ||delta||  (orthogonal H followed by an expanding W),
and the layer-placement scan ranking insertion points by the volume ratio
(c_out * s_out^2) / (c_in * s_in^2) -- smaller is better.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ConstructionError, ShapeError, SizeError
from .net import infer_shapes
from .tensor import check_finite, svd_small

MATERIALIZED_CAP = 4096


def _embed_kernel(kernel, n):
    c_out, c_in, kh, kw = kernel.shape
    if kh > n or kw > n:
        raise ShapeError(f"kernel {kh}x{kw} does not fit an {n}x{n} grid")
    padded = np.zeros((c_out, c_in, n, n))
    padded[:, :, :kh, :kw] = kernel
    return padded


def freq_blocks(kernel, n):
    """Per-frequency operator blocks, shape (n, n, c_out, c_in)."""
    padded = _embed_kernel(np.asarray(kernel, dtype=np.float64), n)
    return np.transpose(np.fft.fft2(padded, axes=(-2, -1)), (2, 3, 0, 1))


def circular_apply(kernel, x):
    """Apply the circular convolution (frequency route) to x (c_in, n, n)."""
    n = x.shape[1]
    blocks = freq_blocks(kernel, n)
    x_hat = np.fft.fft2(x, axes=(-2, -1))
    y_hat = np.einsum("uvoi,iuv->ouv", blocks, x_hat)
    return np.fft.ifft2(y_hat, axes=(-2, -1)).real


def materialize(kernel, n):
    """Explicit matrix of the circular convolution.

    Row (o, s) / column (i, t) entry is kernel[o, i, (s - t) mod n] with
    spatial indices flattened in C order, matching the frequency route.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    c_out, c_in = kernel.shape[0], kernel.shape[1]
    if c_out * n * n > MATERIALIZED_CAP or c_in * n * n > MATERIALIZED_CAP:
        raise SizeError(
            f"materialized operator {c_out * n * n} x {c_in * n * n} exceeds cap "
            f"{MATERIALIZED_CAP}")
    padded = _embed_kernel(kernel, n)
    idx = np.arange(n)
    rows = (idx[:, None] - idx[None, :]) % n          # (s_r, t_r)
    blocks = padded[:, :, rows[:, None, :, None], rows[None, :, None, :]]
    # blocks: (c_out, c_in, s_r, s_c, t_r, t_c)
    mat = blocks.transpose(0, 2, 3, 1, 4, 5).reshape(c_out * n * n, c_in * n * n)
    return np.ascontiguousarray(mat)


@dataclass
class OperatorSpectrum:
    """Spectral summary of a convolution operator.

    Keeps enough provenance (kernel, grid size, semantics) to re-apply the
    operator when verifying amplification claims.
    """

    sigma1: float
    frobenius: float
    v1: np.ndarray                      # real top right singular vector, (c_in, n, n)
    per_freq_sigma: np.ndarray = None   # (n, n, min(c)) for the circular route
    kernel: np.ndarray = None
    size: int = 0
    semantics: str = "circular"

    def apply(self, x):
        if self.semantics == "circular":
            return circular_apply(self.kernel, x)
        mat = materialize(self.kernel, self.size)
        return (mat @ np.asarray(x).reshape(-1)).reshape(-1, self.size, self.size)


def _self_conjugate(u, v, n):
    return (2 * u) % n == 0 and (2 * v) % n == 0


def _circular_top_vector(blocks, sigma, n):
    """Real unit vector achieving the spectral norm, built from the top
    frequency's singular vector (paired with its conjugate frequency)."""
    flat = np.argmax(sigma.max(axis=-1).reshape(-1))
    fu, fv = int(flat // n), int(flat % n)
    block = blocks[fu, fv]
    c_in = block.shape[1]
    z_hat = np.zeros((c_in, n, n), dtype=np.complex128)
    if _self_conjugate(fu, fv, n):
        _, vecs = svd_small(block.real)
        z_hat[:, fu, fv] = vecs[:, 0]
    else:
        _, vecs = svd_small(block)
        top = vecs[:, 0]
        z_hat[:, fu, fv] = top
        z_hat[:, (-fu) % n, (-fv) % n] = np.conj(top)
    v = np.fft.ifft2(z_hat, axes=(-2, -1)).real
    return v / np.linalg.norm(v)


def conv_spectrum(kernel, n, semantics="circular"):
    """Spectral norm, Frobenius norm and top right singular vector of the
    circular convolution operator defined by `kernel` on an n x n grid."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be c_out x c_in x k x k, got {kernel.shape}")
    check_finite(kernel, "kernel")
    if semantics == "circular":
        blocks = freq_blocks(kernel, n)
        c_min = min(kernel.shape[0], kernel.shape[1])
        sigma = np.empty((n, n, c_min))
        for u in range(n):
            for v in range(n):
                s, _ = svd_small(blocks[u, v])
                sigma[u, v] = s[:c_min]
        sigma1 = float(sigma.max())
        frob = float(np.sqrt(np.sum(sigma * sigma)))
        v1 = _circular_top_vector(blocks, sigma, n)
        return OperatorSpectrum(sigma1=sigma1, frobenius=frob, v1=v1,
                                per_freq_sigma=sigma, kernel=kernel, size=n,
                                semantics="circular")
    if semantics == "materialized":
        mat = materialize(kernel, n)
        s, vecs = svd_small(mat)
        v1 = vecs[:, 0].reshape(kernel.shape[1], n, n)
        return OperatorSpectrum(sigma1=float(s[0]), frobenius=float(np.linalg.norm(mat)),
                                v1=v1, kernel=kernel, size=n, semantics="materialized")
    raise ConfigurationError(f"unknown semantics {semantics!r}")


@dataclass
class AmplificationReport:
    sigma1: float
    delta_norm: float
    output_norm: float
    measured_ratio: float
    amplifies: bool
    precondition_ok: bool
    note: str = ""


def verify_amplification(spectrum, delta_magnitude):
    """Check ||W delta|| = sigma1 ||delta|| > ||delta|| along the top right
    singular vector.  If sigma1 <= 1 the operator is not amplifying and a
    precondition report is returned instead."""
    if delta_magnitude <= 0:
        raise ConfigurationError("delta_magnitude must be positive")
    if spectrum.sigma1 <= 1.0:
        return AmplificationReport(
            sigma1=spectrum.sigma1, delta_norm=delta_magnitude, output_norm=0.0,
            measured_ratio=0.0, amplifies=False, precondition_ok=False,
            note="sigma1 <= 1: not an amplifying operator")
    delta = delta_magnitude * spectrum.v1
    out = spectrum.apply(delta)
    out_norm = float(np.linalg.norm(out))
    ratio = out_norm / delta_magnitude
    return AmplificationReport(
        sigma1=spectrum.sigma1, delta_norm=delta_magnitude, output_norm=out_norm,
        measured_ratio=ratio, amplifies=ratio > 1.0, precondition_ok=True)


# ---------------------------------------------------------------------------
# Monte-Carlo verification of the composition bound
# ---------------------------------------------------------------------------

def random_orthogonal(n, rng):
    """Haar-ish orthogonal matrix via QR with a canonical sign convention."""
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def random_operator_with_spectrum(m, n, spectral_norm, frob_ratio, rng):
    """Random m x n operator with ||W||_2 = spectral_norm and
    ||W||_F / ||W||_2 = frob_ratio (exactly, up to rounding).

    Since sigma_i <= sigma_1 forces ||W||_F <= sqrt(n) ||W||_2, ratios of
    sqrt(n) or more are infeasible and raise ConstructionError.
    """
    if m < n:
        raise ConfigurationError(f"need m >= n, got {m} < {n}")
    if spectral_norm <= 0:
        raise ConstructionError(f"spectral norm must be positive, got {spectral_norm}")
    if frob_ratio < 1.0 or frob_ratio >= np.sqrt(n):
        raise ConstructionError(
            f"no spectrum with ||W||_F/||W||_2 = {frob_ratio} exists for n = {n} "
            f"(feasible range is [1, sqrt(n)) = [1, {np.sqrt(n):.4f}))")
    target_rest = (frob_ratio ** 2 - 1.0) * spectral_norm ** 2
    sigma = np.empty(n)
    sigma[0] = spectral_norm
    if n > 1:
        rest = None
        for _ in range(200):
            draw = rng.uniform(0.05, 1.0, size=n - 1) * spectral_norm
            scale = np.sqrt(target_rest / np.sum(draw * draw)) if target_rest > 0 else 0.0
            cand = draw * scale
            if np.all(cand <= spectral_norm):
                rest = cand
                break
        if rest is None:
            # deterministic fallback: waterfill full entries plus a remainder
            rest = np.zeros(n - 1)
            remaining = target_rest
            for i in range(n - 1):
                v = min(np.sqrt(remaining), spectral_norm)
                rest[i] = v
                remaining -= v * v
                if remaining <= 0:
                    break
        sigma[1:] = rest
    u = random_orthogonal(m, rng)[:, :n]
    v = random_orthogonal(n, rng)
    w = (u * sigma) @ v.T
    return w, sigma, v


@dataclass
class Lemma1Report:
    m: int
    n: int
    trials: int
    passes_v1_of_w: int       # delta along the top right singular vector of W
    passes_v1_of_wh: int      # delta along the top right singular vector of W @ H
    bound_factor: float = 0.0


def lemma1_trial(w, h, x, delta):
    """Left-hand side ||W(H(x + delta)) - W(H(x))|| computed literally."""
    return float(np.linalg.norm(w @ (h @ (x + delta)) - w @ (h @ x)))


def verify_lemma1(trials, m, n, seed=0, eps=0.1):
    """Monte-Carlo check of ||W H (x~ - x)|| > (m/n) ||delta||.

    The operator statement is ambiguous about whether delta follows the top
    right singular vector of W or of the composition W H, so both
    interpretations are evaluated and reported separately.  Random W are
    constructed with prescribed spectra satisfying ||W||_2 > max(1, m/n)
    and ||W||_F/||W||_2 > m/n.
    """
    if m < n:
        raise ConfigurationError(f"need m >= n, got {m} < {n}")
    bound_factor = m / n
    if bound_factor >= np.sqrt(n):
        raise ConstructionError(
            f"hypotheses infeasible: m/n = {bound_factor} but ||W||_F/||W||_2 < sqrt(n) "
            f"= {np.sqrt(n):.4f}")
    passes_a = 0
    passes_b = 0
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        spectral_norm = bound_factor + rng.uniform(0.25, 2.0)
        ratio_hi = min(np.sqrt(n) * 0.98, bound_factor + 1.5)
        frob_ratio = rng.uniform(bound_factor + 1e-6, ratio_hi)
        w, _, v = random_operator_with_spectrum(m, n, spectral_norm, frob_ratio, rng)
        h = random_orthogonal(n, rng)
        x = rng.normal(size=n)
        bound = bound_factor * eps
        v1_w = v[:, 0]
        # W H = U S (H^T V)^T, so the top right singular vector of W H is H^T v1.
        v1_wh = h.T @ v1_w
        if lemma1_trial(w, h, x, eps * v1_w) > bound:
            passes_a += 1
        if lemma1_trial(w, h, x, eps * v1_wh) > bound:
            passes_b += 1
    return Lemma1Report(m=m, n=n, trials=trials, passes_v1_of_w=passes_a,
                        passes_v1_of_wh=passes_b, bound_factor=bound_factor)


# ---------------------------------------------------------------------------
# placement analysis
# ---------------------------------------------------------------------------

@dataclass
class PlacementScore:
    layer_index: int
    c_in: int
    c_out: int
    s_in: int
    s_out: int
    ratio: float = field(init=False)

    def __post_init__(self):
        self.ratio = (self.c_out * self.s_out ** 2) / (self.c_in * self.s_in ** 2)


def placement_ratio(in_dims, out_dims):
    """Volume ratio (c_out * H_out * W_out) / (c_in * H_in * W_in); equals
    the square-form ratio when the spatial dims are square."""
    ci, hi, wi = in_dims
    co, ho, wo = out_dims
    return (co * ho * wo) / (ci * hi * wi)


def placement_scan(model):
    """One PlacementScore per conv layer; smaller ratio = better insertion
    point for the orthogonal block."""
    shapes = infer_shapes(model)
    scores = []
    for idx, spec in enumerate(model.layers):
        if spec.kind != "conv2d":
            continue
        c_in, h_in, w_in = shapes[idx]
        c_out, h_out, w_out = shapes[idx + 1]
        if h_in != w_in or h_out != w_out:
            raise ShapeError(
                f"placement_scan needs square spatial dims at layer {idx}, "
                f"got {h_in}x{w_in} -> {h_out}x{w_out}")
        scores.append(PlacementScore(layer_index=idx, c_in=c_in, c_out=c_out,
                                     s_in=h_in, s_out=h_out))
    return scores


def recommend_position(model):
    """Layer index of the lowest-ratio conv (ties go to the deepest layer,
    matching the place-near-the-head conclusion)."""
    scores = placement_scan(model)
    if not scores:
        raise ConfigurationError("model has no conv layers to score")
    best = min(scores, key=lambda s: (s.ratio, -s.layer_index))
    return best.layer_index
