"""Score-inflation attacks: per-image PGD, a universal perturbation, and a
spatial-transform (flow-field) attack.

All attacks maximize the model score.  PGD and the universal perturbation
live in an l-inf ball of radius epsilon (expressed in k/255 units of the
[0, 1] pixel domain); the spatial attack instead optimizes a smooth
per-pixel flow and is bounded through its smoothness penalty.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError
from .net import forward, value_and_grad

ATTACK_KINDS = ("pgd", "uap", "stadv")


@dataclass
class AttackConfig:
    kind: str
    epsilon: float = 4.0 / 255.0
    steps: int = 1
    step_size: float = 1.0 / 255.0
    tau_flow: float = 0.05      # stadv flow-smoothness weight
    seed: int = 0
    random_start: bool = False  # pgd: start from a random point in the ball

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.step_size <= 0:
            raise ConfigurationError(f"step_size must be > 0, got {self.step_size}")


@dataclass
class ImageOutcome:
    image_id: object
    clean_score: float
    attacked_score: float
    linf: float                 # achieved pixel-space l-inf norm


@dataclass
class AttackResult:
    """Per-image outcomes plus the raw perturbation tensors.

    Pixel perturbations (pgd delta, uap v) live in the l-inf ball; the
    attacked image is clip(x + delta, 0, 1), and the reported linf is
    measured on that applied image.  stadv stores flow fields instead.
    """

    config: AttackConfig
    per_image: list
    perturbations: list = field(default_factory=list)  # one per image (pgd), flows (stadv)
    universal: np.ndarray = None                       # shared v for uap

    @property
    def mean_gain(self):
        return float(np.mean([o.attacked_score - o.clean_score for o in self.per_image]))


def pgd_attack(model, x, config, image_id=0):
    """Sign-gradient ascent projected onto B_inf(x, eps) intersect [0, 1]^d.

    The perturbation is the iterate (kept in delta coordinates, so the ball
    projection is a plain clip, bit-identical to the universal attack's);
    gradients are taken at the feasible point clip(x + delta, 0, 1).
    Starts from delta = 0 (or a seeded random point when
    config.random_start) and returns the best post-step iterate by score,
    so the reported gain may still be negative.
    """
    x = np.asarray(x, dtype=np.float64)
    clean = forward(model, x)
    if config.random_start and config.epsilon > 0:
        rng = np.random.default_rng(config.seed)
        delta = rng.uniform(-config.epsilon, config.epsilon, size=x.shape)
    else:
        delta = np.zeros_like(x)
    best_score = -np.inf
    best_delta = delta
    for _ in range(config.steps):
        point = np.clip(x + delta, 0.0, 1.0)
        _, grads = value_and_grad(model, point)
        delta = np.clip(delta + config.step_size * np.sign(grads.by_input),
                        -config.epsilon, config.epsilon)
        score = forward(model, np.clip(x + delta, 0.0, 1.0))
        if score > best_score:
            best_score = score
            best_delta = delta
    attacked = np.clip(x + best_delta, 0.0, 1.0)
    outcome = ImageOutcome(image_id=image_id, clean_score=clean,
                           attacked_score=float(best_score),
                           linf=float(np.max(np.abs(attacked - x))))
    return AttackResult(config=config, per_image=[outcome], perturbations=[best_delta])


def uap_train(model, images, config, image_ids=None):
    """Train a single universal perturbation over the whole dataset.

    Each step averages the input gradients at x_i + v over all images (in
    index order) and takes a projected sign step; the same final v is
    applied to every image.
    """
    images = [np.asarray(x, dtype=np.float64) for x in images]
    if not images:
        raise DataError("uap_train: dataset is empty")
    if image_ids is None:
        image_ids = list(range(len(images)))
    v = np.zeros_like(images[0])
    for _ in range(config.steps):
        mean_grad = np.zeros_like(v)
        for x in images:
            _, grads = value_and_grad(model, x + v)
            mean_grad += grads.by_input
        mean_grad /= len(images)
        v = np.clip(v + config.step_size * np.sign(mean_grad),
                    -config.epsilon, config.epsilon)
    per_image = []
    for image_id, x in zip(image_ids, images):
        attacked = np.clip(x + v, 0.0, 1.0)
        per_image.append(ImageOutcome(
            image_id=image_id,
            clean_score=forward(model, x),
            attacked_score=forward(model, attacked),
            linf=float(np.max(np.abs(attacked - x)))))
    return AttackResult(config=config, per_image=per_image, universal=v)


# ---------------------------------------------------------------------------
# spatial-transform attack
# ---------------------------------------------------------------------------

def bilinear_warp(x, flow):
    """Bilinearly sample x (C, H, W) at (i + flow[0], j + flow[1]).

    Sample coordinates are clamped to the image, so a constant image is a
    fixed point of any flow.  Returns (warped, cache) where the cache feeds
    warp_flow_grad.
    """
    c, h, w = x.shape
    if flow.shape != (2, h, w):
        raise ConfigurationError(f"flow must be (2, {h}, {w}), got {flow.shape}")
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    raw_r = ii + flow[0]
    raw_c = jj + flow[1]
    r = np.clip(raw_r, 0.0, h - 1.0)
    cc = np.clip(raw_c, 0.0, w - 1.0)
    r0 = np.clip(np.floor(r), 0, h - 2).astype(np.intp) if h > 1 else np.zeros_like(r, dtype=np.intp)
    c0 = np.clip(np.floor(cc), 0, w - 2).astype(np.intp) if w > 1 else np.zeros_like(cc, dtype=np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    wr = r - r0
    wc = cc - c0
    g00 = x[:, r0, c0]
    g01 = x[:, r0, c1]
    g10 = x[:, r1, c0]
    g11 = x[:, r1, c1]
    warped = ((1 - wr) * (1 - wc) * g00 + (1 - wr) * wc * g01
              + wr * (1 - wc) * g10 + wr * wc * g11)
    # flow coordinates outside the image are clamped: zero derivative there
    live_r = ((raw_r > 0.0) & (raw_r < h - 1.0)).astype(np.float64)
    live_c = ((raw_c > 0.0) & (raw_c < w - 1.0)).astype(np.float64)
    cache = (g00, g01, g10, g11, wr, wc, live_r, live_c)
    return warped, cache


def warp_flow_grad(cache, g_warped):
    """Chain d(sum g_warped * warped)/d flow through the bilinear weights."""
    g00, g01, g10, g11, wr, wc, live_r, live_c = cache
    d_dr = (1 - wc) * (g10 - g00) + wc * (g11 - g01)
    d_dc = (1 - wr) * (g01 - g00) + wr * (g11 - g10)
    g_r = np.sum(g_warped * d_dr, axis=0) * live_r
    g_c = np.sum(g_warped * d_dc, axis=0) * live_c
    return np.stack([g_r, g_c])


def flow_tv(flow):
    """Sum of squared forward differences of both flow components."""
    dr = np.diff(flow, axis=1)
    dc = np.diff(flow, axis=2)
    return float(np.sum(dr * dr) + np.sum(dc * dc))


def flow_tv_grad(flow):
    g = np.zeros_like(flow)
    dr = np.diff(flow, axis=1)
    dc = np.diff(flow, axis=2)
    g[:, :-1, :] -= 2 * dr
    g[:, 1:, :] += 2 * dr
    g[:, :, :-1] -= 2 * dc
    g[:, :, 1:] += 2 * dc
    return g


def stadv_attack(model, x, config, image_id=0):
    """Gradient ascent on score(warp(x, flow)) - tau_flow * TV(flow).

    Normalized l-inf gradient steps of config.step_size pixels; the final
    flow and warped image are returned.
    """
    x = np.asarray(x, dtype=np.float64)
    clean = forward(model, x)
    flow = np.zeros((2,) + x.shape[1:])
    for _ in range(config.steps):
        warped, cache = bilinear_warp(x, flow)
        _, grads = value_and_grad(model, warped)
        g = warp_flow_grad(cache, grads.by_input) - config.tau_flow * flow_tv_grad(flow)
        gmax = float(np.max(np.abs(g)))
        if gmax > 0:
            flow = flow + config.step_size * g / gmax
    warped, _ = bilinear_warp(x, flow)
    outcome = ImageOutcome(image_id=image_id, clean_score=clean,
                           attacked_score=forward(model, warped),
                           linf=float(np.max(np.abs(warped - x))))
    result = AttackResult(config=config, per_image=[outcome], perturbations=[flow])
    return result


def run_attack(model, images, config, image_ids=None, pool=None):
    """Attack every image; per-image attacks may run on a thread pool but
    results are always assembled in input order."""
    images = [np.asarray(x, dtype=np.float64) for x in images]
    if not images:
        raise DataError("run_attack: dataset is empty")
    if image_ids is None:
        image_ids = list(range(len(images)))
    if config.kind == "uap":
        return uap_train(model, images, config, image_ids=image_ids)
    per_image_fn = pgd_attack if config.kind == "pgd" else stadv_attack
    if pool is None:
        singles = [per_image_fn(model, x, config, image_id=i)
                   for i, x in zip(image_ids, images)]
    else:
        futures = [pool.submit(per_image_fn, model, x, config, image_id=i)
                   for i, x in zip(image_ids, images)]
        singles = [f.result() for f in futures]
    result = AttackResult(config=config,
                          per_image=[s.per_image[0] for s in singles],
                          perturbations=[s.perturbations[0] for s in singles])
    return result
