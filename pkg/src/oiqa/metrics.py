"""Performance and robustness measurement.

Scores are min-max normalized with the model's training score range before
any robustness metric is computed.  AbsGain is the signed mean score change
under attack; the R-score is the log10 ratio of remaining score headroom to
achieved change (both floored at 1e-6); epsilon sweeps are summarized by
trapezoidal AUC with epsilon expressed in 1/255 units.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, CorrelationError, DataError
from . import attacks as attacks_mod
from .net import forward

R_SCORE_FLOOR = 1e-6
DEFAULT_EPS_GRID = tuple(k / 255.0 for k in (2, 4, 6, 8, 10))
DATASET_WEIGHTS = (2.0 / 3.0, 1.0 / 3.0)


@dataclass
class ScorePair:
    image_id: object
    clean: float
    attacked: float


def normalize(scores, score_range):
    """Min-max normalize with the model's training score range, clamped to [0, 1]."""
    if score_range is None:
        raise ConfigurationError("model has no score_range; train it first")
    lo, hi = score_range
    if not hi > lo:
        raise ConfigurationError(f"degenerate score range ({lo}, {hi})")
    s = (np.asarray(scores, dtype=np.float64) - lo) / (hi - lo)
    return np.clip(s, 0.0, 1.0)


def abs_gain(pairs):
    """Signed mean of (attacked - clean); positive means inflated scores."""
    if not pairs:
        raise DataError("abs_gain: no score pairs")
    return float(np.mean([p.attacked - p.clean for p in pairs]))


def r_score(pairs, beta0=0.0, beta1=1.0, log_base=10.0):
    """Mean log ratio of score headroom to achieved change (Eq. headroom/|delta|),
    numerator and denominator both floored at R_SCORE_FLOOR."""
    if not pairs:
        raise DataError("r_score: no score pairs")
    total = 0.0
    for p in pairs:
        headroom = max(beta1 - p.attacked, p.clean - beta0)
        num = max(headroom, R_SCORE_FLOOR)
        den = max(abs(p.attacked - p.clean), R_SCORE_FLOOR)
        total += np.log(num / den) / np.log(log_base)
    return float(total / len(pairs))


def auc_over_eps(curve):
    """Trapezoidal integral of (epsilon, value) points, epsilon in 1/255 units,
    so the default grid {2,...,10}/255 spans width 8."""
    if len(curve) < 2:
        raise DataError(f"auc_over_eps needs at least 2 points, got {len(curve)}")
    eps = np.array([e for e, _ in curve], dtype=np.float64)
    vals = np.array([v for _, v in curve], dtype=np.float64)
    if np.any(np.diff(eps) <= 0):
        raise DataError("auc_over_eps: epsilon grid must be strictly increasing")
    return float(np.trapezoid(vals, eps * 255.0))


def _rank_average(values):
    """Average ranks (1-based), ties receive the mean of their rank span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i: j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise DataError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 3:
        raise CorrelationError(f"need at least 3 points, got {len(a)}")
    da = a - a.mean()
    db = b - b.mean()
    va2 = float(np.sum(da * da))
    vb2 = float(np.sum(db * db))
    if va2 == 0.0 or vb2 == 0.0:
        raise CorrelationError("degenerate variance: correlation undefined")
    # sqrt(va2 * vb2) keeps r = +/-1 exact when the centered vectors coincide
    return float(np.sum(da * db) / np.sqrt(va2 * vb2))


def plcc(pred, labels):
    """Pearson linear correlation coefficient."""
    return _pearson(pred, labels)


def srocc(pred, labels):
    """Spearman rank correlation: Pearson of average ranks (ties get the
    mean rank)."""
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(pred) != len(labels):
        raise DataError(f"length mismatch: {len(pred)} vs {len(labels)}")
    if len(pred) < 3:
        raise CorrelationError(f"need at least 3 points, got {len(pred)}")
    return _pearson(_rank_average(pred), _rank_average(labels))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class RobustnessReport:
    """Aggregate performance + robustness numbers.

    abs_gain / r_score are the values at the largest epsilon; the full
    curves (and their AUCs) are stored alongside.
    """

    attack_kind: str
    srocc: float = None
    plcc: float = None
    abs_gain: float = 0.0
    r_score: float = 0.0
    eps_grid: list = field(default_factory=list)
    abs_gain_curve: list = field(default_factory=list)
    r_score_curve: list = field(default_factory=list)
    abs_gain_auc: float = None
    r_score_auc: float = None
    dataset_weights: list = None
    config_digest: str = ""

    def to_dict(self):
        return {
            "attack_kind": self.attack_kind,
            "srocc": self.srocc,
            "plcc": self.plcc,
            "abs_gain": self.abs_gain,
            "r_score": self.r_score,
            "eps_grid": list(self.eps_grid),
            "abs_gain_curve": list(self.abs_gain_curve),
            "r_score_curve": list(self.r_score_curve),
            "abs_gain_auc": self.abs_gain_auc,
            "r_score_auc": self.r_score_auc,
            "dataset_weights": self.dataset_weights,
            "config_digest": self.config_digest,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def weighted_summary(report_a, report_b, weights=DATASET_WEIGHTS):
    """Element-wise weighted mean of two reports (the 2:1 dataset blend)."""
    wa, wb = weights
    if abs(wa + wb - 1.0) > 1e-9:
        raise DataError(f"weights must sum to 1, got {weights}")
    if list(report_a.eps_grid) != list(report_b.eps_grid):
        raise DataError("epsilon grids differ; reports are not combinable")
    if report_a.attack_kind != report_b.attack_kind:
        raise DataError("attack kinds differ; reports are not combinable")

    def mix(x, y):
        if x is None or y is None:
            return None
        return wa * x + wb * y

    return RobustnessReport(
        attack_kind=report_a.attack_kind,
        srocc=mix(report_a.srocc, report_b.srocc),
        plcc=mix(report_a.plcc, report_b.plcc),
        abs_gain=mix(report_a.abs_gain, report_b.abs_gain),
        r_score=mix(report_a.r_score, report_b.r_score),
        eps_grid=list(report_a.eps_grid),
        abs_gain_curve=[mix(x, y) for x, y in zip(report_a.abs_gain_curve,
                                                  report_b.abs_gain_curve)],
        r_score_curve=[mix(x, y) for x, y in zip(report_a.r_score_curve,
                                                 report_b.r_score_curve)],
        abs_gain_auc=mix(report_a.abs_gain_auc, report_b.abs_gain_auc),
        r_score_auc=mix(report_a.r_score_auc, report_b.r_score_auc),
        dataset_weights=list(weights),
    )


def defense_criterion(gain_defended, gain_baseline):
    """The defense comparison made explicit: did the modification reduce the
    worst-case score gain?  Both values are reported, never assumed."""
    return {
        "gain_defended": float(gain_defended),
        "gain_baseline": float(gain_baseline),
        "defense_effective": bool(gain_defended < gain_baseline),
    }


def normalized_pairs(model, result):
    """Min-max normalize an AttackResult's scores into ScorePairs."""
    clean = normalize([o.clean_score for o in result.per_image], model.score_range)
    attacked = normalize([o.attacked_score for o in result.per_image], model.score_range)
    return [ScorePair(o.image_id, float(c), float(a))
            for o, c, a in zip(result.per_image, clean, attacked)]


def measure_robustness(model, samples, attack_kind="pgd", eps_grid=DEFAULT_EPS_GRID,
                       steps=1, step_size=1.0 / 255.0, seed=0, tau_flow=0.05,
                       pool=None):
    """Run the attack protocol over the epsilon grid and aggregate a report.

    `samples` is a list of (image, label) pairs; labels feed SROCC/PLCC on
    the clean scores, the attacks only see the images.
    """
    if not samples:
        raise DataError("measure_robustness: no samples")
    images = [x for x, _ in samples]
    labels = [y for _, y in samples]
    clean_scores = [forward(model, x) for x in images]
    report = RobustnessReport(attack_kind=attack_kind)
    try:
        report.srocc = srocc(clean_scores, labels)
        report.plcc = plcc(clean_scores, labels)
    except CorrelationError:
        pass  # unlabeled or degenerate: robustness part still applies
    gain_curve = []
    rs_curve = []
    for eps in eps_grid:
        config = attacks_mod.AttackConfig(kind=attack_kind, epsilon=eps, steps=steps,
                                          step_size=step_size, seed=seed,
                                          tau_flow=tau_flow)
        result = attacks_mod.run_attack(model, images, config, pool=pool)
        pairs = normalized_pairs(model, result)
        gain_curve.append(abs_gain(pairs))
        rs_curve.append(r_score(pairs))
    report.eps_grid = [float(e) for e in eps_grid]
    report.abs_gain_curve = gain_curve
    report.r_score_curve = rs_curve
    report.abs_gain = gain_curve[-1]
    report.r_score = rs_curve[-1]
    if len(eps_grid) >= 2:
        report.abs_gain_auc = auc_over_eps(list(zip(eps_grid, gain_curve)))
        report.r_score_auc = auc_over_eps(list(zip(eps_grid, rs_curve)))
    return report
