"""Three-stage defense: orthogonal-block insertion, channel pruning, and
fine-tuning; plus the activation-replacement study.

Pruning masks whole output channels by magnitude against a global quantile
threshold and keeps them at exactly zero through any later training (the
mask is re-applied after every optimizer step).  Zero-masking rather than
structural removal keeps shapes stable, so checkpoints, attacks, and
spectra stay comparable before/after.
"""

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import net
from .cayley import insert_robust_block
from .dataio import model_digest
from .errors import ConfigurationError, PruningError
from .net import ACTIVATION_KINDS, train
from .spectral import recommend_position

SMOOTH_ACTIVATIONS = ("elu", "silu", "gelu")
DEFAULT_PRUNE_RATE = 0.1
FINE_TUNE_EPOCHS = 5
FINE_TUNE_LR_FACTOR = 0.1  # fine-tune at training lr / 10


@dataclass
class PruneConfig:
    criterion: str = "l2"        # channel importance: l1 or l2 filter norm
    rate: float = DEFAULT_PRUNE_RATE
    scope: list = None           # eligible conv layer indices; None = all convs

    def __post_init__(self):
        if self.criterion not in ("l1", "l2"):
            raise ConfigurationError(f"unknown pruning criterion {self.criterion!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ConfigurationError(f"prune rate must be in [0, 1), got {self.rate}")


@dataclass
class PruneReport:
    masked: dict = field(default_factory=dict)        # layer index -> channel list
    total_masked: int = 0
    threshold: float = None
    channel_norms: dict = field(default_factory=dict)  # layer index -> per-channel mu


def _conv_scope(model, scope):
    indices = [i for i, s in enumerate(model.layers) if s.kind == "conv2d"]
    if scope is None:
        return indices
    bad = [i for i in scope if i not in indices]
    if bad:
        raise ConfigurationError(f"scope entries {bad} are not conv layers")
    return list(scope)


def channel_importance(model, layer_idx, criterion="l2"):
    """Per-output-channel filter norm of a conv layer."""
    w = model.params[model.layers[layer_idx].param_ids[0]]
    flat = w.reshape(w.shape[0], -1)
    if criterion == "l1":
        return np.sum(np.abs(flat), axis=1)
    return np.sqrt(np.sum(flat * flat, axis=1))


def prune_channels(model, config):
    """Mask the floor(rate * N) lowest-importance channels across the scope.

    Ties break toward lower layer index, then lower channel index.  Raises
    PruningError if any single layer would lose all of its channels.
    Returns (pruned model, PruneReport); rate 0 returns the model unchanged.
    """
    scope = _conv_scope(model, config.scope)
    if config.rate > 0 and not scope:
        raise ConfigurationError("prune rate > 0 but no conv layers in scope")
    report = PruneReport()
    entries = []
    for idx in scope:
        mu = channel_importance(model, idx, config.criterion)
        report.channel_norms[idx] = mu.tolist()
        entries.extend((float(mu[c]), idx, c) for c in range(len(mu)))
    count = int(np.floor(config.rate * len(entries)))
    if count == 0:
        return model, report
    entries.sort()
    chosen = entries[:count]
    report.threshold = chosen[-1][0]
    report.total_masked = count
    masked = {}
    for _, idx, c in chosen:
        masked.setdefault(idx, []).append(c)
    for idx, channels in masked.items():
        total = len(report.channel_norms[idx])
        if len(channels) >= total:
            raise PruningError(
                f"rate {config.rate} would mask all {total} channels of layer {idx}")
    pruned = model.copy()
    for idx, channels in sorted(masked.items()):
        channels = sorted(channels)
        report.masked[idx] = channels
        existing = set(pruned.masks.get(idx, []))
        pruned.masks[idx] = sorted(existing.union(channels))
    net.apply_masks(pruned)
    return pruned, report


def fine_tune(model, dataset, epochs=FINE_TUNE_EPOCHS, lr=1e-4, seed=0, batch_size=32,
              optimizer="adam"):
    """Recalibrate after structural changes; masks stay applied and the
    score range is recomputed.  Mutates and returns the model."""
    result = train(model, dataset, epochs=epochs, lr=lr, optimizer=optimizer,
                   batch_size=batch_size, seed=seed)
    return result.model


def replace_activations(model, mode, activation):
    """Swap ReLU layers for a smooth activation.

    Full mode replaces every ReLU; partial mode only those on layers tagged
    fresh (not pre-trained).  Parameters are untouched.  Returns
    (model', report) where the report counts replacements and flags the
    no-op case.
    """
    if mode not in ("full", "partial"):
        raise ConfigurationError(f"unknown replacement mode {mode!r}")
    if activation not in SMOOTH_ACTIVATIONS:
        raise ConfigurationError(
            f"activation must be one of {SMOOTH_ACTIVATIONS}, got {activation!r}")
    new = model.copy()
    replaced = 0
    for spec in new.layers:
        if spec.kind != "relu":
            continue
        if mode == "partial" and not spec.fresh:
            continue
        spec.kind = activation
        replaced += 1
    report = {"mode": mode, "activation": activation, "replaced": replaced,
              "remaining_relu": sum(1 for s in new.layers if s.kind == "relu"),
              "warning": None}
    if mode == "partial" and replaced == 0:
        report["warning"] = "no fresh ReLU layers: nothing replaced"
    return new, report


@dataclass
class DefendOptions:
    position: int = None         # None: use the placement-scan recommendation
    skip_block: bool = False
    rate: float = DEFAULT_PRUNE_RATE
    criterion: str = "l2"
    epochs: int = FINE_TUNE_EPOCHS
    lr: float = 1e-4             # training default 1e-3 scaled by 1/10
    batch_size: int = 32
    seed: int = 0
    kernel_size: int = 3

    def to_dict(self):
        return asdict(self)


def defend(model, dataset, options=None):
    """RobustBlock insertion -> channel pruning -> fine-tuning.

    Returns (defended model, provenance dict).  The provenance carries the
    exact options, seeds, chosen position, mask lists and the content
    hashes of the input/output checkpoints, enough to replay bit-exactly.
    """
    options = options or DefendOptions()
    provenance = {"options": options.to_dict(), "input_model_sha256": model_digest(model)}

    current = model.copy()
    if options.skip_block:
        provenance["position"] = None
    else:
        position = options.position
        if position is None:
            position = recommend_position(current)
        current = insert_robust_block(current, position, seed=options.seed,
                                      kernel_size=options.kernel_size)
        provenance["position"] = int(position)

    prune_cfg = PruneConfig(criterion=options.criterion, rate=options.rate)
    current, prune_report = prune_channels(current, prune_cfg)
    provenance["masks"] = {str(k): v for k, v in sorted(prune_report.masked.items())}
    provenance["prune_threshold"] = prune_report.threshold
    provenance["total_masked"] = prune_report.total_masked

    changed = not options.skip_block or options.rate > 0
    if changed and options.epochs > 0:
        current = fine_tune(current, dataset, epochs=options.epochs, lr=options.lr,
                            seed=options.seed, batch_size=options.batch_size)
        provenance["fine_tuned_epochs"] = options.epochs
    else:
        provenance["fine_tuned_epochs"] = 0

    provenance["output_model_sha256"] = model_digest(current)
    provenance["config_sha256"] = hashlib.sha256(
        json.dumps(provenance["options"], sort_keys=True).encode()).hexdigest()
    return current, provenance
