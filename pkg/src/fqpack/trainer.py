"""Fine-tuning that walks a network onto the quantization grid in stages.

Every weight keeps a float shadow. At each schedule step a growing
top-magnitude fraction of the unpruned shadows forwards through the
quantizer (decode(encode(w)), scaled by a trainable per-layer alpha) while
the rest forward as raw floats; pruned positions stay at zero. Backward is
straight-through: the quantizer is treated as identity, so quantized shadows
receive alpha * dL/dw_eff and alpha receives sum(dL/dw_eff * decode(w)).

Quantization parameters (mode, component means/scale, grid bias, component
assignments) are fitted before the first epoch and refitted on a refresh
schedule — after epochs k, k*g, k*g^2, ... (or every k epochs with
refresh_mode "fixed"). A layer's mode is decided by its first fit and kept
thereafter, so refreshes adjust the grid without flipping the layer between
representations mid-run.

The batch order is one fixed seeded permutation reused every epoch, and a
zero learning rate runs fully inert (no weight, alpha, or BN-statistic
updates), which makes training exactly reproducible and cheap to test.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .codec import CompressedModel
from .errors import DegenerateInputError, TrainingDivergedError
from .focused_quant import (
    DEFAULT_W_SEP,
    MODE_RECENTRALIZED,
    MODE_SHIFT,
    MIN_BITS_RECENTRALIZED,
    LayerQuantization,
    fq_pack_array,
    round_hyperparams,
)
from .mixture import fit_em, sample_assignments, wasserstein_separation
from .nn import softmax_cross_entropy
from .pruner import prune_by_magnitude
from .rng import derive_seed, spawn_seed
from .shift_quant import ShiftGrid, dequantize_array, select_bias, shift_quantize_array


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs_per_step: int = 3
    inq_fractions: tuple = (0.25, 0.5, 0.75, 0.875, 1.0)
    refresh_interval: int = 1
    refresh_growth: int = 2
    refresh_mode: str = "exponential"
    momentum: float = 0.0
    batch_size: int = 64
    seed: int = 0
    w_sep: float = DEFAULT_W_SEP
    n_bits: int = 5
    prune_fraction: float = 0.5
    lr_decay: float = 0.1
    lr_decay_every: int = 3

    def __post_init__(self):
        f = tuple(float(v) for v in self.inq_fractions)
        if not f or f[-1] != 1.0:
            raise ValueError("inq_fractions must end at 1.0")
        if any(not 0.0 < v <= 1.0 for v in f) or any(
            b <= a for a, b in zip(f, f[1:])
        ):
            raise ValueError("inq_fractions must be strictly increasing in (0, 1]")
        self.inq_fractions = f
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs_per_step < 1 or self.batch_size < 1:
            raise ValueError("epochs_per_step and batch_size must be >= 1")
        if self.refresh_mode not in ("exponential", "fixed"):
            raise ValueError(f"unknown refresh_mode {self.refresh_mode!r}")
        if self.refresh_interval < 1 or self.refresh_growth < 1:
            raise ValueError("refresh_interval and refresh_growth must be >= 1")
        if not 3 <= self.n_bits <= 8:
            raise ValueError("n_bits must be in [3, 8]")
        if not 0.0 <= self.prune_fraction < 1.0:
            raise ValueError("prune_fraction must be in [0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")

    @property
    def total_epochs(self) -> int:
        return self.epochs_per_step * len(self.inq_fractions)


def refresh_epochs(config: TrainConfig) -> set:
    """Global epochs after which quantization parameters are refitted."""
    total = config.total_epochs
    epochs = set()
    if config.refresh_mode == "fixed":
        e = config.refresh_interval
        while e <= total:
            epochs.add(e)
            e += config.refresh_interval
    else:
        e = config.refresh_interval
        while e <= total:
            epochs.add(e)
            if config.refresh_growth == 1:
                e += config.refresh_interval
            else:
                e *= config.refresh_growth
    return epochs


@dataclass
class _LayerState:
    """Shadow weights and quantizer state for one trainable layer."""

    name: str
    layer: object
    shadow: np.ndarray  # flat float64
    kept: np.ndarray  # bool, False = pruned
    quantized: np.ndarray = None  # bool over flat positions, subset of kept
    alpha: float = 1.0
    mode: Optional[str] = None
    bias: int = 0
    mu: tuple = (0.0, 0.0)
    sigma: float = 1.0
    assignment: Optional[np.ndarray] = None  # component per kept position
    wsep: float = 0.0
    velocity: np.ndarray = None
    alpha_velocity: float = 0.0
    q_pre: np.ndarray = field(default=None, repr=False)  # pre-alpha decode cache

    def __post_init__(self):
        if self.quantized is None:
            self.quantized = np.zeros(self.shadow.size, dtype=bool)
        if self.velocity is None:
            self.velocity = np.zeros(self.shadow.size)


def _fit_params(state: _LayerState, config: TrainConfig, seed: int):
    """(Re)fit mixture, grid bias and assignments from the current shadows.

    The first fit chooses the layer's mode; later fits keep it. If the
    shadows have degenerated (all zero / all equal), existing parameters are
    left in place rather than guessed.
    """
    kept_vals = state.shadow[state.kept]
    first = state.mode is None
    if kept_vals.size == 0:
        raise DegenerateInputError(f"layer {state.name!r}: all weights pruned")
    if not np.any(kept_vals != 0.0):
        if first:
            raise DegenerateInputError(f"layer {state.name!r}: no nonzero weights")
        return
    try:
        model = fit_em(kept_vals)
    except DegenerateInputError:
        model = None
    if model is not None:
        state.wsep = wasserstein_separation(model, float(kept_vals.var()))
    if first:
        wants_rec = (
            model is not None
            and state.wsep >= config.w_sep
            and config.n_bits >= MIN_BITS_RECENTRALIZED
        )
        state.mode = MODE_RECENTRALIZED if wants_rec else MODE_SHIFT
    if state.mode == MODE_RECENTRALIZED:
        if model is None:
            return  # keep the previous grid; nothing sane to refit from
        assignment = sample_assignments(model, kept_vals, seed)
        rounded = round_hyperparams(model)
        sigma = float(np.float32(rounded.sigma[0]))
        mu = rounded.mu
        normalized = (kept_vals - mu[assignment.component]) / sigma
        if not np.any(normalized != 0.0):
            return
        state.assignment = assignment.component
        state.mu = (float(mu[0]), float(mu[1]))
        state.sigma = sigma
        state.bias = select_bias(normalized, config.n_bits - 3)
    else:
        state.mu, state.sigma, state.assignment = (0.0, 0.0), 1.0, None
        state.bias = select_bias(kept_vals, config.n_bits - 2)


def inq_partition(weights: np.ndarray, kept: np.ndarray, fraction: float):
    """Split the kept positions into (quantized, free) boolean masks.

    The top ``fraction`` of kept weights by magnitude (ties to the lower
    index) quantize; the rest stay free. Partitions nest as the fraction
    grows because the magnitude ordering is fixed.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    flat = np.asarray(weights, dtype=np.float64).ravel()
    kept = np.asarray(kept, dtype=bool).ravel()
    if flat.size != kept.size:
        raise ValueError("weights and mask sizes differ")
    kept_idx = np.nonzero(kept)[0]
    count = int(np.floor(fraction * kept_idx.size))
    quantized = np.zeros(flat.size, dtype=bool)
    if count > 0:
        order = np.argsort(-np.abs(flat[kept_idx]), kind="stable")
        quantized[kept_idx[order[:count]]] = True
    return quantized, kept & ~quantized


def _grow_quantized(state: _LayerState, fraction: float):
    """Extend the quantized set to the current top-fraction partition.

    Union with the previous set keeps membership monotone even if shadow
    magnitudes reorder between steps.
    """
    quantized, _ = inq_partition(state.shadow, state.kept, fraction)
    state.quantized |= quantized


def _effective_weights(state: _LayerState, n_bits: int) -> np.ndarray:
    """Flat weights the network actually runs: quantized / raw / zero mix."""
    w = np.where(state.kept, state.shadow, 0.0)
    kept_vals = state.shadow[state.kept]
    if state.mode == MODE_RECENTRALIZED:
        mu = np.array(state.mu)[state.assignment]
        normalized = (kept_vals - mu) / state.sigma
        grid = ShiftGrid(n_bits - 3, state.bias)
        codes, _ = shift_quantize_array(normalized, grid)
        q_kept = state.sigma * dequantize_array(codes, grid) + mu
    else:
        grid = ShiftGrid(n_bits - 2, state.bias)
        codes, _ = shift_quantize_array(kept_vals, grid)
        q_kept = dequantize_array(codes, grid)
    q_pre = np.zeros(state.shadow.size)
    q_pre[state.kept] = q_kept
    state.q_pre = q_pre
    on_grid = state.quantized & state.kept
    w[on_grid] = state.alpha * q_pre[on_grid]
    return w


def _install_weights(states, n_bits: int):
    for state in states:
        state.layer.w = _effective_weights(state, n_bits).reshape(state.layer.w.shape)


def _apply_gradients(state: _LayerState, lr: float, momentum: float):
    """Straight-through update of shadows and alpha from the layer gradient."""
    dw = state.layer.dw.ravel()
    on_grid = state.quantized & state.kept
    free = state.kept & ~state.quantized
    dshadow = np.zeros_like(state.shadow)
    dshadow[on_grid] = state.alpha * dw[on_grid]
    dshadow[free] = dw[free]
    state.velocity = momentum * state.velocity + dshadow
    state.shadow -= lr * state.velocity
    dalpha = float(np.dot(dw[on_grid], state.q_pre[on_grid]))
    state.alpha_velocity = momentum * state.alpha_velocity + dalpha
    state.alpha -= lr * state.alpha_velocity
    # batch norm keeps the loss finite long after the weights explode, so
    # divergence has to be caught at the update itself; anything outside the
    # single-precision range can never quantize sanely (alpha is stored f32)
    limit = float(np.finfo(np.float32).max)
    ok = abs(state.alpha) <= limit and bool(
        np.all(np.abs(state.shadow) <= limit)
    )
    if not ok:
        raise TrainingDivergedError(
            f"layer {state.name!r}: weights left the single-precision "
            "range after an update"
        )


def _bn_step(net, lr: float):
    for bn in getattr(net, "bns", []):
        bn.gamma -= lr * bn.dgamma
        bn.beta -= lr * bn.dbeta


def _check_loss(loss: float, where: str):
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss at {where}")


def _final_quantization(state: _LayerState, n_bits: int) -> LayerQuantization:
    kept_vals = state.shadow[state.kept]
    symbols = np.zeros(state.shadow.size, dtype=np.int64)
    if state.mode == MODE_RECENTRALIZED:
        mu = np.array(state.mu)[state.assignment]
        normalized = (kept_vals - mu) / state.sigma
        codes, _ = shift_quantize_array(normalized, ShiftGrid(n_bits - 3, state.bias))
        symbols[state.kept] = fq_pack_array(state.assignment, codes, n_bits)
    else:
        codes, _ = shift_quantize_array(kept_vals, ShiftGrid(n_bits - 2, state.bias))
        symbols[state.kept] = codes
    return LayerQuantization(
        name=state.name, mode=state.mode, n_bits=n_bits, alpha=state.alpha,
        bias=state.bias, mu=state.mu, sigma=state.sigma, symbols=symbols,
        wsep=state.wsep,
    )


@dataclass
class InqResult:
    compressed: CompressedModel
    history: list  # (global epoch, mean loss, top1 or None)
    wsep: dict  # layer name -> separation at the last fit
    modes: dict  # layer name -> mode


def finetune_inq(net, images: np.ndarray, labels: np.ndarray,
                 config: TrainConfig, eval_set=None) -> InqResult:
    """Prune, then fine-tune ``net`` onto the quantization grid in place.

    On return the network's weights are the final quantized values (its
    accuracy is the quantized accuracy) and the returned compressed model
    encodes exactly those weights. ``eval_set`` = (images, labels) adds a
    per-epoch top-1 column to the history.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.shape[0] != labels.shape[0]:
        raise ValueError("images and labels disagree on the sample count")
    states = []
    for name, layer in net.weight_layers():
        flat = layer.w.ravel().astype(np.float64)
        mask = prune_by_magnitude(flat, config.prune_fraction)
        kept = mask.mask == 1
        state = _LayerState(name=name, layer=layer,
                            shadow=np.where(kept, flat, 0.0), kept=kept)
        _fit_params(state, config, derive_seed(config.seed, name))
        states.append(state)

    perm = np.random.default_rng(spawn_seed(config.seed, "shuffle")).permutation(
        images.shape[0]
    )
    batches = [perm[i : i + config.batch_size]
               for i in range(0, perm.size, config.batch_size)]
    refresh_at = refresh_epochs(config)
    history = []
    global_epoch = 0
    final_step = len(config.inq_fractions) - 1
    for step, fraction in enumerate(config.inq_fractions):
        for state in states:
            _grow_quantized(state, fraction)
        for local in range(config.epochs_per_step):
            global_epoch += 1
            lr = config.learning_rate
            if step == final_step and config.lr_decay_every > 0:
                lr *= config.lr_decay ** (local // config.lr_decay_every)
            losses = []
            if lr == 0.0:
                _install_weights(states, config.n_bits)
                for batch in batches:
                    loss, _ = softmax_cross_entropy(
                        net.forward(images[batch], training=False), labels[batch]
                    )
                    _check_loss(loss, f"epoch {global_epoch}")
                    losses.append(loss)
            else:
                for batch in batches:
                    _install_weights(states, config.n_bits)
                    logits = net.forward(images[batch], training=True)
                    loss, dlogits = softmax_cross_entropy(logits, labels[batch])
                    _check_loss(loss, f"epoch {global_epoch}")
                    losses.append(loss)
                    net.backward(dlogits)
                    for state in states:
                        _apply_gradients(state, lr, config.momentum)
                    _bn_step(net, lr)
            top1 = None
            if eval_set is not None:
                _install_weights(states, config.n_bits)
                top1 = top1_accuracy(net.predict(eval_set[0]), eval_set[1])
            history.append((global_epoch, float(np.mean(losses)), top1))
            if global_epoch in refresh_at and global_epoch < config.total_epochs:
                for state in states:
                    # same per-layer seed as the first fit: refitting from
                    # unchanged shadows reproduces the same parameters
                    _fit_params(state, config, derive_seed(config.seed, state.name))

    for state in states:
        alpha32 = float(np.float32(state.alpha))
        if not np.isfinite(alpha32):
            raise TrainingDivergedError(
                f"layer {state.name!r}: scale overflowed single precision"
            )
        state.alpha = alpha32
    _install_weights(states, config.n_bits)
    compressed = CompressedModel([
        _final_quantization(state, config.n_bits) for state in states
    ])
    return InqResult(
        compressed=compressed, history=history,
        wsep={s.name: s.wsep for s in states},
        modes={s.name: s.mode for s in states},
    )


def train_float(net, images: np.ndarray, labels: np.ndarray, epochs: int,
                learning_rate: float, momentum: float = 0.9,
                batch_size: int = 64, seed: int = 0, eval_set=None) -> list:
    """Plain SGD baseline training; returns (epoch, loss, top1) history."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    perm = np.random.default_rng(spawn_seed(seed, "shuffle")).permutation(
        images.shape[0]
    )
    batches = [perm[i : i + batch_size] for i in range(0, perm.size, batch_size)]
    layers = net.weight_layers()
    velocity = {name: np.zeros_like(layer.w) for name, layer in layers}
    history = []
    for epoch in range(1, epochs + 1):
        losses = []
        for batch in batches:
            logits = net.forward(images[batch], training=True)
            loss, dlogits = softmax_cross_entropy(logits, labels[batch])
            _check_loss(loss, f"epoch {epoch}")
            losses.append(loss)
            net.backward(dlogits)
            for name, layer in layers:
                velocity[name] = momentum * velocity[name] + layer.dw
                layer.w -= learning_rate * velocity[name]
            _bn_step(net, learning_rate)
        top1 = None
        if eval_set is not None:
            top1 = top1_accuracy(net.predict(eval_set[0]), eval_set[1])
        history.append((epoch, float(np.mean(losses)), top1))
    return history


METRICS_HEADER = "epoch,loss,top1"


def metrics_csv(history) -> str:
    lines = [METRICS_HEADER]
    for epoch, loss, top1 in history:
        tail = "" if top1 is None else f"{top1:.4f}"
        lines.append(f"{epoch},{loss:.6f},{tail}")
    return "\n".join(lines) + "\n"


def top1_accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("prediction/label shapes differ")
    return float(np.mean(predictions == labels))


def sweep_grid(lo: float = 1.0, hi: float = 3.5, step: float = 0.1) -> tuple:
    """Separation-threshold grid, endpoints inclusive."""
    count = int(round((hi - lo) / step)) + 1
    return tuple(round(lo + i * step, 10) for i in range(count))


def wsep_sweep(base_net, images, labels, test_images, test_labels,
               config: TrainConfig, grid=None, repeats: int = 1):
    """Fine-tune across a grid of separation thresholds.

    Each (threshold, repeat) cell clones the base network and runs the full
    schedule with a seed derived from (config.seed, cell), then scores top-1
    on the held-out set. Returns (detail, summary, modes): detail rows are
    (wsep, run, top1), summary rows (wsep, mean, std), and mode rows
    (wsep, run, layer, mode) record the per-layer decisions of each cell.
    """
    if grid is None:
        grid = sweep_grid()
    detail = []
    modes = []
    for i, wsep in enumerate(grid):
        for run in range(repeats):
            cfg = replace(config, w_sep=float(wsep),
                          seed=spawn_seed(config.seed, "sweep", i, run))
            net = base_net.clone()
            result = finetune_inq(net, images, labels, cfg)
            top1 = top1_accuracy(net.predict(test_images), test_labels)
            detail.append((float(wsep), run, top1))
            modes += [(float(wsep), run, name, mode)
                      for name, mode in result.modes.items()]
    summary = []
    for wsep in grid:
        vals = np.array([t for w, _, t in detail if w == float(wsep)])
        summary.append((float(wsep), float(vals.mean()), float(vals.std())))
    return detail, summary, modes


SWEEP_DETAIL_HEADER = "wsep,run,top1"
SWEEP_SUMMARY_HEADER = "wsep,mean_top1,std_top1"


def sweep_detail_csv(rows) -> str:
    lines = [SWEEP_DETAIL_HEADER]
    lines += [f"{w:.1f},{run},{top1:.4f}" for w, run, top1 in rows]
    return "\n".join(lines) + "\n"


def sweep_summary_csv(rows) -> str:
    lines = [SWEEP_SUMMARY_HEADER]
    lines += [f"{w:.1f},{mean:.4f},{std:.4f}" for w, mean, std in rows]
    return "\n".join(lines) + "\n"
