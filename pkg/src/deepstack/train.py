"""Adam, warmup + linear/cosine learning-rate schedules, and the training loop."""

from __future__ import annotations

import csv
import math
import os
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import checkpoint as ckpt
from . import numcore as nc
from .errors import CheckpointError, ConfigError, ContractError, DivergenceError, NonFiniteError
from .model import Model, lm_loss

METRICS_HEADER = ("step", "lr", "loss", "ppl", "grad_norm_global", "elapsed_s")
DECAY_STYLES = ("linear", "cosine")
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 50
FINAL_LOSS_WINDOW = 10


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    lr: float
    min_lr: float = 0.0
    decay_style: str = "cosine"
    warmup_fraction: float = 0.0
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ConfigError(f"steps must be an integer >= 1, got {self.steps!r}")
        for name in ("lr", "min_lr", "weight_decay", "adam_eps", "warmup_fraction"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.min_lr > self.lr:
            raise ConfigError(f"min_lr {self.min_lr} exceeds lr {self.lr}")
        if self.decay_style not in DECAY_STYLES:
            raise ConfigError(f"lr decay style must be one of {DECAY_STYLES}, got {self.decay_style!r}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup fraction must be in [0, 1), got {self.warmup_fraction}")
        for name in ("adam_beta1", "adam_beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        if self.grad_clip is not None and not (math.isfinite(self.grad_clip) and self.grad_clip > 0):
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")

    @property
    def warmup_steps(self) -> int:
        return round(self.warmup_fraction * self.steps)


def lr_at(step: int, config: TrainConfig) -> float:
    """Learning rate for the update numbered ``step`` (1-based; 0 is allowed)."""
    if step < 0 or step > config.steps:
        raise ContractError(f"step {step} outside [0, {config.steps}]")
    warm = config.warmup_steps
    if step < warm:
        return config.lr * (step / warm)
    if step == warm:
        return config.lr
    if step == config.steps:
        return config.min_lr
    # the endpoints above are returned exactly; the formulas below can be off by an ulp there
    progress = (step - warm) / (config.steps - warm)
    if config.decay_style == "linear":
        return config.lr + (config.min_lr - config.lr) * progress
    return config.min_lr + 0.5 * (config.lr - config.min_lr) * (1.0 + math.cos(math.pi * progress))


def perplexity(mean_loss: float) -> float:
    if not math.isfinite(mean_loss):
        raise ContractError(f"perplexity needs a finite loss, got {mean_loss}")
    return math.exp(mean_loss)


# -- optimizer -----------------------------------------------------------------
@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    m_flat: np.ndarray | None = None
    v_flat: np.ndarray | None = None


def _flat_views(shapes: dict[str, tuple], dtype):
    total = int(np.sum([int(np.prod(s)) for s in shapes.values()]))
    buf = np.zeros(total, dtype=dtype)
    views, pos = {}, 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        views[name] = buf[pos : pos + n].reshape(shape)
        pos += n
    return buf, views


def init_optimizer(params: dict[str, nc.Tensor]) -> OptimizerState:
    shapes = {k: p.shape for k, p in params.items()}
    dtype = next(iter(params.values())).dtype if params else np.float64
    m_flat, m = _flat_views(shapes, dtype)
    v_flat, v = _flat_views(shapes, dtype)
    return OptimizerState(m=m, v=v, m_flat=m_flat, v_flat=v_flat)


def _shared_buffer(arrays: list[np.ndarray]) -> np.ndarray | None:
    """The 1-D buffer ``arrays`` tile back to back, in order, or None."""
    if not arrays:
        return None
    base = arrays[0].base
    if base is None or base.ndim != 1 or base.size != sum(a.size for a in arrays):
        return None
    start = base.__array_interface__["data"][0]
    step = base.itemsize
    pos = 0
    for a in arrays:
        if a.base is not base or a.__array_interface__["data"][0] != start + pos * step:
            return None
        pos += a.size
    return base


def adam_step(
    params: dict[str, nc.Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr_t: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One bias-corrected Adam update with decoupled weight decay, in place.

    Decay is applied first (``theta -= lr_t * wd * theta``), then the Adam
    delta. Raises :class:`DivergenceError` on non-finite gradients without
    touching any parameter.
    """
    if lr_t < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr_t}")
    step = state.step + 1
    names = list(params)
    if set(grads) != set(names):
        raise ContractError("gradients and parameters have different names")
    for name in names:
        if grads[name].shape != params[name].shape:
            raise ContractError(
                f"gradient for {name} has shape {grads[name].shape}, parameter {params[name].shape}"
            )
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    p_flat = _shared_buffer([params[k].data for k in names])
    m_flat = _shared_buffer([state.m[k] for k in names])
    v_flat = _shared_buffer([state.v[k] for k in names])
    if p_flat is not None and m_flat is not None and v_flat is not None:
        g_flat = np.concatenate([grads[k].reshape(-1) for k in names])
        groups = [(p_flat, g_flat, m_flat, v_flat)]
    else:
        groups = [(params[k].data, grads[k], state.m[k], state.v[k]) for k in names]
    for _, g, _, _ in groups:
        if not np.isfinite(g).all():
            bad = next(k for k in names if not np.isfinite(grads[k]).all())
            raise DivergenceError(f"non-finite gradient for {bad} at step {step}", step=step)
    # identical elementwise arithmetic on either layout, so results match bitwise
    for p, g, m, v in groups:
        if weight_decay:
            p -= (lr_t * weight_decay) * p
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + eps)
    state.step = step
    return params, state


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(math.fsum(float((g * g).sum()) for g in grads.values()))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float, norm: float | None = None) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = global_grad_norm(grads) if norm is None else norm
    if norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= factor
    return norm


def collect_grads(model: Model) -> dict[str, np.ndarray]:
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}


# -- training loop ----------------------------------------------------------------
@dataclass
class DivergenceTracker:
    """Flags loss NaN/Inf, or loss above 10x the first loss for 50 steps in a row."""

    initial_loss: float | None = None
    above: int = 0
    recent: deque = field(default_factory=lambda: deque(maxlen=FINAL_LOSS_WINDOW))

    def update(self, loss: float) -> str | None:
        if not math.isfinite(loss):
            return f"non-finite loss {loss}"
        if self.initial_loss is None:
            self.initial_loss = loss
        self.recent.append(loss)
        if loss > DIVERGENCE_FACTOR * self.initial_loss:
            self.above += 1
        else:
            self.above = 0
        if self.above >= DIVERGENCE_PATIENCE:
            return f"loss above {DIVERGENCE_FACTOR:g}x initial for {DIVERGENCE_PATIENCE} consecutive steps"
        return None

    @property
    def final_loss(self) -> float:
        return float(np.mean(self.recent)) if self.recent else float("nan")


@dataclass
class TrainState:
    optimizer: OptimizerState
    tracker: DivergenceTracker


@dataclass
class TrainResult:
    status: str  # "completed" or "diverged"
    steps_done: int
    initial_loss: float
    final_loss: float
    reason: str | None = None
    rows: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"


class MetricsWriter:
    """Append-only metrics CSV, flushed after every row."""

    def __init__(self, path):
        self.path = os.fspath(path)
        fresh = not os.path.exists(self.path) or os.path.getsize(self.path) == 0
        self._fh = open(self.path, "a", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        if fresh:
            self._writer.writerow(METRICS_HEADER)
            self._fh.flush()

    def write(self, row: dict) -> None:
        self._writer.writerow([_fmt_metric(row[k]) for k in METRICS_HEADER])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt_metric(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _batch_getter(data) -> Callable[[int], object]:
    if callable(data):
        return data
    it = iter(data)
    return lambda step: next(it)


def train_loop(
    model: Model,
    data: Callable[[int], object] | Iterable,
    config: TrainConfig,
    *,
    state: TrainState | None = None,
    metrics_path=None,
    checkpoint_dir=None,
    run_items: dict[str, str] | None = None,
    on_step: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Train ``model`` in place for ``config.steps`` updates.

    ``data`` is either ``step -> Batch`` (steps are 1-based) or an iterable of
    batches. Passing ``state`` (from :func:`restore_state`) continues a run
    at the step after the one it was saved at. Divergence ends the loop with
    ``status="diverged"``; it is never raised.
    """
    state = state or TrainState(init_optimizer(model.params), DivergenceTracker())
    opt, tracker = state.optimizer, state.tracker
    get_batch = _batch_getter(data)
    writer = MetricsWriter(metrics_path) if metrics_path is not None else None
    result = TrainResult("completed", opt.step, float("nan"), float("nan"))
    start = time.perf_counter()
    try:
        for step in range(opt.step + 1, config.steps + 1):
            batch = get_batch(step)
            model.zero_grad()
            try:
                loss = lm_loss(model, batch.input_ids, batch.targets, valid=batch.valid)
            except NonFiniteError as exc:
                result.status, result.reason = "diverged", f"step {step}: {exc}"
                break
            loss_value = float(loss)
            reason = tracker.update(loss_value)
            result.losses.append(loss_value)
            nc.backward(loss)
            grads = collect_grads(model)
            gnorm = global_grad_norm(grads)
            if config.grad_clip is not None and math.isfinite(gnorm):
                clip_grads(grads, config.grad_clip, gnorm)
            lr = lr_at(step, config)
            try:
                adam_step(
                    model.params, grads, opt, lr, config.weight_decay,
                    config.adam_beta1, config.adam_beta2, config.adam_eps,
                )
            except DivergenceError as exc:
                result.status, result.reason = "diverged", str(exc)
                break
            model.steps_taken = opt.step
            if on_step is not None:
                on_step(step, grads)
            row = {
                "step": step,
                "lr": lr,
                "loss": loss_value,
                "ppl": math.exp(min(loss_value, 700.0)),
                "grad_norm_global": gnorm,
                "elapsed_s": f"{time.perf_counter() - start:.3f}",
            }
            if step % config.log_every == 0 or step == config.steps:
                result.rows.append(row)
                if writer is not None:
                    writer.write(row)
            if checkpoint_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(os.path.join(checkpoint_dir, f"ckpt_step{step:06d}.fln"), model, state, run_items)
            if reason is not None:
                result.status, result.reason = "diverged", f"step {step}: {reason}"
                break
    finally:
        if writer is not None:
            writer.close()
    result.steps_done = opt.step
    result.initial_loss = tracker.initial_loss if tracker.initial_loss is not None else float("nan")
    result.final_loss = tracker.final_loss
    if checkpoint_dir is not None:
        save_checkpoint(os.path.join(checkpoint_dir, "final.fln"), model, state, run_items)
    return result


# -- checkpoints ------------------------------------------------------------------
def checkpoint_payload(model: Model, state: TrainState | None, run_items: dict[str, str] | None):
    items: dict[str, object] = dict(run_items or {})
    tensors = {f"param/{k}": p.data for k, p in model.params.items()}
    if state is not None:
        tr = state.tracker
        items["state.step"] = state.optimizer.step
        items["state.initial-loss"] = "none" if tr.initial_loss is None else repr(tr.initial_loss)
        items["state.above-count"] = tr.above
        items["state.recent-losses"] = ",".join(repr(x) for x in tr.recent)
        tensors.update({f"adam.m/{k}": v for k, v in state.optimizer.m.items()})
        tensors.update({f"adam.v/{k}": v for k, v in state.optimizer.v.items()})
    else:
        items["state.step"] = model.steps_taken
    return items, tensors


def save_checkpoint(path, model: Model, state: TrainState | None = None, run_items=None) -> None:
    items, tensors = checkpoint_payload(model, state, run_items)
    ckpt.save(path, items, tensors)


def restore_state(items: dict[str, str], tensors: dict[str, np.ndarray], model: Model) -> TrainState:
    """Load parameters into ``model`` and rebuild the optimizer/divergence state."""
    for name, p in model.params.items():
        key = f"param/{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing parameter {name}")
        if tensors[key].shape != p.shape:
            raise CheckpointError(f"parameter {name} has shape {tensors[key].shape}, model expects {p.shape}")
        p.data[...] = tensors[key]
    step = int(items.get("state.step", "0"))
    opt = init_optimizer(model.params)
    for name in model.params:
        if f"adam.m/{name}" in tensors:
            opt.m[name][...] = tensors[f"adam.m/{name}"]
            opt.v[name][...] = tensors[f"adam.v/{name}"]
    opt.step = step
    tracker = DivergenceTracker()
    init = items.get("state.initial-loss", "none")
    tracker.initial_loss = None if init == "none" else float(init)
    tracker.above = int(items.get("state.above-count", "0"))
    recent = items.get("state.recent-losses", "")
    tracker.recent.extend(float(x) for x in recent.split(",") if x)
    model.steps_taken = step
    model.beta_scaled = True
    return TrainState(opt, tracker)
