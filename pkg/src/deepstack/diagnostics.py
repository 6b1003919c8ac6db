"""Per-layer statistics, one-step update magnitude and depth x strategy sweeps."""

from __future__ import annotations

import csv
import math
import os
import statistics
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import product

import numpy as np

from . import numcore as nc
from .config import RunConfig
from .errors import DivergenceError, NonFiniteError
from .model import Model, forward, lm_loss
from .norms import KIND_TO_CONFIG, kind_from_name
from .runs import data_source, new_model
from .train import adam_step, collect_grads, init_optimizer, train_loop

LAYER_HEADER = ("step", "layer", "activation_norm", "grad_norm", "param_norm")
SWEEP_HEADER = (
    "strategy",
    "depth",
    "seed",
    "steps_done",
    "diverged",
    "final_loss",
    "initial_loss",
    "grad_spread_step1",
    "update_magnitude",
)


@dataclass(frozen=True)
class LayerStats:
    step: int
    layer: int
    activation_norm: float  # RMS of the block output
    grad_norm: float  # L2 over the block's parameter gradients
    param_norm: float  # L2 over the block's parameters
    flagged: bool = False  # forward produced non-finite values


@dataclass(frozen=True)
class SweepResult:
    strategy: str
    depth: int
    seed: int
    steps_done: int
    diverged: bool
    final_loss: float
    initial_loss: float
    grad_spread_step1: float
    update_magnitude: float
    reason: str | None = None

    def row(self) -> dict:
        return {k: getattr(self, k) for k in SWEEP_HEADER}


def _l2(arrays) -> float:
    return math.sqrt(math.fsum(float((a * a).sum()) for a in arrays))


def collect_layer_stats(model: Model, batch, step: int = 0) -> list[LayerStats]:
    """One forward + backward, no update. Parameters and existing grads are left untouched."""
    n = model.config.num_layers
    saved = {k: p.grad for k, p in model.params.items()}
    model.zero_grad()
    captured: list[nc.Tensor] = []
    try:
        try:
            loss = lm_loss(model, batch.input_ids, batch.targets, valid=batch.valid, capture=captured)
        except NonFiniteError:
            acts = [math.sqrt(float(np.mean(t.data * t.data))) for t in captured]
            acts += [float("nan")] * (n - len(acts))
            params = [_l2(p.data for p in model.block_params(i).values()) for i in range(n)]
            return [LayerStats(step, i, acts[i], float("nan"), params[i], flagged=True) for i in range(n)]
        nc.backward(loss)
        stats = []
        for i in range(n):
            block = model.block_params(i)
            act = captured[i].data
            grads = [p.grad for p in block.values() if p.grad is not None]
            stats.append(
                LayerStats(
                    step=step,
                    layer=i,
                    activation_norm=math.sqrt(float(np.mean(act * act))),
                    grad_norm=_l2(grads),
                    param_norm=_l2(p.data for p in block.values()),
                )
            )
        return stats
    finally:
        for k, p in model.params.items():
            p.grad = saved[k]


def gradient_spread(stats: list[LayerStats]) -> float:
    """max / min of per-layer gradient norms (inf if some layer received none)."""
    norms = [s.grad_norm for s in stats]
    lo, hi = min(norms), max(norms)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return float("nan")
    return hi / lo if lo > 0 else float("inf")


def update_magnitude(model: Model, batch, lr_probe: float) -> float:
    """Relative change of the batch logits after one Adam step from ``model``.

    The step is taken on a copy; ``model`` itself is not modified.
    """
    probe = model.copy()
    causal = probe.config.arch == "gpt"
    try:
        with nc.no_grad():
            before = forward(probe, batch.input_ids, causal=causal, valid=batch.valid).data.copy()
        loss = lm_loss(probe, batch.input_ids, batch.targets, valid=batch.valid)
        nc.backward(loss)
        adam_step(probe.params, collect_grads(probe), init_optimizer(probe.params), lr_probe, 0.0)
        with nc.no_grad():
            after = forward(probe, batch.input_ids, causal=causal, valid=batch.valid).data
    except NonFiniteError as exc:
        raise DivergenceError(f"update probe diverged: {exc}") from exc
    return float(np.linalg.norm(after - before) / np.linalg.norm(before))


def write_layer_csv(path, stats: list[LayerStats]) -> None:
    with open(os.fspath(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LAYER_HEADER)
        for s in stats:
            w.writerow([s.step, s.layer, repr(s.activation_norm), repr(s.grad_norm), repr(s.param_norm)])


# -- sweeps ------------------------------------------------------------------------
def _run_cell(args) -> SweepResult:
    base, name, depth, seed, steps = args
    try:
        cfg = base.with_overrides(norm_strategy=name, num_layers=depth, seed=seed, steps=steps)
        model = new_model(cfg)
        data = data_source(cfg)
        first = data(1)
        spread = gradient_spread(collect_layer_stats(model, first, step=1))
        try:
            um = update_magnitude(model, first, cfg.lr)
        except DivergenceError:
            um = float("nan")
        res = train_loop(model, data, cfg.train_config())
        return SweepResult(
            name, depth, seed, res.steps_done, res.diverged, res.final_loss, res.initial_loss, spread, um, res.reason
        )
    except Exception as exc:  # a crashing cell is recorded, never fatal to the sweep
        reason = f"{type(exc).__name__}: {exc}"
        tb = traceback.format_exc(limit=3)
        nan = float("nan")
        return SweepResult(name, depth, seed, 0, True, nan, nan, nan, nan, reason + "\n" + tb)


def run_depth_sweep(
    strategies,
    depths,
    base: RunConfig,
    steps: int | None = None,
    seeds=(0,),
    out_path=None,
    jobs: int = 1,
) -> list[SweepResult]:
    """Train every (strategy, depth, seed) cell and tabulate the outcome.

    Strategy names may be config names (``foundation``) or kinds
    (``foundation_ln``); results use config names. Rows come back sorted by
    (strategy, depth, seed) and, when ``out_path`` is given, are written there
    as CSV.
    """
    names = [KIND_TO_CONFIG[kind_from_name(s)] for s in strategies]
    depths = [int(d) for d in depths]
    seeds = [int(s) for s in seeds]
    if not names or not depths or not seeds:
        raise ValueError("strategies, depths and seeds must all be non-empty")
    if any(d < 1 for d in depths):
        raise ValueError("depths must be positive")
    steps = base.steps if steps is None else int(steps)
    cells = [(base, n, d, s, steps) for n, d, s in product(names, depths, seeds)]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    results.sort(key=lambda r: (r.strategy, r.depth, r.seed))
    if out_path is not None:
        write_sweep_csv(out_path, results)
    return results


def write_sweep_csv(path, results: list[SweepResult]) -> None:
    with open(os.fspath(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in results:
            w.writerow([_cell(r.row()[k]) for k in SWEEP_HEADER])


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_sweep_csv(path) -> list[dict]:
    with open(os.fspath(path), newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# -- seed-median summaries -----------------------------------------------------------
def _cells(results, strategy, depth):
    name = KIND_TO_CONFIG[kind_from_name(strategy)]
    return [r for r in results if r.strategy == name and r.depth == depth]


def median_over_seeds(results, strategy: str, depth: int, attr: str) -> float:
    return float(statistics.median(getattr(r, attr) for r in _cells(results, strategy, depth)))


def stable_at(results, strategy: str, depth: int) -> bool:
    """True when the seed-median run did not diverge (fewer than half the seeds diverged)."""
    cells = _cells(results, strategy, depth)
    return bool(cells) and sum(r.diverged for r in cells) * 2 < len(cells)


def deepest_stable_depth(results, strategy: str) -> int:
    name = KIND_TO_CONFIG[kind_from_name(strategy)]
    depths = sorted({r.depth for r in results if r.strategy == name})
    stable = [d for d in depths if stable_at(results, strategy, d)]
    return max(stable) if stable else 0
