"""Glue between a :class:`RunConfig` and the data, model and checkpoint layers."""

from __future__ import annotations

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig, parse_items
from .data import make_copy_task, stream_corpus
from .errors import CheckpointError, ConfigError
from .model import Model, build_model, flat_params, param_shapes
from .train import TrainState, restore_state


class CorpusSource:
    """``step -> Batch`` over an endlessly reshuffled corpus; steps must not go backwards."""

    def __init__(self, path, seq_length, batch, seed, task):
        self._args = (path, seq_length, batch, seed, task)
        self._it = stream_corpus(path, seq_length, batch, seed, task=task, epochs=None)
        self._next_step = 1

    def __call__(self, step: int):
        if step < self._next_step:
            path, s, b, seed, task = self._args
            self._it = stream_corpus(path, s, b, seed, task=task, epochs=None)
            self._next_step = 1
        while self._next_step < step:
            next(self._it)
            self._next_step += 1
        self._next_step += 1
        return next(self._it)


def data_source(cfg: RunConfig):
    """Deterministic ``step -> Batch`` function for the configured task."""
    if cfg.task == "copy":
        def copy(step: int):
            return make_copy_task(cfg.seed, cfg.batch_size, cfg.seq_length, cfg.copy_vocab, step=step)

        return copy
    task = "mlm" if cfg.task == "mlm" else "causal"
    return CorpusSource(cfg.data_path, cfg.seq_length, cfg.batch_size, cfg.seed, task)


def new_model(cfg: RunConfig) -> Model:
    if cfg.half_precision:
        raise ConfigError("half precision (fp16) is not supported; use precision = float32 or float64")
    return build_model(cfg.model_config(), cfg.seed)


def load_run(path) -> tuple[RunConfig, Model, TrainState]:
    """Rebuild config, model and optimizer state from a checkpoint file."""
    items, tensors = ckpt.load(path)
    run_items = {k: v for k, v in items.items() if not k.startswith("state.") and k != "num-tensors"}
    try:
        cfg = parse_items(run_items)
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint config block is invalid: {exc}") from exc
    mcfg = cfg.model_config()
    arrays = {name: np.zeros(shape, dtype=mcfg.dtype) for name, shape, _ in param_shapes(mcfg)}
    model = Model(mcfg, flat_params(arrays, mcfg.dtype))
    state = restore_state(items, tensors, model)
    return cfg, model, state
