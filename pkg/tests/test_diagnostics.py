import math

import numpy as np
import pytest

from deepstack.config import RunConfig
from deepstack.data import IGNORE_INDEX
from deepstack.diagnostics import (
    LAYER_HEADER,
    SWEEP_HEADER,
    collect_layer_stats,
    deepest_stable_depth,
    gradient_spread,
    read_sweep_csv,
    run_depth_sweep,
    stable_at,
    update_magnitude,
    write_layer_csv,
)
from deepstack.errors import UndefinedMeanError
from deepstack.runs import data_source, new_model


def _cfg(**kw):
    base = dict(arch="gpt", num_layers=3, hidden_size=16, num_heads=2, seq_length=8, batch_size=4, steps=5)
    base.update(kw)
    return RunConfig(**base)


def _setup(**kw):
    cfg = _cfg(**kw)
    return cfg, new_model(cfg), data_source(cfg)(1)


def test_one_record_per_layer():
    _, model, batch = _setup(num_layers=1)
    stats = collect_layer_stats(model, batch, step=1)
    assert len(stats) == 1 and stats[0].layer == 0 and stats[0].step == 1
    _, model, batch = _setup(num_layers=4)
    assert [s.layer for s in collect_layer_stats(model, batch)] == [0, 1, 2, 3]


def test_all_ignored_targets_is_undefined_mean():
    _, model, batch = _setup()
    batch.targets[...] = IGNORE_INDEX
    with pytest.raises(UndefinedMeanError):
        collect_layer_stats(model, batch)


def test_stats_leave_model_untouched():
    _, model, batch = _setup()
    before = {k: p.data.tobytes() for k, p in model.params.items()}
    collect_layer_stats(model, batch)
    assert {k: p.data.tobytes() for k, p in model.params.items()} == before
    assert all(p.grad is None for p in model.params.values())


@pytest.mark.parametrize("strategy", ["postln", "preln", "deepnorm", "upscale", "foundation"])
def test_stats_finite_and_spread_at_least_one(strategy):
    _, model, batch = _setup(num_layers=8, norm_strategy=strategy)
    stats = collect_layer_stats(model, batch)
    for s in stats:
        assert all(math.isfinite(v) and v > 0 for v in (s.activation_norm, s.grad_norm, s.param_norm))
    assert gradient_spread(stats) >= 1.0


def test_strategies_differ_only_through_code_path():
    _, post, batch = _setup(num_layers=8, norm_strategy="postln")
    _, up, _ = _setup(num_layers=8, norm_strategy="upscale")
    for name in post.params:
        assert post.params[name].data.tobytes() == up.params[name].data.tobytes()
    a, b = collect_layer_stats(post, batch), collect_layer_stats(up, batch)
    assert [s.param_norm for s in a] == [s.param_norm for s in b]
    assert [s.grad_norm for s in a] != [s.grad_norm for s in b]


def test_layer_csv(tmp_path):
    _, model, batch = _setup()
    write_layer_csv(tmp_path / "l.csv", collect_layer_stats(model, batch))
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == ",".join(LAYER_HEADER) and len(lines) == 4


def test_update_magnitude_zero_lr_and_determinism():
    _, model, batch = _setup()
    before = {k: p.data.tobytes() for k, p in model.params.items()}
    assert update_magnitude(model, batch, 0.0) == 0.0
    a, b = update_magnitude(model, batch, 1e-3), update_magnitude(model, batch, 1e-3)
    assert a == b and a > 0
    assert {k: p.data.tobytes() for k, p in model.params.items()} == before
    assert model.steps_taken == 0


def test_sweep_single_cell(tmp_path):
    out = tmp_path / "s.csv"
    res = run_depth_sweep(["foundation"], [2], _cfg(), steps=3, out_path=out)
    assert len(res) == 1
    r = res[0]
    assert (r.strategy, r.depth, r.seed, r.steps_done, r.diverged) == ("foundation", 2, 0, 3, False)
    rows = read_sweep_csv(out)
    assert len(rows) == 1 and tuple(rows[0]) == SWEEP_HEADER


def test_sweep_cardinality_and_order(tmp_path):
    res = run_depth_sweep(["foundation_ln", "postln"], [4, 1], _cfg(), steps=2, seeds=[1, 0], jobs=2)
    assert len(res) == 8
    keys = [(r.strategy, r.depth, r.seed) for r in res]
    assert keys == sorted(keys)
    assert {r.strategy for r in res} == {"foundation", "postln"}
    assert stable_at(res, "postln", 4) and deepest_stable_depth(res, "foundation") == 4


def test_sweep_records_crashing_cell(tmp_path):
    crash = _cfg(task="char-lm", data_path=str(tmp_path / "missing.txt"))
    res = run_depth_sweep(["postln", "foundation"], [1], crash, steps=2)
    assert len(res) == 2
    assert all(r.diverged and "FileNotFoundError" in r.reason for r in res)
    blowup = _cfg(lr=50.0, min_lr=50.0, warmup_fraction=0.0)
    res = run_depth_sweep(["postln"], [2], blowup, steps=120)
    assert len(res) == 1 and res[0].diverged and res[0].reason


def test_sweep_argument_errors():
    with pytest.raises(ValueError):
        run_depth_sweep(["postln"], [0], _cfg())
    with pytest.raises(ValueError):
        run_depth_sweep([], [1], _cfg())
    with pytest.raises(Exception, match="postln"):
        run_depth_sweep(["bogus"], [1], _cfg())


def test_spread_degenerate_values():
    from deepstack.diagnostics import LayerStats

    assert gradient_spread([LayerStats(0, 0, 1.0, 2.0, 1.0)]) == 1.0
    assert gradient_spread([LayerStats(0, 0, 1.0, 0.0, 1.0), LayerStats(0, 1, 1.0, 2.0, 1.0)]) == math.inf
    assert math.isnan(gradient_spread([LayerStats(0, 0, 1.0, float("nan"), 1.0)]))
    assert np.isfinite(gradient_spread([LayerStats(0, i, 1.0, i + 1.0, 1.0) for i in range(3)]))
