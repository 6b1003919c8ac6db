"""``deepstack`` command line.

Exit codes: 0 success, 2 config / validation error, 3 divergence, 4 I/O or
file-format error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import os
import sys

import numpy as np

from . import __version__
from . import numcore as nc
from .config import RunConfig, load_config
from .data import MASK, VOCAB_SIZE, eval_batches, mask_for_mlm, shift_targets
from .diagnostics import collect_layer_stats, run_depth_sweep, write_layer_csv
from .errors import CheckpointError, ConfigError, DataError, DivergenceError
from .model import build_model, count_params, estimate_flops, lm_loss
from .norms import CONFIG_NAMES, KINDS, kind_from_name
from .runs import data_source, load_run, new_model
from .train import METRICS_HEADER, train_loop

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

GRADCHECK_MAX_PARAMS = 50_000
GRADCHECK_TOL = 1e-4
GRADCHECK_H = 1e-4
GRADCHECK_SPREAD = 0.3  # parameters are moved to a generic point before checking
KEY_BIAS_TOL = 1e-12
REFERENCE_TOLERANCE = 0.01


def _err(msg: str) -> None:
    print(f"deepstack: {msg}", file=sys.stderr)


def _split(value: str, kind=str) -> list:
    items = [v.strip() for v in value.split(",") if v.strip()]
    if not items:
        raise ConfigError(f"empty list: {value!r}")
    try:
        return [kind(v) for v in items]
    except ValueError:
        raise ConfigError(f"bad list value in {value!r}") from None


# -- train ----------------------------------------------------------------------
def _manifest(cfg: RunConfig, out: str, resume: str | None) -> dict:
    return {
        "config": cfg.to_dict(),
        "start_time": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "seed": cfg.seed,
        "output_dir": os.path.abspath(out),
        "version": __version__,
        "resumed_from": resume,
    }


def _trim_metrics(path: str, last_step: int) -> None:
    """Keep only rows up to ``last_step`` so a resumed run continues the file cleanly."""
    if not os.path.exists(path):
        return
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != METRICS_HEADER:
        raise DataError(f"{path} is not a metrics file")
    kept = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= last_step]
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(kept)
    os.replace(tmp, path)


def cmd_train(args) -> int:
    if args.config is None and args.resume is None:
        raise ConfigError("train needs --config (or --resume)")
    state = None
    if args.resume is not None:
        saved_cfg, model, state = load_run(args.resume)
        cfg = load_config(args.config) if args.config is not None else saved_cfg
        if cfg.model_config() != saved_cfg.model_config():
            raise ConfigError("--config describes a different model than the checkpoint")
        if state.optimizer.step > cfg.steps:
            raise ConfigError(f"checkpoint is at step {state.optimizer.step}, beyond steps = {cfg.steps}")
    else:
        cfg = load_config(args.config)
        model = new_model(cfg)
    out = args.out
    os.makedirs(out, exist_ok=True)
    manifest_path = os.path.join(out, "manifest.json")
    if not os.path.exists(manifest_path):
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(_manifest(cfg, out, args.resume), fh, indent=2, sort_keys=True)
            fh.write("\n")
    metrics = os.path.join(out, "metrics.csv")
    if state is not None:
        _trim_metrics(metrics, state.optimizer.step)
    elif os.path.exists(metrics):
        os.remove(metrics)
    result = train_loop(
        model,
        data_source(cfg),
        cfg.train_config(),
        state=state,
        metrics_path=metrics,
        checkpoint_dir=out,
        run_items=cfg.to_dict(),
    )
    print(
        f"{result.status}: {result.steps_done} steps, initial loss {result.initial_loss:.4f}, "
        f"final loss {result.final_loss:.4f}"
    )
    if result.diverged:
        _err(f"run diverged: {result.reason}")
        return EXIT_DIVERGED
    return EXIT_OK


# -- sweep ----------------------------------------------------------------------
def cmd_sweep(args) -> int:
    base = load_config(args.config) if args.config is not None else RunConfig()
    strategies = _split(args.strategies)
    for s in strategies:
        kind_from_name(s)  # unknown names raise ConfigError listing the valid ones
    depths = _split(args.depths, int)
    seeds = _split(args.seeds, int)
    if any(d < 1 for d in depths):
        raise ConfigError("depths must be positive")
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "sweep.csv")
    results = run_depth_sweep(strategies, depths, base, steps=args.steps, seeds=seeds, out_path=path, jobs=jobs)
    for r in results:
        status = "diverged" if r.diverged else "ok"
        print(
            f"{r.strategy:<10} N={r.depth:<4} seed={r.seed:<3} {status:<8} steps={r.steps_done:<5} "
            f"loss {r.initial_loss:.4f} -> {r.final_loss:.4f}  spread {r.grad_spread_step1:.3g}  "
            f"update {r.update_magnitude:.3g}"
        )
    print(f"wrote {len(results)} rows to {path}")
    return EXIT_OK


# -- gradcheck -----------------------------------------------------------------
def _gradcheck_batch(cfg: RunConfig, rng: np.random.Generator, batch: int = 2):
    v = cfg.vocab_size
    if cfg.arch == "gpt":
        ids = rng.integers(0, min(v, 256), size=(batch, cfg.seq_length))
        return ids, shift_targets(ids)
    # small vocabularies cannot hold the byte-level MASK id; use the last id instead
    mask_id = MASK if v == VOCAB_SIZE else v - 1
    ids = rng.integers(0, max(1, min(v - 1, 256)), size=(batch, cfg.seq_length))
    masked, targets = mask_for_mlm(ids, cfg.seed, mask_rate=0.5, mask_id=mask_id, random_vocab=min(v, 256))
    if (targets < 0).all():
        targets[0, 0] = ids[0, 0]
    return masked, targets


def _is_key_bias(name: str) -> bool:
    return name.endswith("attn.k.bias")


def gradcheck(cfg: RunConfig, h: float = GRADCHECK_H) -> dict[str, tuple[float, float]]:
    """Finite-difference check of the full loss, per strategy, in float64.

    Returns ``kind -> (max relative error, max |key-bias gradient|)``. The
    attention key bias shifts every score of a query row by the same amount,
    which softmax ignores, so its true gradient is exactly zero; the relative
    error of a zero gradient against roundoff is meaningless, so those
    coordinates are reported by absolute size instead.
    """
    n = count_params(cfg.model_config())
    if n > GRADCHECK_MAX_PARAMS:
        raise ConfigError(f"gradcheck needs a micro model: {n:,} parameters exceeds the {GRADCHECK_MAX_PARAMS:,} bound")
    results = {}
    for kind in KINDS:
        run = cfg.with_overrides(norm_strategy=kind, precision="float64", fp16=False, fp32=False)
        model = build_model(run.model_config(), run.seed)
        rng = np.random.default_rng([run.seed, 7])
        for p in model.params.values():
            p.data += rng.normal(0.0, GRADCHECK_SPREAD, size=p.shape)
        ids, targets = _gradcheck_batch(run, rng)
        checked = [p for name, p in model.params.items() if not _is_key_bias(name)]
        rel = nc.finite_diff_check(lambda _: lm_loss(model, ids, targets), checked, h=h)
        model.zero_grad()
        nc.backward(lm_loss(model, ids, targets))
        key_grads = [p.grad for name, p in model.params.items() if _is_key_bias(name)]
        key = max(float(np.abs(g).max()) for g in key_grads)
        model.zero_grad()
        results[kind] = (rel, key)
    return results


def _gradcheck_ok(rel: float, key: float) -> bool:
    return rel < GRADCHECK_TOL and key < KEY_BIAS_TOL


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    results = gradcheck(cfg)
    for kind, (rel, key) in results.items():
        verdict = "ok" if _gradcheck_ok(rel, key) else "FAIL"
        print(f"{kind:<14} max relative error {rel:.1e}  key-bias |grad| {key:.1e}  {verdict}")
    print(
        f"threshold {GRADCHECK_TOL:.1e} relative (float64, central differences, h = {GRADCHECK_H:.0e}); "
        f"key-bias gradients must be below {KEY_BIAS_TOL:.1e}"
    )
    return EXIT_OK if all(_gradcheck_ok(*r) for r in results.values()) else EXIT_CONFIG


# -- count-params --------------------------------------------------------------
def human_count(n: int) -> str:
    if n >= 1_000_000_000:
        return f"{n / 1e9:.1f}B"
    if n >= 1_000_000:
        return f"{n / 1e6:.1f}M"
    if n >= 1_000:
        return f"{n / 1e3:.1f}K"
    return str(n)


def parse_count(text: str) -> float:
    """``52M`` / ``815.5M`` / ``1.2B`` / ``40000`` -> number."""
    t = text.strip().replace(",", "")
    scale = {"K": 1e3, "M": 1e6, "B": 1e9}.get(t[-1:].upper(), 1.0)
    if scale != 1.0:
        t = t[:-1]
    try:
        return float(t) * scale
    except ValueError:
        raise ConfigError(f"num-parameters is not a count: {text!r}") from None


def cmd_count_params(args) -> int:
    cfg = load_config(args.config)
    mcfg = cfg.model_config()
    n = count_params(mcfg)
    print(f"{n:,} (≈{human_count(n)})")
    if cfg.num_parameters is not None:
        ref = parse_count(cfg.num_parameters)
        rel = (n - ref) / ref
        verdict = "within" if abs(rel) <= REFERENCE_TOLERANCE else "outside"
        print(
            f"reference num-parameters {cfg.num_parameters}: difference {rel:+.2%}, "
            f"{verdict} the {REFERENCE_TOLERANCE:.0%} tolerance"
        )
    tokens = args.tokens if args.tokens is not None else cfg.steps * cfg.batch_size * cfg.seq_length
    print(
        f"training FLOPs ≈ {estimate_flops(mcfg, tokens):.3e} (6 x params x {tokens:,} tokens; "
        f"tokens = steps x batch x seq-length unless --tokens is given)"
    )
    print(
        "note: the reference runs never state their batch size; batch-size here is a config "
        "value, and for table2.cfg it is the value implied by the reported FLOPs, not a documented one"
    )
    return EXIT_OK


# -- eval / diagnose -----------------------------------------------------------
def _task(cfg: RunConfig) -> str:
    return "mlm" if cfg.arch == "bert" else "causal"


def evaluate(model, cfg: RunConfig, data_path, batch: int | None = None) -> tuple[float, int]:
    """Mean per-token loss over every window of the corpus, and the token count."""
    total, count = 0.0, 0
    with nc.no_grad():
        for b in eval_batches(data_path, cfg.seq_length, batch or cfg.batch_size, task=_task(cfg), seed=cfg.seed):
            k = b.num_targets
            if k == 0:
                continue
            total += float(lm_loss(model, b.input_ids, b.targets, valid=b.valid)) * k
            count += k
    if count == 0:
        raise DataError(f"{data_path} produced no prediction targets")
    return total / count, count


def cmd_eval(args) -> int:
    cfg, model, _ = load_run(args.ckpt)
    loss, count = evaluate(model, cfg, args.data)
    ppl = math.exp(min(loss, 700.0))
    print(f"loss {loss:.6f}  perplexity {ppl:.6g}  ({count:,} tokens)")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg, model, state = load_run(args.ckpt)
    batch = next(iter(eval_batches(args.data, cfg.seq_length, cfg.batch_size, task=_task(cfg), seed=cfg.seed)))
    stats = collect_layer_stats(model, batch, step=state.optimizer.step)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "layers.csv")
    write_layer_csv(path, stats)
    flagged = sum(s.flagged for s in stats)
    print(f"wrote {len(stats)} layer records to {path}" + (f" ({flagged} flagged non-finite)" if flagged else ""))
    return EXIT_OK


# -- entry point ---------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepstack", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"deepstack {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config")
    p.add_argument("--resume", metavar="CKPT")
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="depth x strategy x seed sweep")
    p.add_argument("--config")
    p.add_argument("--depths", required=True)
    p.add_argument("--strategies", required=True, help=f"comma list of {', '.join(CONFIG_NAMES)}")
    p.add_argument("--seeds", default="0", help="comma list of seed values")
    p.add_argument("--steps", type=int)
    p.add_argument("--jobs", type=int, help="worker processes (default: number of cores)")
    p.add_argument("--out", default="sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of a micro model, all strategies")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("count-params", help="closed-form parameter count and FLOPs estimate")
    p.add_argument("--config", required=True)
    p.add_argument("--tokens", type=int, help="training tokens for the FLOPs estimate")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("eval", help="mean per-token loss and perplexity of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="per-layer statistics CSV for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="diagnose")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except DivergenceError as exc:
        _err(f"diverged: {exc}")
        return EXIT_DIVERGED
    except (CheckpointError, DataError, OSError) as exc:
        _err(f"I/O error: {exc}")
        return EXIT_IO
    except ValueError as exc:  # remaining validation failures
        _err(f"invalid input: {exc}")
        return EXIT_CONFIG
    except Exception as exc:  # never leak another exit status
        _err(f"internal error: {type(exc).__name__}: {exc}")
        return EXIT_IO


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
