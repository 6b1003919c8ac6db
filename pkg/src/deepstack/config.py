"""Flat ``key = value`` run configuration.

Keys that correspond to rows of the reference hyperparameter tables keep the
table's spelling (``num-layers``, ``learning-rate``, ``lr-warmup-fraction`` ...).
Unknown keys are rejected with the closest valid key as a hint.
"""

from __future__ import annotations

import difflib
import math
import os
from dataclasses import dataclass, fields, replace
from importlib import resources

from .errors import ConfigError
from .model import ARCH_ROLE, ModelConfig
from .norms import CONFIG_NAMES, KIND_TO_CONFIG, kind_from_name, make_strategy
from .train import TrainConfig

TASKS = ("copy", "char-lm", "mlm")

_NONE = ("", "none", "None", "null")
_TRUE = ("true", "True", "yes", "1")
_FALSE = ("false", "False", "no", "0")


def _bool(value: str) -> bool:
    if value in _TRUE:
        return True
    if value in _FALSE:
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _opt_float(value: str):
    return None if value in _NONE else float(value)


def _opt_str(value: str):
    return None if value in _NONE else value


def _auto_bool(value: str):
    return None if value in ("auto",) + _NONE else _bool(value)


def _str(value: str) -> str:
    return value


def _float(value: str) -> float:
    return float(value)


def _int(value: str) -> int:
    f = float(value)
    if not f.is_integer():
        raise ValueError(f"not an integer: {value!r}")
    return int(f)


# config key -> (field name, parser, default)
SCHEMA: dict[str, tuple[str, object, object]] = {
    # architecture
    "arch": ("arch", _str, "gpt"),
    "num-layers": ("num_layers", _int, 2),
    "hidden-size": ("hidden_size", _int, 32),
    "num-attention-heads": ("num_heads", _int, 2),
    "seq-length": ("seq_length", _int, 16),
    "vocab-size": ("vocab_size", _int, 260),
    "ffn-ratio": ("ffn_ratio", _int, 4),
    "tie-lm-head": ("tie_lm_head", _auto_bool, None),
    "norm-strategy": ("norm_strategy", _opt_str, None),
    "alpha-override": ("alpha_override", _opt_float, None),
    "beta": ("beta", _float, 1.0),
    "precision": ("precision", _str, "float64"),
    "fp16": ("fp16", _bool, False),
    "fp32": ("fp32", _bool, False),
    "num-parameters": ("num_parameters", _opt_str, None),
    # optimization
    "optimizer": ("optimizer", _str, "adam"),
    "steps": ("steps", _int, 100),
    "learning-rate": ("lr", _float, 1e-3),
    "min-learning-rate": ("min_lr", _float, 1e-4),
    "lr-decay-style": ("decay_style", _str, "cosine"),
    "lr-warmup-fraction": ("warmup_fraction", _float, 0.01),
    "weight-decay": ("weight_decay", _float, 0.0),
    "adam-beta1": ("adam_beta1", _float, 0.9),
    "adam-beta2": ("adam_beta2", _float, 0.999),
    "adam-eps": ("adam_eps", _float, 1e-8),
    "grad-clip": ("grad_clip", _opt_float, None),
    "log-every": ("log_every", _int, 1),
    "checkpoint-every": ("checkpoint_every", _int, 0),
    # data
    "task": ("task", _str, "copy"),
    "data-path": ("data_path", _opt_str, None),
    "batch-size": ("batch_size", _int, 16),
    "copy-vocab": ("copy_vocab", _int, 16),
    "seed": ("seed", _int, 0),
}

KEYS = tuple(SCHEMA)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    arch: str = "gpt"
    num_layers: int = 2
    hidden_size: int = 32
    num_heads: int = 2
    seq_length: int = 16
    vocab_size: int = 260
    ffn_ratio: int = 4
    tie_lm_head: bool | None = None
    norm_strategy: str | None = None
    alpha_override: float | None = None
    beta: float = 1.0
    precision: str = "float64"
    fp16: bool = False
    fp32: bool = False
    num_parameters: str | None = None
    optimizer: str = "adam"
    steps: int = 100
    lr: float = 1e-3
    min_lr: float = 1e-4
    decay_style: str = "cosine"
    warmup_fraction: float = 0.01
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    log_every: int = 1
    checkpoint_every: int = 0
    task: str = "copy"
    data_path: str | None = None
    batch_size: int = 16
    copy_vocab: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCH_ROLE:
            raise ConfigError(f"arch must be one of {tuple(ARCH_ROLE)}, got {self.arch!r}")
        if self.norm_strategy is None:
            object.__setattr__(self, "norm_strategy", "upscale" if self.arch == "bert" else "foundation")
        kind = kind_from_name(self.norm_strategy)
        object.__setattr__(self, "norm_strategy", KIND_TO_CONFIG[kind])
        if self.tie_lm_head is None:
            object.__setattr__(self, "tie_lm_head", self.arch == "bert")
        if self.optimizer.lower() != "adam":
            raise ConfigError(f"only the adam optimizer is implemented, got {self.optimizer!r}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if (self.task == "mlm") != (self.arch == "bert"):
            raise ConfigError(f"task {self.task!r} does not fit arch {self.arch!r} (mlm needs bert)")
        if self.task in ("char-lm", "mlm") and self.data_path is None:
            raise ConfigError(f"task {self.task!r} needs data-path")
        if self.task == "copy" and (self.seq_length % 2 or self.seq_length < 4):
            raise ConfigError(f"copy task needs an even seq-length >= 4, got {self.seq_length}")
        if self.fp16 and self.fp32:
            raise ConfigError("fp16 and fp32 cannot both be true")
        for name in ("beta",):
            v = getattr(self, name)
            if not math.isfinite(v) or v <= 0:
                raise ConfigError(f"{name} must be positive and finite, got {v}")
        if self.alpha_override is not None and not (math.isfinite(self.alpha_override) and self.alpha_override > 0):
            raise ConfigError(f"alpha-override must be positive and finite, got {self.alpha_override}")
        if self.log_every < 1:
            raise ConfigError("log-every must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint-every must be >= 0")
        if self.copy_vocab < 1 or self.copy_vocab > 256:
            raise ConfigError("copy-vocab must be in [1, 256]")
        # fail early on invalid model/optimizer values
        self.model_config()
        self.train_config()

    # -- conversion ---------------------------------------------------------
    @property
    def kind(self) -> str:
        return CONFIG_NAMES[self.norm_strategy]

    @property
    def half_precision(self) -> bool:
        return self.fp16

    def model_config(self) -> ModelConfig:
        precision = "float32" if self.fp32 and self.precision == "float64" else self.precision
        norm = make_strategy(
            self.kind, ARCH_ROLE[self.arch], self.num_layers, alpha_override=self.alpha_override, beta=self.beta
        )
        return ModelConfig(
            arch=self.arch,
            num_layers=self.num_layers,
            hidden_size=self.hidden_size,
            num_heads=self.num_heads,
            seq_length=self.seq_length,
            vocab_size=self.vocab_size,
            ffn_ratio=self.ffn_ratio,
            tie_lm_head=self.tie_lm_head,
            norm=norm,
            precision=precision,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            lr=self.lr,
            min_lr=self.min_lr,
            decay_style=self.decay_style,
            warmup_fraction=self.warmup_fraction,
            weight_decay=self.weight_decay,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            grad_clip=self.grad_clip,
            seed=self.seed,
            log_every=self.log_every,
            checkpoint_every=self.checkpoint_every,
        )

    def to_dict(self) -> dict[str, str]:
        """Every key with its resolved value, in schema order."""
        return {key: _format(getattr(self, name)) for key, (name, _, _) in SCHEMA.items()}

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    def with_overrides(self, **changes) -> "RunConfig":
        return replace(self, **changes)


_FIELD_NAMES = {f.name for f in fields(RunConfig)}
assert _FIELD_NAMES == {name for name, _, _ in SCHEMA.values()}


def nearest_key(key: str) -> str | None:
    match = difflib.get_close_matches(key, KEYS, n=1, cutoff=0.0)
    return match[0] if match else None


def parse_items(items: dict[str, str], ignore_prefixes: tuple[str, ...] = ()) -> RunConfig:
    values = {}
    for key, raw in items.items():
        if ignore_prefixes and key.startswith(ignore_prefixes):
            continue
        if key not in SCHEMA:
            hint = nearest_key(key)
            raise ConfigError(f"unknown config key {key!r}" + (f"; did you mean {hint!r}?" if hint else ""))
        name, parser, _ = SCHEMA[key]
        try:
            values[name] = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    return RunConfig(**values)


def parse_text(text: str, source: str = "<config>") -> RunConfig:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key = key.strip()
        if key in items:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        items[key] = value.strip()
    return parse_items(items)


def load_config(path) -> RunConfig:
    """Read a config file; ``path`` may also name a bundled config such as ``table1.cfg``."""
    path = os.fspath(path)
    if not os.path.exists(path) and path in bundled_configs():
        cfg = parse_text(bundled_text(path), source=path)
        return _resolve_data_path(cfg, os.fspath(resources.files("deepstack.configs")))
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    cfg = parse_text(text, source=path)
    return _resolve_data_path(cfg, os.path.dirname(os.path.abspath(path)))


def _resolve_data_path(cfg: RunConfig, base_dir: str) -> RunConfig:
    """Relative data paths are taken relative to the config file when that file exists."""
    if cfg.data_path is not None and not os.path.isabs(cfg.data_path):
        candidate = os.path.join(base_dir, cfg.data_path)
        if os.path.exists(candidate):
            cfg = replace(cfg, data_path=candidate)
    return cfg


def bundled_configs() -> list[str]:
    return sorted(p.name for p in resources.files("deepstack.configs").iterdir() if p.name.endswith(".cfg"))


def bundled_text(name: str) -> str:
    return resources.files("deepstack.configs").joinpath(name).read_text(encoding="utf-8")
