"""Toy BERT-style encoder and GPT-style decoder built on :mod:`numcore`.

Both architectures share one block layout: self-attention with Q/K/V/O
projections (all with bias), then a GELU feed-forward ``H -> ffn_ratio*H -> H``,
each merged back into the residual stream by the configured
:class:`~deepstack.norms.NormStrategy`. A final LayerNorm precedes the LM head.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DimensionError
from .norms import NormStrategy, apply_beta_scaling, make_strategy, residual_combine

ARCHS = ("bert", "gpt")
ARCH_ROLE = {"bert": "encoder_only", "gpt": "decoder_only"}
INIT_STD = 0.02
PRECISIONS = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    num_layers: int
    hidden_size: int
    num_heads: int
    seq_length: int
    vocab_size: int = 260
    ffn_ratio: int = 4
    tie_lm_head: bool | None = None
    norm: NormStrategy | None = None
    ln_eps: float = 1e-5
    precision: str = "float64"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        for name in ("num_layers", "hidden_size", "num_heads", "seq_length", "vocab_size", "ffn_ratio"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}"
            )
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {tuple(PRECISIONS)}, got {self.precision!r}")
        if self.tie_lm_head is None:
            object.__setattr__(self, "tie_lm_head", self.arch == "bert")
        if self.norm is None:
            object.__setattr__(self, "norm", make_strategy("post_ln", ARCH_ROLE[self.arch], self.num_layers))
        if self.norm.arch_role != ARCH_ROLE[self.arch]:
            raise ConfigError(
                f"arch {self.arch} needs a {ARCH_ROLE[self.arch]} strategy, got {self.norm.arch_role}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @classmethod
    def create(
        cls,
        arch: str,
        num_layers: int,
        hidden_size: int,
        num_heads: int,
        seq_length: int,
        norm_kind: str = "post_ln",
        alpha_override: float | None = None,
        beta: float = 1.0,
        **kwargs,
    ) -> "ModelConfig":
        """Config with the strategy's alpha derived from arch and depth."""
        if arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {arch!r}")
        if not isinstance(num_layers, int) or num_layers < 1:
            raise ConfigError(f"num_layers must be a positive integer, got {num_layers!r}")
        norm = make_strategy(norm_kind, ARCH_ROLE[arch], num_layers, alpha_override=alpha_override, beta=beta)
        return cls(arch, num_layers, hidden_size, num_heads, seq_length, norm=norm, **kwargs)

    def with_depth(self, num_layers: int, alpha_override: float | None = None) -> "ModelConfig":
        """Same config at another depth, alpha recomputed for that depth."""
        norm = make_strategy(
            self.norm.kind, self.norm.arch_role, num_layers, alpha_override=alpha_override, beta=self.norm.beta
        )
        return replace(self, num_layers=num_layers, norm=norm)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, nc.Tensor] = field(default_factory=dict)
    beta_scaled: bool = False
    steps_taken: int = 0

    def block_params(self, i: int) -> dict[str, nc.Tensor]:
        prefix = f"blocks.{i}."
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_elements(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def copy(self) -> "Model":
        params = flat_params({k: v.data for k, v in self.params.items()}, self.config.dtype)
        return Model(self.config, params, self.beta_scaled, self.steps_taken)


def flat_params(arrays: dict[str, np.ndarray], dtype) -> dict[str, nc.Tensor]:
    """Leaf tensors whose data are consecutive views of one flat buffer.

    The shared buffer lets the optimizer update every parameter with a few
    whole-buffer operations instead of a handful per tensor.
    """
    total = int(np.sum([a.size for a in arrays.values()]))
    buf = np.empty(total, dtype=dtype)
    out, pos = {}, 0
    for name, a in arrays.items():
        view = buf[pos : pos + a.size].reshape(a.shape)
        view[...] = a
        out[name] = nc.Tensor(view, requires_grad=True)
        pos += a.size
    return out


def _block_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    h, f = cfg.hidden_size, cfg.ffn_ratio * cfg.hidden_size
    shapes = []
    for p in "qkvo":
        shapes.append((f"attn.{p}.weight", (h, h), "normal"))
        shapes.append((f"attn.{p}.bias", (h,), "zeros"))
    shapes += [
        ("ffn.fc1.weight", (h, f), "normal"),
        ("ffn.fc1.bias", (f,), "zeros"),
        ("ffn.fc2.weight", (f, h), "normal"),
        ("ffn.fc2.bias", (h,), "zeros"),
        ("ln1.gamma", (h,), "ones"),
        ("ln1.beta", (h,), "zeros"),
        ("ln2.gamma", (h,), "ones"),
        ("ln2.beta", (h,), "zeros"),
    ]
    return shapes


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Every parameter as ``(name, shape, init)`` in allocation order."""
    h, v = cfg.hidden_size, cfg.vocab_size
    shapes = [("tok_emb.weight", (v, h), "normal"), ("pos_emb.weight", (cfg.seq_length, h), "normal")]
    block = _block_shapes(cfg)
    for i in range(cfg.num_layers):
        shapes += [(f"blocks.{i}.{name}", shape, init) for name, shape, init in block]
    shapes += [("ln_f.gamma", (h,), "ones"), ("ln_f.beta", (h,), "zeros")]
    if not cfg.tie_lm_head:
        shapes.append(("lm_head.weight", (h, v), "normal"))
    shapes.append(("lm_head.bias", (v,), "zeros"))
    return shapes


def build_model(config: ModelConfig, seed: int) -> Model:
    """Deterministically initialize a model: N(0, 0.02) weights, zero biases, unit LN gain."""
    rng = np.random.default_rng(seed)
    dtype = config.dtype
    arrays = {}
    for name, shape, init in param_shapes(config):
        if init == "normal":
            arrays[name] = rng.normal(0.0, INIT_STD, size=shape).astype(dtype)
        elif init == "ones":
            arrays[name] = np.ones(shape, dtype=dtype)
        else:
            arrays[name] = np.zeros(shape, dtype=dtype)
    model = Model(config, flat_params(arrays, dtype))
    apply_beta_scaling(model)
    return model


def count_params(config: ModelConfig) -> int:
    """Closed-form parameter count; equals the elements :func:`build_model` allocates."""
    n, h, s, v = config.num_layers, config.hidden_size, config.seq_length, config.vocab_size
    f = config.ffn_ratio * h
    attention = 4 * (h * h + h)
    ffn = h * f + f + f * h + h
    norms = 2 * 2 * h
    head = v if config.tie_lm_head else v * h + v
    return v * h + s * h + n * (attention + ffn + norms) + 2 * h + head


def estimate_flops(config: ModelConfig, total_tokens: int) -> float:
    """Training compute as ``6 * params * tokens``."""
    if total_tokens < 0:
        raise ConfigError("total_tokens must be >= 0")
    return 6.0 * count_params(config) * float(total_tokens)


# -- forward -----------------------------------------------------------------
def _attention(x, p, prefix, cfg: ModelConfig, mask):
    def proj(name):
        return nc.linear(x, p[f"{prefix}attn.{name}.weight"], p[f"{prefix}attn.{name}.bias"])

    ctx = nc.attention(proj("q"), proj("k"), proj("v"), cfg.num_heads, mask)
    return nc.linear(ctx, p[f"{prefix}attn.o.weight"], p[f"{prefix}attn.o.bias"])


def _ffn(x, p, prefix):
    hid = nc.gelu(nc.linear(x, p[f"{prefix}ffn.fc1.weight"], p[f"{prefix}ffn.fc1.bias"]))
    return nc.linear(hid, p[f"{prefix}ffn.fc2.weight"], p[f"{prefix}ffn.fc2.bias"])


def forward(model: Model, token_ids, causal: bool, valid=None, capture: list | None = None) -> nc.Tensor:
    """Logits for ``token_ids`` of shape [S] or [B, S].

    ``valid`` (same shape, boolean) excludes key positions from attention.
    When ``capture`` is a list, each block's output tensor is appended to it.
    """
    cfg, p = model.config, model.params
    ids = np.asarray(token_ids)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise DimensionError(f"token_ids must have shape [S] or [B, S], got {np.shape(token_ids)}")
    b, s = ids.shape
    if s > cfg.seq_length:
        raise DimensionError(f"sequence length {s} exceeds configured seq_length {cfg.seq_length}")

    mask = None
    if causal:
        mask = np.tril(np.ones((s, s), dtype=bool))[None, None]
    if valid is not None:
        keys = np.asarray(valid, dtype=bool).reshape(b, 1, 1, s)
        mask = keys if mask is None else (mask & keys)

    x = nc.add(nc.embedding(p["tok_emb.weight"], ids), nc.embedding(p["pos_emb.weight"], np.arange(s)))

    strategy = cfg.norm
    eps = cfg.ln_eps
    for i in range(cfg.num_layers):
        pre = f"blocks.{i}."
        ln1 = (p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
        ln2 = (p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
        if strategy.pre_norm:
            x = residual_combine(x, _attention(nc.layer_norm(x, *ln1, eps), p, pre, cfg, mask), strategy, ln1, eps)
            x = residual_combine(x, _ffn(nc.layer_norm(x, *ln2, eps), p, pre), strategy, ln2, eps)
        else:
            x = residual_combine(x, _attention(x, p, pre, cfg, mask), strategy, ln1, eps)
            x = residual_combine(x, _ffn(x, p, pre), strategy, ln2, eps)
        if capture is not None:
            capture.append(x)

    x = nc.layer_norm(x, p["ln_f.gamma"], p["ln_f.beta"], eps)
    if cfg.tie_lm_head:
        logits = nc.add(nc.matmul(x, nc.transpose(p["tok_emb.weight"], (1, 0))), p["lm_head.bias"])
    else:
        logits = nc.linear(x, p["lm_head.weight"], p["lm_head.bias"])
    if single:
        logits = logits.reshape(s, cfg.vocab_size)
    return logits


def forward_bert(model: Model, token_ids, mask_positions=None, mask_id: int | None = None, valid=None):
    """Bidirectional encoder logits.

    ``mask_positions`` (indices into the last axis) are replaced by the MASK
    token before embedding.
    """
    if model.config.arch != "bert":
        raise ConfigError("forward_bert needs an arch=bert model")
    ids = np.array(token_ids, copy=True)
    if mask_positions is not None and len(mask_positions):
        if mask_id is None:
            from .data import MASK

            mask_id = MASK
        ids[..., np.asarray(mask_positions)] = mask_id
    return forward(model, ids, causal=False, valid=valid)


def forward_gpt(model: Model, token_ids, valid=None):
    """Causal decoder logits: position t only attends to positions <= t."""
    if model.config.arch != "gpt":
        raise ConfigError("forward_gpt needs an arch=gpt model")
    return forward(model, token_ids, causal=True, valid=valid)


def lm_loss(model: Model, input_ids, targets, valid=None, capture=None, ignore_index: int = -1):
    """Mean cross-entropy of the arch-appropriate forward pass."""
    causal = model.config.arch == "gpt"
    logits = forward(model, input_ids, causal=causal, valid=valid, capture=capture)
    return nc.cross_entropy(logits, targets, ignore_index=ignore_index)
