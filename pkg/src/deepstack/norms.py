"""Residual normalization strategies and their skip/branch constants.

Every post-norm style strategy computes ``LN(alpha * x + G(x))``: the skip
input is scaled by a constant ``alpha`` before the sum is normalized.
``deepnorm`` additionally shrinks the branch weights by ``beta`` once at
initialization; ``upscale_ln`` keeps DeepNorm's depth-dependent ``alpha``
but leaves the branch weights alone; ``foundation_ln`` uses a fixed
``alpha = 0.974`` regardless of depth. ``pre_ln`` is ``x + G(LN(x))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import numcore as nc
from .errors import ConfigError, DimensionError, LifecycleError

KINDS = ("post_ln", "pre_ln", "deepnorm", "upscale_ln", "foundation_ln")
ARCH_ROLES = ("encoder_only", "encoder_of_encdec", "decoder_of_encdec", "decoder_only")

# names used by the `norm-strategy` config key
CONFIG_NAMES = {
    "postln": "post_ln",
    "preln": "pre_ln",
    "deepnorm": "deepnorm",
    "upscale": "upscale_ln",
    "foundation": "foundation_ln",
}
KIND_TO_CONFIG = {v: k for k, v in CONFIG_NAMES.items()}

FOUNDATION_ALPHA = 0.974

# branch parameters DeepNorm rescales at init; query/key projections are excluded
BETA_SCALED_PARAMS = ("attn.v.weight", "attn.o.weight", "ffn.fc1.weight", "ffn.fc2.weight")


def kind_from_name(name: str) -> str:
    """Map a config name (``foundation``) or kind (``foundation_ln``) to a kind."""
    if name in CONFIG_NAMES:
        return CONFIG_NAMES[name]
    if name in KINDS:
        return name
    valid = ", ".join(CONFIG_NAMES)
    raise ConfigError(f"unknown norm strategy {name!r}; valid names: {valid}")


def alpha_for(kind: str, arch_role: str, N: int, M: int | None = None) -> float:
    """Skip-path constant for a strategy at depth ``N``.

    ``deepnorm`` and ``upscale_ln`` follow the depth formulas: ``(2N)^(1/4)``
    for encoder-only and decoder-only stacks, ``0.81 (N^4 M)^(1/16)`` for the
    encoder of an encoder-decoder with ``M`` decoder layers, and ``(3N)^(1/4)``
    for its decoder. ``foundation_ln`` is 0.974 at any depth, and the plain
    ``post_ln`` / ``pre_ln`` baselines are 1.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown norm kind {kind!r}; valid kinds: {', '.join(KINDS)}")
    if arch_role not in ARCH_ROLES:
        raise ConfigError(f"unknown arch role {arch_role!r}; valid roles: {', '.join(ARCH_ROLES)}")
    if N < 1:
        raise ConfigError(f"layer count N must be >= 1, got {N}")
    if arch_role == "encoder_of_encdec":
        if M is None:
            raise ConfigError("encoder_of_encdec needs the decoder layer count M")
        if M < 1:
            raise ConfigError(f"decoder layer count M must be >= 1, got {M}")
    elif M is not None:
        raise ConfigError(f"decoder layer count M only applies to encoder_of_encdec, not {arch_role}")

    if kind in ("post_ln", "pre_ln"):
        return 1.0
    if kind == "foundation_ln":
        return FOUNDATION_ALPHA
    if arch_role in ("encoder_only", "decoder_only"):
        return (2.0 * N) ** 0.25
    if arch_role == "encoder_of_encdec":
        return 0.81 * (float(N) ** 4 * M) ** (1.0 / 16.0)
    return (3.0 * N) ** 0.25


@dataclass(frozen=True)
class NormStrategy:
    kind: str
    alpha: float = 1.0
    beta: float = 1.0
    arch_role: str = "decoder_only"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown norm kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        if self.arch_role not in ARCH_ROLES:
            raise ConfigError(f"unknown arch role {self.arch_role!r}")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {v!r}")
        if self.kind in ("post_ln", "pre_ln") and (self.alpha != 1.0 or self.beta != 1.0):
            raise ConfigError(f"{self.kind} requires alpha = 1 and beta = 1")
        if self.kind in ("upscale_ln", "foundation_ln") and self.beta != 1.0:
            raise ConfigError(f"{self.kind} keeps branch weights unscaled; beta must be 1")

    @property
    def pre_norm(self) -> bool:
        return self.kind == "pre_ln"


def make_strategy(
    kind: str,
    arch_role: str,
    N: int,
    M: int | None = None,
    alpha_override: float | None = None,
    beta: float = 1.0,
) -> NormStrategy:
    """Build a strategy with ``alpha`` from :func:`alpha_for` unless overridden."""
    kind = kind_from_name(kind)
    alpha = alpha_for(kind, arch_role, N, M) if alpha_override is None else float(alpha_override)
    return NormStrategy(kind=kind, alpha=alpha, beta=float(beta), arch_role=arch_role)


def residual_combine(
    x: nc.Tensor,
    sublayer_out: nc.Tensor,
    strategy: NormStrategy,
    ln_params: tuple[nc.Tensor, nc.Tensor],
    eps: float = 1e-5,
) -> nc.Tensor:
    """Merge the skip input with a sublayer output.

    Post-norm kinds return ``layer_norm(alpha * x + sublayer_out)``. For
    ``pre_ln`` the result is ``x + sublayer_out``; its norm is applied to the
    sublayer input by the caller and ``ln_params`` are unused here.
    """
    if x.shape != sublayer_out.shape:
        raise DimensionError(f"residual shapes differ: {x.shape} vs {sublayer_out.shape}")
    if strategy.pre_norm:
        return nc.add(x, sublayer_out)
    gamma, beta = ln_params
    return nc.layer_norm(nc.add(nc.scale(x, strategy.alpha), sublayer_out), gamma, beta, eps)


def apply_beta_scaling(model, strategy: NormStrategy | None = None):
    """Scale DeepNorm branch weights by ``beta``, once, before any training.

    Only the FFN matrices and the attention value/output projections are
    touched. Other kinds leave parameters unchanged but still mark the model
    so a second call is rejected.
    """
    strategy = strategy or model.config.norm
    if model.steps_taken > 0:
        raise LifecycleError("beta scaling must happen before the first training step")
    if model.beta_scaled:
        raise LifecycleError("beta scaling was already applied to this model")
    if strategy.kind == "deepnorm" and strategy.beta != 1.0:
        for name, p in model.params.items():
            if name.endswith(BETA_SCALED_PARAMS):
                p.data *= strategy.beta
    model.beta_scaled = True
    return model.params
