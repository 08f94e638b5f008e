"""Output-layer logits with large-margin families and norm scaling.

The softmax logit is reformulated as ``l(y, i) = g(i) · f(y) · φ(θ) + b_y``
where θ is the angle between context vector h_i and word vector W_y.
φ applies the margin to the target column only (plain cosine elsewhere);
f rescales word-vector norms by rank or count; g rescales context-vector
norms.  f and g are recomputed from the current weights at every step but
held constant for differentiation: gradients flow only through the cosine
(the directions of W and h) and the bias.

``classic_normalize`` reproduces the usual face-recognition setup instead,
fixing the scale to the constant ``s`` for every position.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

COS_CLAMP_EPS = 1e-7
LOG_UNIGRAM_FLOOR = 1e-3


class Margin(str, Enum):
    NONE = "none"
    COS = "cos"
    ARC = "arc"
    LSM = "lsm"


class WordScale(str, Enum):
    NO_MOD = "no_mod"
    UNIFORM = "uniform"
    LOG_RANK = "log_rank"
    UNIGRAM = "unigram"
    LOG_UNIGRAM = "log_unigram"


class ContextScale(str, Enum):
    NO_MOD = "no_mod"
    MAX_NORM = "max_norm"


@dataclass(frozen=True)
class HeadConfig:
    """Margin family plus norm-scaling modes for the output layer."""

    margin_family: Margin = Margin.NONE
    m: float = 0.0
    s: float = 64.0
    f_mode: WordScale = WordScale.NO_MOD
    g_mode: ContextScale = ContextScale.NO_MOD
    classic_normalize: bool = False
    use_bias: bool = True
    eval_with_margin: bool = False

    def __post_init__(self):
        object.__setattr__(self, "margin_family", Margin(self.margin_family))
        object.__setattr__(self, "f_mode", WordScale(self.f_mode))
        object.__setattr__(self, "g_mode", ContextScale(self.g_mode))
        if self.s <= 0:
            raise ValueError(f"scale s must be positive, got {self.s}")
        if self.margin_family is Margin.LSM:
            if self.m < 1 or float(self.m) != int(self.m):
                raise ValueError(
                    f"LSM margin must be a positive integer, got {self.m}"
                )
        elif self.m < 0:
            raise ValueError(f"margin m must be nonnegative, got {self.m}")

    def slug(self) -> str:
        parts = [self.margin_family.value, f"m{self.m:g}"]
        if self.classic_normalize:
            parts.append(f"classic-s{self.s:g}")
        else:
            parts.extend([f"f-{self.f_mode.value}", f"g-{self.g_mode.value}"])
        if not self.use_bias:
            parts.append("nobias")
        return "_".join(parts)

    def to_dict(self) -> dict:
        return {
            "margin_family": self.margin_family.value,
            "m": self.m,
            "s": self.s,
            "f_mode": self.f_mode.value,
            "g_mode": self.g_mode.value,
            "classic_normalize": self.classic_normalize,
            "use_bias": self.use_bias,
            "eval_with_margin": self.eval_with_margin,
        }

    @staticmethod
    def from_dict(d: dict) -> "HeadConfig":
        return HeadConfig(**d)


@dataclass
class CosineStats:
    """Clamped pairwise cosines plus the detached norms they came from."""

    cos: Tensor
    h_norms: np.ndarray
    w_norms: np.ndarray


def cosine_stats(H: Tensor, W: Tensor,
                 clamp_eps: float = COS_CLAMP_EPS) -> CosineStats:
    """cos θ between every context vector and every word vector.

    The cosine stays differentiable through the inner product and both
    norms; the returned norm arrays are plain values for use as scale
    constants.  Clamping keeps arccos and the ArcFace sine finite.
    """
    h_norms = np.linalg.norm(H.values, axis=1)
    w_norms = np.linalg.norm(W.values, axis=1)
    for name, norms in (("context", h_norms), ("word", w_norms)):
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise ValueError(
                f"zero-norm {name} vector at row {int(zero[0])}"
            )
    hn = ad.norm_l2(H, axis=1).reshape((-1, 1))
    wn = ad.norm_l2(W, axis=1).reshape((1, -1))
    cos = ad.clamp((H @ W.T) / (hn * wn), -1.0 + clamp_eps, 1.0 - clamp_eps)
    return CosineStats(cos, h_norms, w_norms)


def phi_lsm(theta, m: int):
    """Piecewise large-margin transform ``(-1)^k cos(mθ) - 2k``.

    k = floor(θ·m/π) clamped to [0, m-1], which makes the pieces meet
    continuously and the whole curve non-increasing on [0, π].  m=1 is
    exactly cos θ.
    """
    if m < 1 or float(m) != int(m):
        raise ValueError(f"LSM margin must be a positive integer, got {m}")
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0) or np.any(theta > np.pi):
        raise ValueError("phi_lsm: theta outside [0, pi]")
    m = int(m)
    k = np.clip(np.floor(theta * m / np.pi), 0, m - 1)
    return ((-1.0) ** k) * np.cos(m * theta) - 2.0 * k


def cosface_logit(cos_theta, m: float, scale: float):
    """Additive cosine margin: scale · (cos θ − m)."""
    return scale * (np.asarray(cos_theta) - m)


def arcface_logit(theta, m: float, scale: float):
    """Additive angular margin: scale · cos(θ + m)."""
    return scale * np.cos(np.asarray(theta) + m)


def compute_f(counts: np.ndarray, w_norms: np.ndarray,
              f_mode: WordScale) -> np.ndarray:
    """Word-vector scale f(y), one nonnegative value per word id.

    Word ids are frequency ranks, so rank 0 / rank V-1 are the first and
    last entries.  Recomputed from the live norms every step; the result
    is a constant for differentiation.
    """
    f_mode = WordScale(f_mode)
    counts = np.asarray(counts, dtype=np.float64)
    v = counts.shape[0]
    if f_mode is WordScale.NO_MOD:
        return w_norms.copy()
    if f_mode is WordScale.UNIFORM:
        return np.full(v, w_norms[0], dtype=w_norms.dtype)
    if f_mode is WordScale.LOG_RANK:
        top, bottom = w_norms[0], w_norms[-1]
        slope = (np.exp(top) - np.exp(bottom)) / v
        arg = np.exp(top) - slope * np.arange(v)
        # exact zero or negative only through float cancellation
        return np.where(arg > 0, np.log(np.maximum(arg, 1e-300)), bottom)
    if f_mode is WordScale.UNIGRAM:
        top, bottom = w_norms[0], w_norms[-1]
        slope = (top - bottom) / counts.max()
        return bottom + slope * counts
    # LOG_UNIGRAM: zero-count words get the floor instead of -inf
    with np.errstate(divide="ignore"):
        logs = np.log(counts)
    return np.maximum(logs, LOG_UNIGRAM_FLOOR)


def compute_g(h_values: np.ndarray, g_mode: ContextScale) -> np.ndarray:
    """Context-vector scale g(i): own norm, or the batch-wide max norm."""
    g_mode = ContextScale(g_mode)
    norms = np.linalg.norm(h_values, axis=1)
    if g_mode is ContextScale.MAX_NORM:
        return np.full_like(norms, norms.max())
    return norms


def _margin_active(config: HeadConfig, training: bool) -> bool:
    if config.margin_family is Margin.NONE:
        return False
    if config.margin_family is Margin.LSM and int(config.m) == 1:
        # phi_1(theta) = cos(theta): the identity transform, so skip the
        # arccos/cos round trip and keep the graph bit-identical to none.
        return False
    return training or config.eval_with_margin


def head_logits(H: Tensor, W: Tensor, b: Optional[Tensor],
                targets: Optional[np.ndarray], config: HeadConfig,
                training: bool,
                f_scale: Optional[np.ndarray] = None,
                g_scale: Optional[np.ndarray] = None,
                counts: Optional[np.ndarray] = None) -> Tensor:
    """Output logits [batch × V] under the configured head.

    Non-target columns always get the plain cosine; the target column gets
    the margin transform when training (or when ``eval_with_margin``).
    ``f_scale``/``g_scale`` inject precomputed scale constants (the
    gradient-check harness freezes them this way); otherwise they are
    derived from ``counts`` and the current weights.

    At evaluation time with no scaling configured, the logits are the raw
    inner products ``H·Wᵀ + b``; callers that need gradients must pass
    ``training=True`` for the direction-only gradient semantics.
    """
    margin_on = _margin_active(config, training)
    if margin_on and targets is None:
        raise ValueError("margin requires target ids")

    plain_eval = (not margin_on and not config.classic_normalize
                  and config.f_mode is WordScale.NO_MOD
                  and config.g_mode is ContextScale.NO_MOD)
    if plain_eval and not training:
        logits = H @ W.T
        return logits + b if (config.use_bias and b is not None) else logits

    stats = cosine_stats(H, W)
    if config.classic_normalize:
        scale = float(config.s)
        base = stats.cos * scale
        target_scale = config.s
    else:
        if f_scale is None:
            if config.f_mode is not WordScale.NO_MOD and counts is None:
                raise ValueError(f"f_mode {config.f_mode.value} needs counts")
            f_scale = compute_f(counts if counts is not None
                                else np.zeros_like(stats.w_norms),
                                stats.w_norms, config.f_mode)
        if g_scale is None:
            g_scale = compute_g(H.values, config.g_mode)
        base = stats.cos * np.outer(g_scale, f_scale)
        target_scale = None  # per-row, resolved below

    if margin_on:
        cos_t = ad.take_per_row(stats.cos, targets)
        if config.classic_normalize:
            scale_t = np.full(cos_t.shape, target_scale)
        else:
            scale_t = g_scale * f_scale[targets]
        fam = config.margin_family
        if fam is Margin.COS:
            new_t = (cos_t - config.m) * scale_t
        elif fam is Margin.ARC:
            sin_t = ad.sqrt(1.0 - cos_t * cos_t)
            new_t = (cos_t * np.cos(config.m)
                     - sin_t * np.sin(config.m)) * scale_t
        else:  # LSM
            m = int(config.m)
            theta = ad.arccos(cos_t)
            k = np.clip(np.floor(theta.values * m / np.pi), 0, m - 1)
            new_t = (ad.cos(theta * float(m)) * ((-1.0) ** k)
                     - 2.0 * k) * scale_t
        delta = new_t - ad.take_per_row(base, targets)
        base = ad.add_per_row(base, targets, delta)

    if config.use_bias and b is not None:
        base = base + b
    return base


def audit_head_gradients(seed: int = 0, batch: int = 4, vocab: int = 7,
                         dim: int = 5) -> list:
    """Finite-difference audit of every head configuration.

    Runs every margin family x f mode x g mode x {plain, classic}
    combination on a small random instance with the scale constants frozen
    at the base point, and returns ``(config, worst_relative_error)`` pairs
    in a fixed order.  Target cosines are redrawn away from the kinks of
    the piecewise margin transforms so central differences stay valid.
    """
    rng = np.random.default_rng(seed)
    margins = [(Margin.NONE, 0.0), (Margin.COS, 0.2),
               (Margin.ARC, 0.2), (Margin.LSM, 3.0)]
    counts = np.sort(rng.integers(1, 500, size=vocab))[::-1].astype(np.int64)

    def draw(m_lsm):
        while True:
            h0 = rng.normal(size=(batch, dim)) * 0.6
            w0 = rng.normal(size=(vocab, dim)) * 0.8
            b0 = rng.normal(size=vocab) * 0.1
            targets = rng.integers(0, vocab, size=batch)
            hn = np.linalg.norm(h0, axis=1, keepdims=True)
            wn = np.linalg.norm(w0, axis=1, keepdims=True)
            if hn.min() < 1e-3 or wn.min() < 1e-3:
                continue
            cos = (h0 / hn) @ (w0 / wn).T
            cos_t = cos[np.arange(batch), targets]
            if np.abs(cos_t).max() > 0.98:
                continue
            frac = np.arccos(cos_t) * m_lsm / np.pi
            if np.abs(frac - np.round(frac)).min() < 0.05:
                continue
            return h0, w0, b0, targets

    rows = []
    for classic in (False, True):
        for fam, m in margins:
            for f_mode in WordScale:
                for g_mode in ContextScale:
                    config = HeadConfig(margin_family=fam, m=m, s=8.0,
                                        f_mode=f_mode, g_mode=g_mode,
                                        classic_normalize=classic)
                    m_lsm = int(m) if fam is Margin.LSM else 1
                    h0, w0, b0, targets = draw(m_lsm)
                    f0 = compute_f(counts, np.linalg.norm(w0, axis=1),
                                   f_mode)
                    g0 = compute_g(h0, g_mode)

                    def loss_fn(H, W, b, targets=targets, config=config,
                                f0=f0, g0=g0):
                        logits = head_logits(H, W, b, targets, config,
                                             training=True, f_scale=f0,
                                             g_scale=g0, counts=counts)
                        return ad.softmax_cross_entropy(logits, targets)

                    err = ad.grad_check(loss_fn, [h0, w0, b0])
                    rows.append((config, err))
    return rows
