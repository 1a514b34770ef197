"""Training objectives with hand-derived gradients.

The metric loss is softmax cross-entropy over scaled cosine logits with the
target logit replaced by S * (cos(m1*theta + m2) - m3); the preset margin
triples cover plain cross-entropy, additive-cosine, additive-angular and
multiplicative-angular variants. The quantization loss penalizes the squared
gap between a continuous code and its binarization; its smooth surrogate makes
the learned threshold trainable. Every gradient here is checked against
central finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cshash.binhash import (
    DsfParams,
    dynamic_fill_value,
    sign_dynamic,
    sign_plain,
    stable_logistic,
)
from cshash.centers import HashCenterSet
from cshash.errors import ValidationError

VARIANTS = ("ce", "cosface", "arcface", "sphereface")
QUANT_MODES = ("none", "hard_sign", "dsf_surrogate")

COSFACE_ALPHA_MAX = 1.0 - math.cos(math.pi / 4.0)

# arccos is clamped this far inside [-1, 1] for the angular variants.
_ACOS_EPS = 1e-9


@dataclass(frozen=True)
class LossConfig:
    scale_s: float = 10.0
    margin_alpha: float = 0.15
    variant: str = "cosface"
    quantization_mode: str = "hard_sign"
    lam: float = 1.0  # weight of the quantization term
    # Explicit general-form margins; when any is set the variant presets and
    # their range checks are bypassed.
    m1: float | None = None
    m2: float | None = None
    m3: float | None = None

    def __post_init__(self):
        if self.scale_s <= 0:
            raise ValidationError(f"scale_s must be > 0, got {self.scale_s}")
        if self.lam < 0:
            raise ValidationError(f"lam must be >= 0, got {self.lam}")
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")
        if self.quantization_mode not in QUANT_MODES:
            raise ValidationError(f"unknown quantization mode {self.quantization_mode!r}")
        if self._explicit_margins():
            m1, _, _ = self.margins()
            if m1 <= 0:
                raise ValidationError(f"m1 must be > 0, got {m1}")
            return
        alpha = self.margin_alpha
        if self.variant == "cosface" and not 0 < alpha < COSFACE_ALPHA_MAX:
            raise ValidationError(
                f"cosface margin must satisfy 0 < alpha < {COSFACE_ALPHA_MAX:.6f}, "
                f"got {alpha}"
            )
        if self.variant == "arcface" and not 0 < alpha < 1:
            raise ValidationError(f"arcface margin must satisfy 0 < alpha < 1, got {alpha}")
        if self.variant == "sphereface" and not alpha > 1:
            raise ValidationError(f"sphereface margin must satisfy alpha > 1, got {alpha}")

    def _explicit_margins(self) -> bool:
        return self.m1 is not None or self.m2 is not None or self.m3 is not None

    def margins(self) -> tuple[float, float, float]:
        """Effective (m1, m2, m3) for the general angular-margin form."""
        if self._explicit_margins():
            return (
                1.0 if self.m1 is None else self.m1,
                0.0 if self.m2 is None else self.m2,
                0.0 if self.m3 is None else self.m3,
            )
        alpha = self.margin_alpha
        return {
            "ce": (1.0, 0.0, 0.0),
            "cosface": (1.0, 0.0, alpha),
            "arcface": (1.0, alpha, 0.0),
            "sphereface": (alpha, 0.0, 0.0),
        }[self.variant]


@dataclass
class LossReport:
    metric_loss: float
    quant_loss: float
    total: float
    per_sample_logits: np.ndarray  # (N, C)
    grad_features: np.ndarray  # (N, K), wrt the pre-normalization features
    grad_dsf_head: np.ndarray | None = None


@dataclass
class QuantResult:
    loss: float
    grad_v: np.ndarray
    grad_t: np.ndarray | float | None


def cosine_logits(f_e: np.ndarray, centers: HashCenterSet) -> np.ndarray:
    """Cosines between a unit feature and every unit-scaled center row."""
    f_e = np.asarray(f_e, dtype=np.float64)
    norm = float(np.linalg.norm(f_e))
    if abs(norm - 1.0) > 1e-6:
        raise ValidationError(f"feature must be unit norm, got norm {norm!r}")
    if f_e.shape != (centers.bits,):
        raise ValidationError(
            f"feature length {f_e.shape} != code bits {centers.bits}"
        )
    return centers.unit_rows() @ f_e


def metric_loss(
    logits: np.ndarray, targets: np.ndarray, config: LossConfig
) -> tuple[float, np.ndarray]:
    """Mean margin-softmax loss over cosine logits and its exact gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ValidationError(f"logits must be (N, C), got {logits.shape}")
    n, c = logits.shape
    if targets.shape != (n,):
        raise ValidationError(f"targets shape {targets.shape} != ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValidationError(f"target index out of range for {c} classes")
    targets = targets.astype(np.int64)
    rows = np.arange(n)
    s = config.scale_s
    m1, m2, m3 = config.margins()

    target_cos = logits[rows, targets]
    if m1 == 1.0 and m2 == 0.0:
        transformed = target_cos - m3
        dtransform = np.ones(n)
    else:
        clipped = np.clip(target_cos, -1.0 + _ACOS_EPS, 1.0 - _ACOS_EPS)
        theta = np.arccos(clipped)
        transformed = np.cos(m1 * theta + m2) - m3
        dtransform = m1 * np.sin(m1 * theta + m2) / np.sin(theta)

    scaled = s * logits
    scaled[rows, targets] = s * transformed
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = float(-log_p[rows, targets].mean())

    grad = np.exp(log_p)
    grad[rows, targets] -= 1.0
    grad *= s / n
    grad[rows, targets] *= dtransform
    return loss, grad


def quant_loss(
    v: np.ndarray,
    mode: str,
    dsf: DsfParams,
    t: np.ndarray | float | None = None,
) -> QuantResult:
    """Quantization penalty (1/N) sum_i ||v_i - binarize(v_i)||^2.

    hard_sign treats the binary code as constant (straight-through gradient).
    dsf_surrogate blends the plain-sign and in-interval targets with a smooth
    membership w = logistic((t - |v|) / tau), which is differentiable in both
    v and the threshold t; it collapses to the hard loss as tau -> 0.

    t may override the scalar DsfParams threshold, either as a shared scalar
    or one threshold per sample; grad_t matches that shape.
    """
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    n = v.shape[0]
    if mode not in QUANT_MODES:
        raise ValidationError(f"unknown quantization mode {mode!r}")
    if mode == "none":
        return QuantResult(loss=0.0, grad_v=np.zeros_like(v), grad_t=None)

    scalar_t = t is None or np.ndim(t) == 0
    if scalar_t:
        t_rows = np.full(n, dsf.threshold_t if t is None else float(t))
    else:
        t_rows = np.asarray(t, dtype=np.float64)
    if t_rows.shape != (n,):
        raise ValidationError(f"per-sample t shape {t_rows.shape} != ({n},)")
    if np.any(t_rows < 0):
        raise ValidationError("thresholds must be >= 0")

    if mode == "hard_sign":
        codes = np.stack([sign_dynamic(v[i], float(t_rows[i])) for i in range(n)])
        diff = v - codes
        return QuantResult(
            loss=float((diff**2).sum() / n), grad_v=2.0 * diff / n, grad_t=None
        )

    # dsf_surrogate
    tau = dsf.temperature_tau
    signs = sign_plain(v).astype(np.float64)
    dyn = np.array(
        [dynamic_fill_value(v[i], float(t_rows[i])) for i in range(n)], dtype=np.float64
    )
    w = stable_logistic((t_rows[:, None] - np.abs(v)) / tau)
    to_sign = (v - signs) ** 2
    to_dyn = (v - dyn[:, None]) ** 2
    loss = float(((1.0 - w) * to_sign + w * to_dyn).sum() / n)
    dw_dv = w * (1.0 - w) * (-signs / tau)
    grad_v = (
        (1.0 - w) * 2.0 * (v - signs)
        + w * 2.0 * (v - dyn[:, None])
        + dw_dv * (to_dyn - to_sign)
    ) / n
    grad_t_rows = (w * (1.0 - w) / tau * (to_dyn - to_sign)).sum(axis=1) / n
    grad_t = float(grad_t_rows.sum()) if scalar_t else grad_t_rows
    return QuantResult(loss=loss, grad_v=grad_v, grad_t=grad_t)


def combined_objective(
    features: np.ndarray,
    targets: np.ndarray,
    centers: HashCenterSet,
    config: LossConfig,
    dsf: DsfParams,
) -> LossReport:
    """Total objective metric + lam * quant on a batch of raw features.

    Features are L2-normalized internally; the returned gradient is taken with
    respect to the raw inputs, so it includes the normalization Jacobian, the
    sqrt(K) code scaling, and (in surrogate mode with a head) the path from
    the feature through the learned threshold.
    """
    z = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n, k = z.shape
    if k != centers.bits:
        raise ValidationError(f"feature dim {k} != center bits {centers.bits}")
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms < 1e-12):
        raise ValidationError("cannot normalize a zero feature row")
    f = z / norms[:, None]

    u = centers.unit_rows()  # (C, K)
    logits = f @ u.T
    metric, grad_logits = metric_loss(logits, targets, config)
    df = grad_logits @ u  # dMetric/df

    quant = 0.0
    grad_head = None
    mode = config.quantization_mode
    if mode != "none":
        root_k = math.sqrt(k)
        v = root_k * f
        if mode == "dsf_surrogate" and dsf.head_weights is not None:
            if dsf.head_weights.shape != (k,):
                raise ValidationError(
                    f"head_weights shape {dsf.head_weights.shape} != ({k},)"
                )
            raw = f @ dsf.head_weights
            sig = stable_logistic(raw)
            t_rows = dsf.t_upper_bound * sig
            result = quant_loss(v, mode, dsf, t=t_rows)
            dt_draw = dsf.t_upper_bound * sig * (1.0 - sig)  # dt/draw
            per_sample_dt = np.asarray(result.grad_t) * dt_draw
            df = df + config.lam * (
                root_k * result.grad_v + per_sample_dt[:, None] * dsf.head_weights[None, :]
            )
            grad_head = config.lam * (per_sample_dt @ f)
        else:
            result = quant_loss(v, mode, dsf)
            df = df + config.lam * root_k * result.grad_v
        quant = result.loss

    total = metric + config.lam * quant
    # Normalization Jacobian: dz = (df - (f . df) f) / ||z||
    inner = (f * df).sum(axis=1, keepdims=True)
    grad_z = (df - inner * f) / norms[:, None]
    return LossReport(
        metric_loss=metric,
        quant_loss=quant,
        total=total,
        per_sample_logits=logits,
        grad_features=grad_z,
        grad_dsf_head=grad_head,
    )


def hamming_from_cosine(cos_sim: float, bits: int) -> float:
    """Hamming distance implied by a cosine: (K/2)(1 - cos). Exact for sign
    codes."""
    if not -1.0 <= cos_sim <= 1.0:
        raise ValidationError(f"cosine {cos_sim} outside [-1, 1]")
    return 0.5 * bits * (1.0 - cos_sim)
