"""Desk-scale training harness.

A small trainable encoder (dense map, optionally one hidden layer) produces
the continuous feature; the combined objective pulls it toward the class
center while the quantization term pushes it onto the binary corners. The
optimizer keeps a running mean of squared gradients:

    acc   <- decay * acc + (1 - decay) * grad^2
    param <- param - lr * grad / (sqrt(acc) + eps) - lr * weight_decay * param

Everything is deterministic given (data, config, seed): fixed-order batch
reductions, one RNG stream per run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from cshash.binhash import (
    BalanceReport,
    BinaryCodeMatrix,
    DsfParams,
    balance_stats,
    sign_dynamic,
    sign_plain,
    stable_logistic,
)
from cshash.centers import HashCenterSet, ProblemConfig, generate_centers, multilabel_center
from cshash.errors import TrainingDiverged, ValidationError
from cshash.losses import LossConfig, combined_objective
from cshash.retrieval import build_index, map_at_k


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 20
    samples_per_class: int = 100
    input_dim: int = 64
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.samples_per_class < 1 or self.input_dim < 1:
            raise ValidationError("counts and dims must be >= 1")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    learning_rate: float = 1e-3  # desk-scale default; see README for rationale
    weight_decay: float = 1e-5
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    dsf_enabled: bool = False
    t_upper_bound: float = 0.005
    hidden_dim: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0 <= self.rmsprop_decay < 1:
            raise ValidationError("rmsprop_decay must be in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    metric_loss: float
    quant_loss: float
    total: float
    map_eval: float  # NaN when no eval split was supplied
    mean_imbalance: float
    t_value: float  # mean learned threshold; 0 when the DSF head is disabled


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[EpochRecord]
    codes: BinaryCodeMatrix


def generate_synthetic(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Clustered features: one random unit direction per class plus Gaussian
    noise. Samples are grouped by class; byte-identical per seed."""
    rng = np.random.default_rng(spec.seed)
    directions = rng.standard_normal((spec.n_classes, spec.input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    noise = rng.standard_normal((labels.size, spec.input_dim))
    features = directions[labels] + spec.noise_sigma * noise
    return features, labels


def generate_synthetic_multilabel(
    spec: SyntheticSpec, max_labels: int = 3
) -> tuple[np.ndarray, list[frozenset[int]]]:
    """Multi-label variant: each sample carries 1..max_labels classes and sits
    at the mean of the chosen class directions plus noise."""
    rng = np.random.default_rng(spec.seed)
    directions = rng.standard_normal((spec.n_classes, spec.input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    n = spec.n_classes * spec.samples_per_class
    label_sets: list[frozenset[int]] = []
    features = np.empty((n, spec.input_dim))
    for i in range(n):
        count = int(rng.integers(1, max_labels + 1))
        chosen = rng.choice(spec.n_classes, size=count, replace=False)
        label_sets.append(frozenset(int(c) for c in chosen))
        features[i] = directions[chosen].mean(axis=0)
    features += spec.noise_sigma * rng.standard_normal(features.shape)
    return features, label_sets


def composite_center_targets(
    label_sets: list[frozenset[int]], centers: HashCenterSet, seed: int
) -> tuple[HashCenterSet, np.ndarray]:
    """Augment the center set with one majority-vote composite per distinct
    label set and map each sample to its composite's index."""
    from cshash.centers import CenterSource

    distinct = sorted(set(label_sets), key=sorted)
    rows = np.stack([multilabel_center(s, centers, seed) for s in distinct])
    lookup = {s: i for i, s in enumerate(distinct)}
    targets = np.array([lookup[s] for s in label_sets], dtype=np.int64)
    composite = HashCenterSet(
        bits=centers.bits,
        classes=len(distinct),
        rows=rows,
        sources=tuple(CenterSource.SAMPLED for _ in distinct),
    )
    return composite, targets


def init_params(
    input_dim: int, code_bits: int, config: TrainConfig, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    if config.hidden_dim:
        h = config.hidden_dim
        params["w1"] = rng.standard_normal((h, input_dim)) / math.sqrt(input_dim)
        params["b1"] = np.zeros(h)
        params["w2"] = rng.standard_normal((code_bits, h)) / math.sqrt(h)
        params["b2"] = np.zeros(code_bits)
    else:
        params["w"] = rng.standard_normal((code_bits, input_dim)) / math.sqrt(input_dim)
        params["b"] = np.zeros(code_bits)
    if config.dsf_enabled:
        params["dsf_head"] = np.zeros(code_bits)
    return params


def encoder_forward(
    params: dict[str, np.ndarray], x: np.ndarray
) -> tuple[np.ndarray, np.ndarray | None]:
    """Raw (pre-normalization) features; also returns the hidden activation
    when the one-hidden-layer variant is active."""
    if "w1" in params:
        hidden = np.tanh(x @ params["w1"].T + params["b1"])
        return hidden @ params["w2"].T + params["b2"], hidden
    return x @ params["w"].T + params["b"], None


def encoder_backward(
    params: dict[str, np.ndarray],
    x: np.ndarray,
    hidden: np.ndarray | None,
    grad_z: np.ndarray,
) -> dict[str, np.ndarray]:
    if "w1" in params:
        grads = {
            "w2": grad_z.T @ hidden,
            "b2": grad_z.sum(axis=0),
        }
        dh = (grad_z @ params["w2"]) * (1.0 - hidden**2)
        grads["w1"] = dh.T @ x
        grads["b1"] = dh.sum(axis=0)
        return grads
    return {"w": grad_z.T @ x, "b": grad_z.sum(axis=0)}


def rmsprop_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict[str, np.ndarray],
    config: TrainConfig,
) -> None:
    lr, decay, eps = config.learning_rate, config.rmsprop_decay, config.rmsprop_eps
    for name, grad in grads.items():
        acc = state[name]
        acc *= decay
        acc += (1.0 - decay) * grad**2
        params[name] -= lr * grad / (np.sqrt(acc) + eps)
        params[name] -= lr * config.weight_decay * params[name]


def _dsf_params(params: dict[str, np.ndarray], config: TrainConfig) -> DsfParams:
    head = params.get("dsf_head") if config.dsf_enabled else None
    return DsfParams(
        threshold_t=0.0,
        t_upper_bound=config.t_upper_bound,
        head_weights=None if head is None else head.copy(),
    )


def encode_features(
    params: dict[str, np.ndarray],
    x: np.ndarray,
    config: TrainConfig,
) -> BinaryCodeMatrix:
    """Binarize encoder outputs: dynamic sign with the learned per-sample
    threshold when the DSF head is enabled, plain sign otherwise."""
    z, _ = encoder_forward(params, x)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValidationError("encoder produced a zero feature; cannot encode")
    f = z / norms
    v = math.sqrt(f.shape[1]) * f
    if config.dsf_enabled and "dsf_head" in params:
        bound = config.t_upper_bound
        t_rows = bound * stable_logistic(f @ params["dsf_head"])
        signs = np.stack(
            [sign_dynamic(v[i], float(t_rows[i])) for i in range(v.shape[0])]
        )
    else:
        signs = sign_plain(v)
    return BinaryCodeMatrix.from_signs(signs)


def train(
    features: np.ndarray,
    labels: np.ndarray,
    centers: HashCenterSet,
    config: TrainConfig,
    eval_features: np.ndarray | None = None,
    eval_labels: np.ndarray | None = None,
) -> TrainResult:
    """Optimize the encoder (and DSF head) on the combined objective.

    When an eval split is given, each epoch records mAP@100 of the eval
    queries against the training gallery.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValidationError(f"bad data shapes: {x.shape}, {y.shape}")
    rng = np.random.default_rng(config.seed)
    params = init_params(x.shape[1], centers.bits, config, rng)
    state = {name: np.zeros_like(value) for name, value in params.items()}
    loss_config = config.loss
    history: list[EpochRecord] = []

    for epoch in range(config.epochs):
        order = rng.permutation(x.shape[0])
        sums = np.zeros(3)
        t_sum, t_count = 0.0, 0
        for batch_index, start in enumerate(range(0, x.shape[0], config.batch_size)):
            idx = order[start : start + config.batch_size]
            xb, yb = x[idx], y[idx]
            z, hidden = encoder_forward(params, xb)
            dsf = _dsf_params(params, config)
            report = combined_objective(z, yb, centers, loss_config, dsf)
            if not math.isfinite(report.total):
                raise TrainingDiverged(epoch, batch_index, report.total)
            grads = encoder_backward(params, xb, hidden, report.grad_features)
            if report.grad_dsf_head is not None:
                grads["dsf_head"] = report.grad_dsf_head
            rmsprop_step(params, grads, state, config)
            sums += len(idx) * np.array(
                [report.metric_loss, report.quant_loss, report.total]
            )
            if config.dsf_enabled and "dsf_head" in params:
                zn = z / np.linalg.norm(z, axis=1, keepdims=True)
                t_sum += float(
                    (config.t_upper_bound * stable_logistic(zn @ params["dsf_head"])).sum()
                )
                t_count += len(idx)
        train_codes = encode_features(params, x, config)
        map_eval = float("nan")
        if eval_features is not None and eval_labels is not None:
            gallery = build_index(
                train_codes, np.arange(train_codes.count, dtype=np.uint64), y
            )
            query_codes = encode_features(params, np.asarray(eval_features), config)
            map_eval = map_at_k(gallery, query_codes, np.asarray(eval_labels), k=100)
        history.append(
            EpochRecord(
                epoch=epoch,
                metric_loss=float(sums[0] / x.shape[0]),
                quant_loss=float(sums[1] / x.shape[0]),
                total=float(sums[2] / x.shape[0]),
                map_eval=map_eval,
                mean_imbalance=balance_stats(train_codes).mean,
                t_value=(t_sum / t_count) if t_count else 0.0,
            )
        )
    return TrainResult(params=params, history=history, codes=encode_features(params, x, config))


@dataclass
class AblationRow:
    name: str
    map_eval: float
    mean_imbalance: float
    max_imbalance: int
    metric_loss: float
    quant_loss: float
    total: float


def standard_variants(base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """The loss-ablation grid: plain cross-entropy, quantization on/off,
    additive-cosine margin, and the dynamic-sign variant."""
    def with_loss(variant: str, mode: str, dsf: bool) -> TrainConfig:
        loss = replace(base.loss, variant=variant, quantization_mode=mode,
                       lam=0.0 if mode == "none" else base.loss.lam)
        return replace(base, loss=loss, dsf_enabled=dsf)

    return [
        ("CE", with_loss("ce", "none", False)),
        ("CE+Qua", with_loss("ce", "hard_sign", False)),
        ("CF", with_loss("cosface", "none", False)),
        ("CF+Qua", with_loss("cosface", "hard_sign", False)),
        ("CF+DSF", with_loss("cosface", "dsf_surrogate", True)),
    ]


def ablation_matrix(
    named_configs: list[tuple[str, TrainConfig]],
    features: np.ndarray,
    labels: np.ndarray,
    centers: HashCenterSet,
    eval_features: np.ndarray,
    eval_labels: np.ndarray,
) -> list[AblationRow]:
    """Train every named variant on the shared dataset and report retrieval
    quality plus code-balance statistics."""
    rows = []
    for name, config in named_configs:
        result = train(features, labels, centers, config, eval_features, eval_labels)
        last = result.history[-1]
        balance = balance_stats(result.codes)
        rows.append(
            AblationRow(
                name=name,
                map_eval=last.map_eval,
                mean_imbalance=balance.mean,
                max_imbalance=balance.max,
                metric_loss=last.metric_loss,
                quant_loss=last.quant_loss,
                total=last.total,
            )
        )
    return rows


@dataclass
class BenchmarkResult:
    map_at_100: float
    history: list[EpochRecord]
    codes: BinaryCodeMatrix
    balance: BalanceReport
    plain_sign_balance: BalanceReport
    params: dict[str, np.ndarray]


def split_benchmark_data(
    spec: SyntheticSpec, query_fraction: float = 0.2
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic per-class train/query split of the synthetic set."""
    features, labels = generate_synthetic(spec)
    rng = np.random.default_rng(spec.seed + 1)
    train_mask = np.ones(labels.size, dtype=bool)
    for c in range(spec.n_classes):
        members = np.flatnonzero(labels == c)
        n_query = max(1, int(round(query_fraction * members.size)))
        train_mask[rng.choice(members, size=n_query, replace=False)] = False
    return (
        features[train_mask],
        labels[train_mask],
        features[~train_mask],
        labels[~train_mask],
    )


def run_benchmark(
    config: TrainConfig, spec: SyntheticSpec | None = None, code_bits: int = 16
) -> BenchmarkResult:
    """Train on the standard synthetic benchmark and evaluate mAP@100 of the
    held-out queries against the training gallery."""
    spec = spec or SyntheticSpec(seed=config.seed)
    train_x, train_y, query_x, query_y = split_benchmark_data(spec)
    problem = ProblemConfig(
        n_samples=train_y.size,
        n_classes=spec.n_classes,
        input_dim=spec.input_dim,
        code_bits=code_bits,
    )
    centers = generate_centers(problem, seed=spec.seed)
    result = train(train_x, train_y, centers, config, query_x, query_y)
    gallery = build_index(
        result.codes, np.arange(result.codes.count, dtype=np.uint64), train_y
    )
    query_codes = encode_features(result.params, query_x, config)
    final_map = map_at_k(gallery, query_codes, query_y, k=100)
    plain_config = replace(config, dsf_enabled=False)
    plain_codes = encode_features(result.params, train_x, plain_config)
    return BenchmarkResult(
        map_at_100=final_map,
        history=result.history,
        codes=result.codes,
        balance=balance_stats(result.codes),
        plain_sign_balance=balance_stats(plain_codes),
        params=result.params,
    )
