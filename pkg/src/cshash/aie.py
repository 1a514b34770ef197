"""Cross-scale feature extraction forward pass.

Two branches feed an extraction step. The global branch reduces a high-level
map through two 1x1 convolutions, tiles each result into sliding windows and
projects every window to a shared descriptor dimension d. The local branch
runs three dilated convolutions (summed) over a mid-level map and weights each
spatial position by a softplus attention scalar. Extraction then removes from
the local columns their projection onto the global descriptors,

    f_t2 = f_g (f_g^T f_l),    f_t3 = f_l - f_t2,

and the final feature concatenates a channel-mixed flattening of f_g with the
pooled residual, projects to K dims and L2-normalizes.

Weights here are loaded or seeded-random; nothing in this module is trained.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from cshash import fileio
from cshash.errors import ValidationError
from cshash.tensor import avg_pool_global, conv2d, l2_normalize, softplus, unfold_windows


@dataclass(frozen=True)
class AieConfig:
    window_sizes: tuple[int, int] = (2, 4)
    global_desc_dim: int = 128  # d, shared by both branches
    global_reduced_dim: int = 32  # d', channel-mixer output per window
    local_dim: int = 128  # must equal global_desc_dim
    path_channels: tuple[int, int] = (32, 16)  # channels after the two 1x1 convs
    aspp_dilations: tuple[int, int, int] = (1, 2, 3)
    hash_bits: int = 16
    orthonormalize_fg: bool = False

    def __post_init__(self):
        if self.local_dim != self.global_desc_dim:
            raise ValidationError(
                "local_dim must equal global_desc_dim for the extraction products"
            )
        if any(w < 1 for w in self.window_sizes):
            raise ValidationError(f"window sizes must be >= 1: {self.window_sizes}")
        if any(c < 1 for c in self.path_channels):
            raise ValidationError(f"path channels must be >= 1: {self.path_channels}")
        if any(d < 1 for d in self.aspp_dilations):
            raise ValidationError(f"dilations must be >= 1: {self.aspp_dilations}")


@dataclass(frozen=True)
class AieWeights:
    """All forward-pass parameters, keyed by role for serialization."""

    global_reduce_1: np.ndarray  # (r1, c4, 1, 1)
    global_reduce_2: np.ndarray  # (r2, c4, 1, 1)
    window_proj_1: np.ndarray  # (d, r1 * sw1^2)
    window_proj_2: np.ndarray  # (d, r2 * sw2^2)
    aspp_conv_1: np.ndarray  # (d, c3, 3, 3)
    aspp_conv_2: np.ndarray
    aspp_conv_3: np.ndarray
    attention_conv: np.ndarray  # (1, d, 1, 1)
    fg_mixer: np.ndarray  # (d', d)
    hash_proj: np.ndarray  # (K, d' * m + d)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, tensors: dict[str, np.ndarray]) -> "AieWeights":
        missing = set(cls.__dataclass_fields__) - set(tensors)
        if missing:
            raise ValidationError(f"weights container missing tensors: {sorted(missing)}")
        return cls(**{name: tensors[name] for name in cls.__dataclass_fields__})


@dataclass(frozen=True)
class ExtractedFeature:
    f_g: np.ndarray  # (d, m) window descriptors
    f_l: np.ndarray  # (d, n) attention-weighted local columns
    f_t2: np.ndarray  # (d, n) redundant component
    f_t3: np.ndarray  # (d, n) residual detail, f_l - f_t2
    f_e: np.ndarray  # (K,) unit vector
    config: AieConfig = field(repr=False, default=AieConfig())


def window_count(h: int, w: int, config: AieConfig) -> int:
    total = 0
    for sw in config.window_sizes:
        if h % sw or w % sw:
            raise ValidationError(f"window {sw} must divide global map dims {h}x{w}")
        total += (h // sw) * (w // sw)
    return total


def init_weights(
    config: AieConfig, c3: int, c4: int, global_hw: tuple[int, int], seed: int
) -> AieWeights:
    """Seeded random weights sized for the given input maps.

    Scales follow 1/sqrt(fan_in) so intermediate magnitudes stay O(1).
    """
    rng = np.random.default_rng(seed)
    d, dp = config.global_desc_dim, config.global_reduced_dim
    r1, r2 = config.path_channels
    sw1, sw2 = config.window_sizes
    m = window_count(*global_hw, config)

    def dense(*shape):
        fan_in = shape[-1] if len(shape) == 2 else int(np.prod(shape[1:]))
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    return AieWeights(
        global_reduce_1=dense(r1, c4, 1, 1),
        global_reduce_2=dense(r2, c4, 1, 1),
        window_proj_1=dense(d, r1 * sw1 * sw1),
        window_proj_2=dense(d, r2 * sw2 * sw2),
        aspp_conv_1=dense(d, c3, 3, 3),
        aspp_conv_2=dense(d, c3, 3, 3),
        aspp_conv_3=dense(d, c3, 3, 3),
        attention_conv=dense(1, d, 1, 1),
        fg_mixer=dense(dp, d),
        hash_proj=dense(config.hash_bits, dp * m + d),
    )


def global_branch(f4: np.ndarray, weights: AieWeights, config: AieConfig) -> np.ndarray:
    """Window descriptors (d, m): reduce channels, unfold at each window size,
    project every flattened window to d, concatenate, unit-normalize columns."""
    f4 = np.asarray(f4, dtype=np.float64)
    columns = []
    paths = (
        (weights.global_reduce_1, weights.window_proj_1, config.window_sizes[0]),
        (weights.global_reduce_2, weights.window_proj_2, config.window_sizes[1]),
    )
    for reduce_kernel, proj, sw in paths:
        reduced = conv2d(f4, reduce_kernel)
        patches = unfold_windows(reduced, sw)  # (m_i, r*sw*sw)
        if proj.shape[1] != patches.shape[1]:
            raise ValidationError(
                f"window projection expects {proj.shape[1]} inputs, "
                f"got {patches.shape[1]}"
            )
        columns.append(proj @ patches.T)  # (d, m_i)
    f_g = np.concatenate(columns, axis=1)
    norms = np.linalg.norm(f_g, axis=0)
    if np.any(norms < 1e-12):
        raise ValidationError(
            "global branch produced a zero window descriptor; cannot normalize"
        )
    return f_g / norms


def aspp_forward(f3: np.ndarray, weights: AieWeights, config: AieConfig) -> np.ndarray:
    """Sum of the three dilated convolution outputs, shape (d, h2, w2)."""
    f3 = np.asarray(f3, dtype=np.float64)
    kernels = (weights.aspp_conv_1, weights.aspp_conv_2, weights.aspp_conv_3)
    out = None
    for kernel, dilation in zip(kernels, config.aspp_dilations):
        term = conv2d(f3, kernel, dilation=dilation)
        out = term if out is None else out + term
    return out


def apply_attention(f_ma: np.ndarray, weights: AieWeights) -> np.ndarray:
    """Scale each spatial position of (d, h, w) by softplus(1x1 conv) and
    flatten to local columns (d, h*w)."""
    f_ma = np.asarray(f_ma, dtype=np.float64)
    attention = softplus(conv2d(f_ma, weights.attention_conv))[0]  # (h, w)
    weighted = f_ma * attention[None, :, :]
    d = f_ma.shape[0]
    return weighted.reshape(d, -1)


def local_branch(f3: np.ndarray, weights: AieWeights, config: AieConfig) -> np.ndarray:
    return apply_attention(aspp_forward(f3, weights, config), weights)


def aie_extract(f_g: np.ndarray, f_l: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Redundant component and residual: f_t2 = f_g (f_g^T f_l), f_t3 = f_l - f_t2."""
    f_g = np.asarray(f_g, dtype=np.float64)
    f_l = np.asarray(f_l, dtype=np.float64)
    if f_g.ndim != 2 or f_l.ndim != 2 or f_g.shape[0] != f_l.shape[0]:
        raise ValidationError(
            f"descriptor dims must match: f_g {f_g.shape}, f_l {f_l.shape}"
        )
    f_t2 = f_g @ (f_g.T @ f_l)
    return f_t2, f_l - f_t2


def orthonormalize_columns(matrix: np.ndarray) -> np.ndarray:
    """QR-orthonormalized column basis; makes the extraction a true projection."""
    matrix = np.asarray(matrix, dtype=np.float64)
    q, _ = np.linalg.qr(matrix)
    return q


def assemble_fe(
    f_g: np.ndarray, f_t3: np.ndarray, weights: AieWeights, config: AieConfig
) -> np.ndarray:
    """Final K-dim unit feature from the mixed global windows and the pooled
    residual."""
    f_g = np.asarray(f_g, dtype=np.float64)
    f_t3 = np.asarray(f_t3, dtype=np.float64)
    mixed = weights.fg_mixer @ f_g  # (d', m), unit-window channel mixing
    pooled = f_t3.mean(axis=1)  # (d,)
    stacked = np.concatenate([mixed.reshape(-1), pooled])
    if weights.hash_proj.shape[1] != stacked.shape[0]:
        raise ValidationError(
            f"hash projection expects {weights.hash_proj.shape[1]} inputs, "
            f"got {stacked.shape[0]} (check window/map sizes)"
        )
    return l2_normalize(weights.hash_proj @ stacked)


def extract_feature(
    f3: np.ndarray, f4: np.ndarray, weights: AieWeights, config: AieConfig
) -> ExtractedFeature:
    """Run the full two-branch pass and return all intermediates."""
    f_g = global_branch(f4, weights, config)
    f_l = local_branch(f3, weights, config)
    basis = orthonormalize_columns(f_g) if config.orthonormalize_fg else f_g
    f_t2, f_t3 = aie_extract(basis, f_l)
    f_e = assemble_fe(f_g, f_t3, weights, config)
    return ExtractedFeature(f_g=f_g, f_l=f_l, f_t2=f_t2, f_t3=f_t3, f_e=f_e, config=config)


def save_weights(path: str | os.PathLike, weights: AieWeights) -> None:
    fileio.write_tensor_container(path, weights.as_dict())


def load_weights(path: str | os.PathLike) -> AieWeights:
    return AieWeights.from_dict(fileio.read_tensor_container(path))
