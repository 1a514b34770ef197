"""Dense tensor kernels for the feature-extraction forward pass.

Tensors are plain numpy arrays in channel-first layout. The file format
(magic "CSFT") stores row-major little-endian float32 with explicit dims and
rejects non-finite values on read.
"""

from __future__ import annotations

import numpy as np

from cshash.errors import ValidationError
from cshash.fileio import read_tensor, read_tensor_bytes, write_tensor, write_tensor_bytes

__all__ = [
    "avg_pool_global",
    "conv2d",
    "fold_windows",
    "l2_normalize",
    "matmul",
    "read_tensor",
    "read_tensor_bytes",
    "softplus",
    "unfold_windows",
    "write_tensor",
    "write_tensor_bytes",
]

ZERO_NORM_FLOOR = 1e-12


def conv2d(
    inputs: np.ndarray,
    kernel: np.ndarray,
    dilation: int = 1,
    padding: str = "same",
) -> np.ndarray:
    """Dilated 2-D cross-correlation with zero "same" padding.

    inputs is (c_in, h, w), kernel is (c_out, c_in, kh, kw) with odd spatial
    dims; the output is (c_out, h, w).
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if inputs.ndim != 3 or kernel.ndim != 4:
        raise ValidationError(
            f"conv2d expects (c,h,w) input and (o,c,kh,kw) kernel, "
            f"got {inputs.shape} and {kernel.shape}"
        )
    if kernel.shape[1] != inputs.shape[0]:
        raise ValidationError(
            f"channel mismatch: input has {inputs.shape[0]}, kernel expects "
            f"{kernel.shape[1]}"
        )
    c_out, _, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValidationError(f"kernel spatial dims must be odd, got {kh}x{kw}")
    if dilation < 1:
        raise ValidationError(f"dilation must be >= 1, got {dilation}")
    if padding != "same":
        raise ValidationError(f"only 'same' padding is supported, got {padding!r}")
    _, h, w = inputs.shape
    pad_h = dilation * (kh // 2)
    pad_w = dilation * (kw // 2)
    padded = np.pad(inputs, ((0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    out = np.zeros((c_out, h, w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            window = padded[:, i * dilation : i * dilation + h, j * dilation : j * dilation + w]
            out += np.einsum("oc,chw->ohw", kernel[:, :, i, j], window)
    return out


def unfold_windows(inputs: np.ndarray, window: int) -> np.ndarray:
    """Tile (c, h, w) into non-overlapping window x window patches.

    Returns (m, c*window*window) with patches in row-major scan order, each
    flattened channel-major.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3:
        raise ValidationError(f"expected (c,h,w), got shape {inputs.shape}")
    c, h, w = inputs.shape
    if window < 1 or h % window or w % window:
        raise ValidationError(
            f"window {window} must divide spatial dims {h}x{w}"
        )
    gh, gw = h // window, w // window
    tiles = inputs.reshape(c, gh, window, gw, window)
    return tiles.transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * window * window)


def fold_windows(patches: np.ndarray, shape: tuple[int, int, int], window: int) -> np.ndarray:
    """Inverse of unfold_windows for the given original (c, h, w) shape."""
    c, h, w = shape
    gh, gw = h // window, w // window
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape != (gh * gw, c * window * window):
        raise ValidationError(
            f"patches shape {patches.shape} inconsistent with {shape}, window {window}"
        )
    tiles = patches.reshape(gh, gw, c, window, window)
    return tiles.transpose(2, 0, 3, 1, 4).reshape(c, h, w)


def avg_pool_global(inputs: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean of a (c, h, w) map."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3:
        raise ValidationError(f"expected (c,h,w), got shape {inputs.shape}")
    return inputs.mean(axis=(1, 2))


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) in the overflow-safe form max(x,0) + log1p(exp(-|x|))."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm; degenerate inputs are an error."""
    x = np.asarray(x, dtype=np.float64)
    norm = float(np.linalg.norm(x))
    if norm < ZERO_NORM_FLOOR:
        raise ValidationError(f"cannot normalize vector with norm {norm!r}")
    return x / norm


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[0]:
        raise ValidationError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b
