"""Independent numeric oracles used by the tests.

Everything here deliberately avoids the package's tape machinery: gradients
come from central finite differences, convolution from a direct sliding
window, classification probes from closed-form linear discriminant analysis.
"""

import numpy as np

from auxquant import no_grad


def numeric_grad(loss_fn, arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. one array,
    perturbing it in place."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            f_plus = float(loss_fn())
        flat[i] = orig - eps
        with no_grad():
            f_minus = float(loss_fn())
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Per-element relative error with a floor at 1% of the gradient scale.

    The floor keeps finite-difference roundoff on near-zero elements from
    registering as spurious relative error while still flagging any
    gradient-scale defect.
    """
    scale = max(float(np.abs(numeric).max()), 1e-12)
    denom = np.maximum(np.abs(numeric), 0.01 * scale + 1e-10)
    return float((np.abs(analytic - numeric) / denom).max())


def conv2d_reference(x: np.ndarray, w: np.ndarray, stride: int = 1,
                     padding: int = 0) -> np.ndarray:
    """Direct sliding-window convolution (independent of im2col)."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (x.shape[2] - kh) // stride + 1
    wo = (x.shape[3] - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for b in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = x[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, co, i, j] = (patch * w[co]).sum()
    return out


def batchnorm_reference(x, gamma, beta, eps=1e-5):
    """Training-mode batch normalization from the textbook formula."""
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    xhat = (x - mean) / np.sqrt(var + eps)
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None]


def nearest_grid_point(x: float, bits: int) -> float:
    """Enumerate the 2^k-level grid and pick the nearest point, breaking ties
    away from zero (toward the larger grid value on [0, 1])."""
    levels = (1 << bits) - 1
    grid = np.arange(levels + 1) / levels
    dist = np.abs(grid - x)
    best = dist.min()
    candidates = np.flatnonzero(np.isclose(dist, best, rtol=0, atol=1e-15))
    return float(grid[candidates[-1]])


def lda_accuracy(points: np.ndarray, labels: np.ndarray, classes: int) -> float:
    """Closed-form LDA (shared covariance, equal priors) train accuracy."""
    mus = np.stack([points[labels == c].mean(axis=0) for c in range(classes)])
    centered = points - mus[labels]
    cov = centered.T @ centered / len(points) + 1e-6 * np.eye(points.shape[1])
    icov = np.linalg.inv(cov)
    scores = points @ icov @ mus.T - 0.5 * np.einsum("ci,ij,cj->c", mus, icov, mus)
    return float((scores.argmax(axis=1) == labels).mean())


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
