"""Dense numeric kernels shared by every other module.

All math here runs in float64 on plain numpy arrays. Vectors are 1-D
arrays, matrices 2-D row-major arrays; the validators below are the only
entry points that coerce and check shapes, so downstream code can assume
finite, well-shaped operands.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    DegenerateVector,
    InvalidParameter,
    NonFiniteInput,
    ShapeMismatch,
)


def as_vector(values, dim: int | None = None) -> np.ndarray:
    """Coerce to a finite 1-D float64 array, optionally checking length."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeMismatch(f"expected nonempty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteInput("vector contains NaN or Inf")
    if dim is not None and v.size != dim:
        raise ShapeMismatch(f"expected dim {dim}, got {v.size}")
    return v


def as_matrix(values, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Coerce to a finite 2-D float64 array, optionally checking shape."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ShapeMismatch(f"expected nonempty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteInput("matrix contains NaN or Inf")
    if shape is not None and m.shape != shape:
        raise ShapeMismatch(f"expected shape {shape}, got {m.shape}")
    return m


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; the same seed yields the same stream on
    any platform."""
    return np.random.Generator(np.random.Philox(seed))


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax; safe for arbitrarily large logits."""
    x = as_vector(logits)
    shifted = np.exp(x - x.max())
    return shifted / shifted.sum()


def cosine_sim(a, b) -> float:
    """Cosine similarity in [-1, 1]; both arguments must be nonzero."""
    va = as_vector(a)
    vb = as_vector(b, dim=va.size)
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVector("cosine similarity of a zero vector")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def circ_conv(a, b) -> np.ndarray:
    """Circular convolution, direct O(D^2) evaluation.

    out[i] = sum_j a[j] * b[(i - j) mod D]. The direct form is the
    shipped path; tests cross-check it against an FFT oracle.
    """
    va = as_vector(a)
    vb = as_vector(b, dim=va.size)
    d = va.size
    idx = (np.arange(d)[:, None] - np.arange(d)[None, :]) % d  # [i, j] -> i-j
    return (vb[idx] * va[None, :]).sum(axis=1)


def gauss_kl(p_mean, p_var, q_mean, q_var) -> float:
    """KL divergence between diagonal Gaussians N(p_mean, p_var) and
    N(q_mean, q_var).

    Per dimension: 0.5 * (log(qv/pv) + (pv + (pm - qm)^2) / qv - 1),
    summed over dimensions. Always >= 0; tiny negative rounding is
    clamped to zero.
    """
    pm = as_vector(p_mean)
    pv = as_vector(p_var, dim=pm.size)
    qm = as_vector(q_mean, dim=pm.size)
    qv = as_vector(q_var, dim=pm.size)
    if np.any(pv <= 0.0) or np.any(qv <= 0.0):
        raise InvalidParameter("variances must be strictly positive")
    terms = 0.5 * (np.log(qv / pv) + (pv + (pm - qm) ** 2) / qv - 1.0)
    return max(float(terms.sum()), 0.0)


def log_normal_pdf(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> float:
    """Log density of a diagonal Gaussian at x."""
    return float(
        -0.5 * (np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var).sum()
    )


def logsumexp(values: np.ndarray) -> float:
    m = float(np.max(values))
    if not np.isfinite(m):
        return m
    return m + float(np.log(np.sum(np.exp(values - m))))
