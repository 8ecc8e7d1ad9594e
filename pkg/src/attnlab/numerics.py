"""Dense float64 numeric kernels: softmax, log-sum-exp, spectral norms, PCA, seeded sampling.

Every function is pure: output depends only on the arguments. Randomness is
confined to :func:`sample_gaussian`, which derives a fresh generator from the
caller's seed on every call, so identical seeds give bit-identical streams.
All arrays are coerced to float64 on entry.
"""

from __future__ import annotations

import numpy as np

POWER_TOLERANCE = 1e-10
POWER_MAX_ITERATIONS = 10_000
# Perturb-and-restart period for stalled power iteration (tiny eigengaps).
_RESTART_PERIOD = 500

SYMMETRY_TOLERANCE = 1e-10


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array or raise ``ValueError``."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got {m.ndim}-D")
    if m.size and not np.isfinite(m).all():
        raise ValueError(f"non-finite {name}")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    """Coerce ``a`` to a nonempty finite 1-D float64 array or raise ``ValueError``."""
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got {v.ndim}-D")
    if v.size == 0:
        raise ValueError(f"empty {name}")
    if not np.isfinite(v).all():
        raise ValueError(f"non-finite {name}")
    return v


def row_softmax(z) -> np.ndarray:
    """Row-wise softmax computed with max-shifted exponentials.

    Subtracting the row maximum keeps every exponent nonpositive, so the
    computation never overflows and each row sums to 1 within 1e-12 even for
    logits in the hundreds.
    """
    zm = as_matrix(z, "logits")
    if zm.shape[1] == 0:
        raise ValueError("logits must have at least one column")
    shifted = zm - zm.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_vec(z) -> np.ndarray:
    """Max-shifted softmax of a single logit vector."""
    zv = as_vector(z, "logits")
    e = np.exp(zv - zv.max())
    return e / e.sum()


def log_sum_exp(z) -> float:
    """log(sum(exp(z_j))) evaluated as max(z) + log(sum(exp(z - max(z))))."""
    zv = as_vector(z, "logits")
    m = float(zv.max())
    return m + float(np.log(np.exp(zv - m).sum()))


def spectral_norm_sym(a, method: str = "eigh") -> float:
    """Largest absolute eigenvalue of a symmetric matrix.

    ``method="eigh"`` (default) takes the full symmetric eigendecomposition.
    ``method="power"`` runs power iteration on A @ A — squaring removes
    eigenvalue-sign oscillation and makes the iterate matrix PSD — with
    tolerance ``POWER_TOLERANCE``, a cap of ``POWER_MAX_ITERATIONS``, and a
    perturbed restart every ``_RESTART_PERIOD`` stalled iterations. The two
    routes exist so they can be checked against each other; callers pick one.

    Raises ``ValueError`` if the input is not square or departs from symmetry
    by more than ``SYMMETRY_TOLERANCE`` in any entry.
    """
    m = as_matrix(a, "matrix")
    n, c = m.shape
    if n != c:
        raise ValueError(f"matrix must be square, got {n}x{c}")
    if n == 0:
        raise ValueError("empty matrix")
    if np.abs(m - m.T).max() > SYMMETRY_TOLERANCE:
        raise ValueError("matrix is not symmetric within tolerance")
    m = (m + m.T) / 2.0
    if method == "eigh":
        return float(np.abs(np.linalg.eigvalsh(m)).max())
    if method == "power":
        return _power_spectral_norm(m)
    raise ValueError(f"unknown method {method!r}; expected 'eigh' or 'power'")


def _power_spectral_norm(m: np.ndarray) -> float:
    n = m.shape[0]
    b = m @ m
    # Fixed internal seed: the start vector must not be a crafted input, and a
    # constant vector would sit in the kernel of centered/stochastic matrices.
    rng = np.random.default_rng(0x7A57)
    v = rng.normal(size=n)
    v /= np.linalg.norm(v)
    lam_prev = np.inf
    lam = 0.0
    for it in range(POWER_MAX_ITERATIONS):
        w = b @ v
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        v = w / nw
        lam = float(v @ (b @ v))
        if abs(lam - lam_prev) <= POWER_TOLERANCE * max(1.0, abs(lam)):
            break
        if (it + 1) % _RESTART_PERIOD == 0:
            v = v + rng.normal(scale=0.1, size=n)
            v /= np.linalg.norm(v)
            lam_prev = np.inf
        else:
            lam_prev = lam
    return float(np.sqrt(max(lam, 0.0)))


def spectral_norm(a) -> float:
    """Largest singular value of a general matrix, via the Gram-matrix route."""
    m = as_matrix(a, "matrix")
    if m.size == 0:
        raise ValueError("empty matrix")
    g = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
    return float(np.sqrt(max(spectral_norm_sym(g), 0.0)))


def pca_top_k(x, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` principal components of row-sample data ``x`` (n_samples x n_features).

    Centers the data (no variance scaling), eigendecomposes the sample
    covariance, and returns ``(components, projections)`` where ``components``
    is k x n_features with orthonormal rows ordered by decreasing eigenvalue
    and ``projections`` is n_samples x k. Sign convention: each component's
    largest-magnitude entry is positive, which makes the decomposition
    deterministic. Zero-variance data raises ``ValueError('degenerate
    covariance')``.
    """
    xm = as_matrix(x, "data")
    n, f = xm.shape
    if n < 2:
        raise ValueError("need at least 2 samples")
    if not 1 <= k <= min(n, f):
        raise ValueError(f"k={k} out of range for {n}x{f} data")
    centered = xm - xm.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    total_var = float(np.trace(cov))
    scale = max(1.0, float(np.abs(xm).max()))
    if total_var <= (1e-12 * scale) ** 2:
        raise ValueError("degenerate covariance")
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    components = evecs[:, order].T.copy()
    for i in range(k):
        j = int(np.argmax(np.abs(components[i])))
        if components[i, j] < 0:
            components[i] = -components[i]
    projections = centered @ components.T
    return components, projections


def sample_gaussian(shape, seed: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Seeded N(mean, std^2) draws of the given shape.

    A fresh PCG64 generator is built from ``seed`` on every call; the caller
    owns the seed and equal seeds yield bit-identical arrays.
    """
    if std < 0:
        raise ValueError("std must be nonnegative")
    rng = np.random.default_rng(seed)
    return rng.normal(loc=mean, scale=std, size=shape)
