"""Diagnostics on attention distributions: entropy, curvature, sensitivity bounds.

All entropies are in nats. The inverse-temperature parameter alpha multiplies
the logits: p_j(alpha) = exp(alpha z_j) / sum_k exp(alpha z_k), optionally
restricted to an index subset S with renormalization over S only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import KeyPartition
from .numerics import as_matrix, as_vector, softmax_vec, spectral_norm, spectral_norm_sym

ENTROPY_SUM_TOLERANCE = 1e-8
DEFAULT_FD_STEP = 1e-5
# Float slack for bound checks that are exact in real arithmetic.
_BOUND_SLACK = 1e-12


def entropy(p) -> float:
    """Shannon entropy -sum p_j ln p_j in nats, with 0 ln 0 := 0.

    ``p`` must be a distribution: nonnegative entries summing to 1 within
    ``ENTROPY_SUM_TOLERANCE``.
    """
    pv = as_vector(p, "distribution")
    if (pv < 0).any():
        raise ValueError("invalid distribution: negative entry")
    total = float(pv.sum())
    if abs(total - 1.0) > ENTROPY_SUM_TOLERANCE:
        raise ValueError(f"invalid distribution: sum is {total!r}, not 1")
    nz = pv[pv > 0]
    return float(-(nz * np.log(nz)).sum())


def _subset_indices(s, size: int) -> np.ndarray:
    idx = np.asarray(list(s), dtype=np.intp)
    if idx.size == 0:
        raise ValueError("index subset must be nonempty")
    if len(set(idx.tolist())) != idx.size:
        raise ValueError("index subset contains duplicates")
    if (idx < 0).any() or (idx >= size).any():
        raise ValueError(f"index subset out of range 0..{size - 1}")
    return np.sort(idx)


def restricted_softmax(z, s, alpha: float) -> np.ndarray:
    """Softmax of alpha * z renormalized over the subset ``s`` only.

    Returns a distribution over the subset, in ascending index order.
    """
    zv = as_vector(z, "logits")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    idx = _subset_indices(s, zv.size)
    return softmax_vec(alpha * zv[idx])


@dataclass(frozen=True)
class EntropyReport:
    """Entropy of p_S(alpha) with its analytic and finite-difference slopes."""

    alpha: float
    entropy: float
    variance: float
    analytic_derivative: float
    numeric_derivative: float
    abs_gap: float


def entropy_alpha_report(
    z, s, alpha: float, fd_step: float = DEFAULT_FD_STEP
) -> EntropyReport:
    """Compare dH/dalpha = -alpha * Var_{p_S(alpha)}[z_S] with a central difference.

    The analytic slope comes from the moment identity; the numeric slope is
    (H(alpha+h) - H(alpha-h)) / 2h with h = ``fd_step``. Requires
    alpha - fd_step > 0 so both probe points stay in the valid range.
    """
    zv = as_vector(z, "logits")
    if fd_step <= 0:
        raise ValueError(f"fd_step must be positive, got {fd_step}")
    if alpha - fd_step <= 0:
        raise ValueError(f"alpha={alpha} too small for fd_step={fd_step}")
    idx = _subset_indices(s, zv.size)
    zs = zv[idx]
    p = softmax_vec(alpha * zs)
    mean = float(p @ zs)
    variance = float(p @ (zs * zs)) - mean * mean
    analytic = -alpha * variance

    def h_at(a: float) -> float:
        return entropy(softmax_vec(a * zs))

    numeric = (h_at(alpha + fd_step) - h_at(alpha - fd_step)) / (2.0 * fd_step)
    return EntropyReport(
        alpha=alpha,
        entropy=h_at(alpha),
        variance=max(variance, 0.0),
        analytic_derivative=analytic,
        numeric_derivative=numeric,
        abs_gap=abs(analytic - numeric),
    )


def attention_hessian(z, alpha: float) -> np.ndarray:
    """Hessian of the log-partition alpha |-> log sum exp(alpha z): alpha^2 (diag(p) - p p^T).

    Symmetric PSD with zero row sums; p = softmax(alpha z).
    """
    zv = as_vector(z, "logits")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    p = softmax_vec(alpha * zv)
    return alpha * alpha * (np.diag(p) - np.outer(p, p))


@dataclass(frozen=True)
class CurvatureReport:
    """Curvature of the log-partition at alpha and the decay bounds on it.

    ``tail_mass`` is 1 - p_max; ``tail_bound`` is (m-1) exp(-alpha Delta) with
    Delta the top-two logit gap; ``gershgorin_bound`` bounds the unscaled
    curvature matrix diag(p) - p p^T by max_i 2 p_i (1 - p_i), so the Hessian
    norm is at most alpha^2 * gershgorin_bound; ``decay_bound`` is
    2 alpha^2 (m-1) exp(-alpha Delta). With a tied maximum (Delta = 0) the
    gap-based bounds are vacuous and ``gap_applicable`` is False.
    ``violations`` names any bound the computed norm exceeded.
    """

    alpha: float
    spectral_norm: float
    gershgorin_bound: float
    tail_mass: float
    tail_bound: float
    decay_bound: float
    logit_gap: float
    gap_applicable: bool
    violations: tuple[str, ...]


def curvature_report(z, alpha: float) -> CurvatureReport:
    zv = as_vector(z, "logits")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    m = zv.size
    p = softmax_vec(alpha * zv)
    j_star = int(np.argmax(zv))
    if m == 1:
        delta = 0.0
        gap_applicable = True  # bounds are exactly 0 and hold trivially
    else:
        top_two = np.sort(zv)[-2:]
        delta = float(top_two[1] - top_two[0])
        gap_applicable = delta > 0.0
    tail_mass = float(1.0 - p[j_star])
    tail_bound = (m - 1) * math.exp(-alpha * delta)
    gersh = float((2.0 * p * (1.0 - p)).max())
    decay_bound = 2.0 * alpha * alpha * tail_bound
    norm = spectral_norm_sym(attention_hessian(zv, alpha))

    violations = []
    slack = _BOUND_SLACK * max(1.0, alpha * alpha)
    if norm > alpha * alpha * gersh + slack:
        violations.append("gershgorin")
    if gap_applicable:
        if tail_mass > tail_bound + _BOUND_SLACK:
            violations.append("tail")
        if norm > decay_bound + slack:
            violations.append("decay")
    return CurvatureReport(
        alpha=alpha,
        spectral_norm=norm,
        gershgorin_bound=gersh,
        tail_mass=tail_mass,
        tail_bound=tail_bound,
        decay_bound=decay_bound,
        logit_gap=delta,
        gap_applicable=gap_applicable,
        violations=tuple(violations),
    )


@dataclass(frozen=True)
class LipschitzReport:
    """Output deviation of y(alpha) = V^T p(alpha) against the analytic bound."""

    alpha1: float
    alpha2: float
    deviation: float
    bound: float
    margin: float


def lipschitz_report(z, v, alpha1: float, alpha2: float) -> LipschitzReport:
    """Check ||y(alpha1) - y(alpha2)|| <= (1/2) ||V||_2 ||z||_2 |alpha1 - alpha2|.

    The map alpha |-> softmax(alpha z) has Jacobian norm at most ||z|| / 2, so
    the bound holds for every logit vector and value matrix; ``margin`` is
    bound minus deviation and is nonnegative up to float rounding.
    """
    zv = as_vector(z, "logits")
    vm = as_matrix(v, "V")
    if vm.shape[0] != zv.size:
        raise ValueError(f"V rows ({vm.shape[0]}) != logit length ({zv.size})")
    for name, a in (("alpha1", alpha1), ("alpha2", alpha2)):
        if a <= 0:
            raise ValueError(f"{name} must be positive, got {a}")
    y1 = vm.T @ softmax_vec(alpha1 * zv)
    y2 = vm.T @ softmax_vec(alpha2 * zv)
    deviation = float(np.linalg.norm(y1 - y2))
    bound = (
        0.5
        * spectral_norm(vm)
        * float(np.linalg.norm(zv))
        * abs(alpha1 - alpha2)
    )
    return LipschitzReport(
        alpha1=alpha1,
        alpha2=alpha2,
        deviation=deviation,
        bound=bound,
        margin=bound - deviation,
    )


@dataclass(frozen=True)
class GroupMassReport:
    """Attention mass per key group plus the conditioning-block entropy.

    ``entropy_cond`` is the entropy of p restricted to text+image indices and
    renormalized; NaN flags a degenerate case (empty conditioning set or zero
    conditioning mass) rather than raising.
    """

    mass_text: float
    mass_image: float
    mass_video: float
    entropy_cond: float


def group_mass_report(p, partition: KeyPartition) -> GroupMassReport:
    pv = as_vector(p, "distribution")
    if pv.size != partition.size:
        raise ValueError(
            f"distribution length {pv.size} != partition size {partition.size}"
        )
    if (pv < 0).any():
        raise ValueError("invalid distribution: negative entry")

    def mass(idx) -> float:
        return float(pv[list(idx)].sum()) if idx else 0.0

    cond = partition.conditioning
    cond_mass = mass(cond)
    if not cond or cond_mass <= 0.0:
        h_cond = math.nan
    else:
        h_cond = entropy(pv[list(cond)] / cond_mass)
    return GroupMassReport(
        mass_text=mass(partition.text),
        mass_image=mass(partition.image),
        mass_video=mass(partition.video),
        entropy_cond=h_cond,
    )


def flops_overhead(
    scaled_blocks: int, total_blocks: int, scaled_steps: int, total_steps: int
) -> float:
    """Overhead fraction (L_s / L) * (T_s / T) of the product schedule."""
    if total_blocks < 1 or total_steps < 1:
        raise ValueError("totals must be >= 1")
    if not 0 <= scaled_blocks <= total_blocks:
        raise ValueError(f"scaled_blocks {scaled_blocks} out of range 0..{total_blocks}")
    if not 0 <= scaled_steps <= total_steps:
        raise ValueError(f"scaled_steps {scaled_steps} out of range 0..{total_steps}")
    return (scaled_blocks / total_blocks) * (scaled_steps / total_steps)
