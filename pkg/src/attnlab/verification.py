"""Seeded verification suites: each draws random cases and checks a certified bound.

Five suites cover the machinery end to end:

- scale-equivalence: scaling Q, scaling K, and tempering the logits give the
  same attention probabilities (pairwise within 1e-12);
- entropy-slope: dH/dalpha = -alpha Var matches a central difference and
  entropy never increases with alpha;
- curvature: tail-mass and spectral-norm decay bounds hold, the Hessian is
  PSD, the decay envelope is nonincreasing past 2/Delta, and the norm at
  alpha = 50/Delta is below 1e-6;
- lipschitz: the output-deviation bound has nonnegative margin;
- deviation: the single-step state deviation bound holds on probed toy
  denoisers.

A suite returns per-draw rows for the CSV report plus a violation count; the
first failing row is described in ``detail``. ``inject_bug=True`` flips the
sign of the first row's margin column after the fact — a harness self-test
proving the violation path is live.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analysis import (
    attention_hessian,
    curvature_report,
    entropy,
    entropy_alpha_report,
    lipschitz_report,
)
from .attention import attention_forward, scaled_logits
from .numerics import row_softmax, softmax_vec
from .simulate import StepCoefficients, deviation_bound_check, make_toy_denoiser

SUITE_NAMES = (
    "scale-equivalence",
    "entropy-slope",
    "curvature",
    "lipschitz",
    "deviation",
)

PAIRWISE_TOLERANCE = 1e-12
SLOPE_TOLERANCE = 1e-5
MONOTONE_SLACK = 1e-12
PSD_SLACK = 1e-10
COLLAPSE_NORM_LIMIT = 1e-6
MIN_LOGIT_GAP = 1e-3


@dataclass
class SuiteResult:
    name: str
    columns: tuple[str, ...]
    rows: list[dict]
    violations: int
    detail: str | None = None

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _draw_gapped_logits(rng: np.random.Generator, m: int) -> np.ndarray:
    """Logits with a top-two gap of at least MIN_LOGIT_GAP (unique maximum).

    Tiny gaps make the decay bounds vacuous at representable alpha, so draws
    below the floor are rejected and redrawn.
    """
    while True:
        z = rng.uniform(-10.0, 10.0, size=m)
        if m == 1:
            return z
        top = np.sort(z)[-2:]
        if top[1] - top[0] >= MIN_LOGIT_GAP:
            return z


def scale_equivalence_suite(seed: int = 0, draws: int = 1000) -> SuiteResult:
    rng = np.random.default_rng(seed)
    rows = []
    violations = 0
    detail = None
    for i in range(draws):
        n = int(rng.integers(1, 17))
        m = int(rng.integers(1, 17))
        d = int(rng.integers(1, 9))
        gamma = float(rng.uniform(0.5, 3.0))
        q = rng.normal(size=(n, d))
        k = rng.normal(size=(m, d))
        v = rng.normal(size=(m, d))
        p_q = attention_forward(gamma * q, k, v).probabilities
        p_k = attention_forward(q, gamma * k, v).probabilities
        p_t = row_softmax(gamma * scaled_logits(q, k))
        max_diff = max(
            float(np.abs(p_q - p_k).max()),
            float(np.abs(p_q - p_t).max()),
            float(np.abs(p_k - p_t).max()),
        )
        margin = PAIRWISE_TOLERANCE - max_diff
        if margin < 0 and detail is None:
            detail = f"draw {i}: pairwise diff {max_diff:.3e} exceeds {PAIRWISE_TOLERANCE}"
        violations += margin < 0
        rows.append(
            {
                "draw": i,
                "n": n,
                "m": m,
                "d": d,
                "gamma": gamma,
                "max_diff": max_diff,
                "margin": margin,
            }
        )
    return SuiteResult(
        name="scale-equivalence",
        columns=("draw", "n", "m", "d", "gamma", "max_diff", "margin"),
        rows=rows,
        violations=violations,
        detail=detail,
    )


def entropy_slope_suite(seed: int = 0, draws: int = 1000) -> SuiteResult:
    rng = np.random.default_rng(seed)
    rows = []
    violations = 0
    detail = None
    for i in range(draws):
        m = int(rng.integers(2, 17))
        z = rng.uniform(-10.0, 10.0, size=m)
        alpha = float(rng.uniform(0.1, 10.0))
        if rng.random() < 0.5:
            subset = tuple(range(m))
        else:
            size = int(rng.integers(1, m + 1))
            subset = tuple(sorted(rng.choice(m, size=size, replace=False).tolist()))
        rep = entropy_alpha_report(z, subset, alpha)
        alpha2 = alpha + float(rng.uniform(0.1, 2.0))
        h2 = entropy(softmax_vec(alpha2 * z[list(subset)]))
        monotone_ok = h2 <= rep.entropy + MONOTONE_SLACK
        slope_ok = rep.abs_gap < SLOPE_TOLERANCE
        bad = not (monotone_ok and slope_ok)
        if bad and detail is None:
            detail = (
                f"draw {i}: slope gap {rep.abs_gap:.3e}, "
                f"H({alpha2:.3f})={h2:.6f} vs H({alpha:.3f})={rep.entropy:.6f}"
            )
        violations += bad
        rows.append(
            {
                "draw": i,
                "m": m,
                "subset_size": len(subset),
                "alpha": alpha,
                "entropy": rep.entropy,
                "variance": rep.variance,
                "slope_gap": rep.abs_gap,
                "margin": SLOPE_TOLERANCE - rep.abs_gap,
                "monotone_ok": int(monotone_ok),
            }
        )
    return SuiteResult(
        name="entropy-slope",
        columns=(
            "draw",
            "m",
            "subset_size",
            "alpha",
            "entropy",
            "variance",
            "slope_gap",
            "margin",
            "monotone_ok",
        ),
        rows=rows,
        violations=violations,
        detail=detail,
    )


def curvature_suite(seed: int = 0, draws: int = 1000) -> SuiteResult:
    rng = np.random.default_rng(seed)
    rows = []
    violations = 0
    detail = None
    for i in range(draws):
        m = int(rng.integers(2, 17))
        z = _draw_gapped_logits(rng, m)
        alpha = float(rng.uniform(0.1, 10.0))
        rep = curvature_report(z, alpha)
        eigs = np.linalg.eigvalsh(attention_hessian(z, alpha))
        psd_ok = float(eigs.min()) >= -PSD_SLACK
        delta = rep.logit_gap
        grid = np.linspace(2.0 / delta, 50.0 / delta, 25)
        envelope = 2.0 * grid**2 * (m - 1) * np.exp(-grid * delta)
        env_ok = bool(np.all(np.diff(envelope) <= MONOTONE_SLACK * max(1.0, envelope[0])))
        collapse_norm = float(
            np.abs(np.linalg.eigvalsh(attention_hessian(z, 50.0 / delta))).max()
        )
        collapse_ok = collapse_norm < COLLAPSE_NORM_LIMIT
        bad = bool(rep.violations) or not (psd_ok and env_ok and collapse_ok)
        if bad and detail is None:
            detail = (
                f"draw {i}: bound violations {rep.violations}, psd_ok={psd_ok}, "
                f"env_ok={env_ok}, norm at 50/gap = {collapse_norm:.3e}"
            )
        violations += bad
        rows.append(
            {
                "draw": i,
                "m": m,
                "alpha": alpha,
                "logit_gap": delta,
                "spectral_norm": rep.spectral_norm,
                "decay_bound": rep.decay_bound,
                "tail_mass": rep.tail_mass,
                "tail_bound": rep.tail_bound,
                "gershgorin_bound": rep.gershgorin_bound,
                "margin": rep.decay_bound - rep.spectral_norm,
                "collapse_norm": collapse_norm,
                "psd_ok": int(psd_ok),
                "envelope_ok": int(env_ok),
            }
        )
    return SuiteResult(
        name="curvature",
        columns=(
            "draw",
            "m",
            "alpha",
            "logit_gap",
            "spectral_norm",
            "decay_bound",
            "tail_mass",
            "tail_bound",
            "gershgorin_bound",
            "margin",
            "collapse_norm",
            "psd_ok",
            "envelope_ok",
        ),
        rows=rows,
        violations=violations,
        detail=detail,
    )


def lipschitz_suite(seed: int = 0, draws: int = 1000) -> SuiteResult:
    rng = np.random.default_rng(seed)
    rows = []
    violations = 0
    detail = None
    for i in range(draws):
        m = int(rng.integers(2, 17))
        d_v = int(rng.integers(1, 9))
        z = rng.normal(0.0, 2.0, size=m)
        v = rng.normal(size=(m, d_v))
        alpha1 = float(rng.uniform(0.5, 3.0))
        alpha2 = float(rng.uniform(0.5, 3.0))
        rep = lipschitz_report(z, v, alpha1, alpha2)
        bad = rep.margin < 0
        if bad and detail is None:
            detail = f"draw {i}: deviation {rep.deviation:.6e} exceeds bound {rep.bound:.6e}"
        violations += bad
        rows.append(
            {
                "draw": i,
                "m": m,
                "d_v": d_v,
                "alpha1": alpha1,
                "alpha2": alpha2,
                "deviation": rep.deviation,
                "bound": rep.bound,
                "margin": rep.margin,
            }
        )
    return SuiteResult(
        name="lipschitz",
        columns=("draw", "m", "d_v", "alpha1", "alpha2", "deviation", "bound", "margin"),
        rows=rows,
        violations=violations,
        detail=detail,
    )


DEVIATION_ALPHA_GRID = (1.15, 1.25, 1.35)


def deviation_suite(seed: int = 0, probes: int = 120) -> SuiteResult:
    """Half the probes use the sweep grid alphas, half continuous [0.5, 3]."""
    rows = []
    violations = 0
    detail = None
    total_steps = 8
    coeffs = StepCoefficients.linear(total_steps)
    for i in range(probes):
        rng = np.random.default_rng([seed, i])
        n_video = int(rng.integers(3, 9))
        den = make_toy_denoiser(
            seed=int(rng.integers(2**32)),
            num_blocks=int(rng.integers(1, 4)),
            n_text=int(rng.integers(2, 5)),
            n_image=int(rng.integers(2, 6)),
            n_video=n_video,
            d_k=int(rng.integers(4, 9)),
            d_v=int(rng.integers(3, 7)),
        )
        t = int(rng.integers(1, total_steps + 1))
        x = rng.normal(size=(n_video, den.d_model))
        if i < probes // 2:
            alpha = DEVIATION_ALPHA_GRID[i % len(DEVIATION_ALPHA_GRID)]
        else:
            alpha = float(rng.uniform(0.5, 3.0))
        query = int(rng.integers(0, n_video))
        rep = deviation_bound_check(den, coeffs, t, x, alpha, query=query)
        bad = rep.margin < 0
        if bad and detail is None:
            detail = f"probe {i}: deviation {rep.deviation:.6e} exceeds bound {rep.bound:.6e}"
        violations += bad
        rows.append(
            {
                "probe": i,
                "alpha": alpha,
                "t": t,
                "b_t": rep.b_t,
                "deviation": rep.deviation,
                "bound": rep.bound,
                "margin": rep.margin,
                "lipschitz_upper": rep.lipschitz_upper,
            }
        )
    return SuiteResult(
        name="deviation",
        columns=(
            "probe",
            "alpha",
            "t",
            "b_t",
            "deviation",
            "bound",
            "margin",
            "lipschitz_upper",
        ),
        rows=rows,
        violations=violations,
        detail=detail,
    )


_SUITE_FUNCS = {
    "scale-equivalence": scale_equivalence_suite,
    "entropy-slope": entropy_slope_suite,
    "curvature": curvature_suite,
    "lipschitz": lipschitz_suite,
    "deviation": deviation_suite,
}


def run_suite(
    name: str, seed: int = 0, draws: int = 1000, probes: int = 120, inject_bug: bool = False
) -> SuiteResult:
    if name not in _SUITE_FUNCS:
        raise ValueError(f"unknown suite {name!r}; valid: {sorted(_SUITE_FUNCS)}")
    if name == "deviation":
        result = deviation_suite(seed=seed, probes=probes)
    else:
        result = _SUITE_FUNCS[name](seed=seed, draws=draws)
    if inject_bug and result.rows:
        first = result.rows[0]
        if "margin" in first:
            first["margin"] = -abs(first["margin"]) - 1.0
        result.violations += 1
        result.detail = "injected-bug hook: flipped the sign of row 0's margin"
    return result


def run_suites(
    names, seed: int = 0, draws: int = 1000, probes: int = 120, inject_bug: bool = False
) -> list[SuiteResult]:
    results = []
    for idx, name in enumerate(names):
        # Only the first suite gets the injected bug; one violation suffices.
        results.append(
            run_suite(
                name,
                seed=seed,
                draws=draws,
                probes=probes,
                inject_bug=inject_bug and idx == 0,
            )
        )
    return results
