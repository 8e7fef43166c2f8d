"""Second trigger level: point-lens model fitting and event acceptance.

The light-curve model is the point-source point-lens curve

    F(t) = f_base + f_source * (A(u) - 1),
    u(t) = sqrt(u0**2 + ((t - t0) / tE)**2),
    A(u) = (u**2 + 2) / (u * sqrt(u**2 + 4)).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InsufficientData, InsufficientOverlap
from .trigger1 import LightCurve, Peak, curve_baseline

N_PARAMS = 5
PARAM_NAMES = ("u0", "t0", "tE", "f_source", "f_base")

U0_BOUNDS = (1e-3, 10.0)
U0_INIT_BOUNDS = (0.05, 3.0)
TE_MIN = 0.01


@dataclass(frozen=True)
class LensModelParams:
    u0: float
    t0: float
    tE: float
    f_source: float
    f_base: float

    def __post_init__(self):
        if not self.u0 > 0:
            raise ValueError("u0 must be > 0")
        if not self.tE > 0:
            raise ValueError("tE must be > 0")
        if self.f_source < 0:
            raise ValueError("f_source must be >= 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.u0, self.t0, self.tE, self.f_source, self.f_base], dtype=float)

    @classmethod
    def from_array(cls, theta) -> "LensModelParams":
        return cls(*(float(v) for v in theta))


@dataclass
class FitResult:
    params: LensModelParams
    chi2: float
    dof: int
    covariance: Optional[np.ndarray]
    iterations: int
    converged: bool
    delta_chi2_vs_constant: float
    chi2_init: float = float("nan")

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else float("inf")


@dataclass(frozen=True)
class Trigger2Config:
    max_reduced_chi2: float = 2.0
    min_delta_chi2: float = 25.0
    color_threshold: float = 0.7
    use_color: bool = True
    max_iterations: int = 200


@dataclass(frozen=True)
class RuleOutcome:
    passed: bool
    reasons: tuple[str, ...] = ()


@dataclass(frozen=True)
class ColorResult:
    correlation: float
    passed: bool
    n_common: int


@dataclass(frozen=True)
class EventDecision:
    accepted: bool
    reasons: tuple[str, ...] = field(default_factory=tuple)


# ---------------------------------------------------------------------------
# Model


def amplification(u):
    u = np.asarray(u, dtype=float)
    u2 = u * u
    return (u2 + 2.0) / (u * np.sqrt(u2 + 4.0))


def amplification_inverse(a):
    """Impact parameter with magnification ``a`` (``a > 1``)."""
    a = np.asarray(a, dtype=float)
    return np.sqrt(2.0 * (a / np.sqrt(a * a - 1.0) - 1.0))


def _separation(t, u0, t0, tE):
    tau = (np.asarray(t, dtype=float) - t0) / tE
    return tau, np.sqrt(u0 * u0 + tau * tau)


def model_flux(t, p: LensModelParams):
    _, u = _separation(t, p.u0, p.t0, p.tE)
    return p.f_base + p.f_source * (amplification(u) - 1.0)


def _model_theta(t, theta):
    u0, t0, tE, fs, fb = theta
    _, u = _separation(t, u0, t0, tE)
    return fb + fs * (amplification(u) - 1.0)


def model_jacobian(t, theta) -> np.ndarray:
    """Analytic dF/d(u0, t0, tE, f_source, f_base), shape (len(t), 5)."""
    u0, t0, tE, fs, fb = theta
    tau, u = _separation(t, u0, t0, tE)
    u2 = u * u
    a = (u2 + 2.0) / (u * np.sqrt(u2 + 4.0))
    da_du = -8.0 / (u2 * (u2 + 4.0) ** 1.5)
    k = fs * da_du / u
    jac = np.empty((len(tau), N_PARAMS))
    jac[:, 0] = k * u0
    jac[:, 1] = -k * tau / tE
    jac[:, 2] = -k * tau * tau / tE
    jac[:, 3] = a - 1.0
    jac[:, 4] = 1.0
    return jac


# ---------------------------------------------------------------------------
# Fitting


def _project(theta, span):
    theta = theta.copy()
    theta[0] = min(max(theta[0], U0_BOUNDS[0]), U0_BOUNDS[1])
    theta[2] = min(max(theta[2], TE_MIN), max(10.0 * span, TE_MIN))
    theta[3] = max(theta[3], 0.0)
    return theta


def _chi2(t, y, w, theta):
    r = (y - _model_theta(t, theta)) * w
    return float(r @ r)


def constant_chi2(flux, error) -> float:
    w = 1.0 / error**2
    mean = float(np.sum(w * flux) / np.sum(w))
    return float(np.sum(((flux - mean) / error) ** 2))


def lm_fit(curve: LightCurve, init: LensModelParams, max_iterations: int = 200) -> FitResult:
    """Levenberg-Marquardt fit of the point-lens model to the valid samples.

    Damping starts at 1e-3 and moves by factors of ten; the damped normal
    equations ``(J^T J + lam * diag(J^T J)) d = J^T r`` are solved by Cholesky.
    """
    sel = curve.valid
    n = int(sel.sum())
    if n < N_PARAMS + 1:
        raise InsufficientData(f"{n} valid samples; need at least {N_PARAMS + 1}")
    t = curve.times[sel]
    y = curve.flux[sel]
    err = curve.error[sel]
    w = 1.0 / err
    span = float(curve.times[-1] - curve.times[0]) or 1.0

    theta = _project(init.as_array(), span)
    chi2 = _chi2(t, y, w, theta)
    chi2_init = chi2
    lam = 1e-3
    converged = False
    iterations = 0

    for iterations in range(1, max_iterations + 1):
        jac = model_jacobian(t, theta) * w[:, None]
        r = (y - _model_theta(t, theta)) * w
        normal = jac.T @ jac
        grad = jac.T @ r
        diag = np.diag(normal).copy()
        diag = np.maximum(diag, 1e-12 * max(float(diag.max()), 1e-300))

        step = None
        try:
            chol = np.linalg.cholesky(normal + lam * np.diag(diag))
            step = np.linalg.solve(chol.T, np.linalg.solve(chol, grad))
        except np.linalg.LinAlgError:
            pass

        if step is None or not np.all(np.isfinite(step)):
            lam *= 10.0
            if lam > 1e20:
                break
            continue

        trial = _project(theta + step, span)
        moved = trial - theta
        step_norm = float(np.max(np.abs(moved) / (np.abs(theta) + 1e-12)))
        trial_chi2 = _chi2(t, y, w, trial)

        if trial_chi2 < chi2:
            rel = (chi2 - trial_chi2) / max(chi2, 1e-300)
            theta, chi2 = trial, trial_chi2
            lam = max(lam / 10.0, 1e-15)
            if rel < 1e-10 or step_norm < 1e-8 or chi2 < 1e-28:
                converged = True
                break
        else:
            if step_norm < 1e-8 or chi2 < 1e-28:
                converged = True
                break
            lam *= 10.0
            if lam > 1e20:
                break

    covariance = None
    jac = model_jacobian(t, theta) * w[:, None]
    try:
        covariance = np.linalg.inv(jac.T @ jac)
        if not np.all(np.isfinite(covariance)):
            raise np.linalg.LinAlgError("non-finite covariance")
        covariance = 0.5 * (covariance + covariance.T)
    except np.linalg.LinAlgError:
        covariance = None
        converged = False

    return FitResult(
        params=LensModelParams.from_array(theta),
        chi2=chi2,
        dof=n - N_PARAMS,
        covariance=covariance,
        iterations=iterations,
        converged=converged,
        delta_chi2_vs_constant=constant_chi2(y, err) - chi2,
        chi2_init=chi2_init,
    )


def initial_guess(curve: LightCurve, peak: Peak) -> LensModelParams:
    times = curve.times
    base, _ = curve_baseline(curve)
    spacing = float(np.median(np.diff(times))) if len(times) > 1 else 1.0
    duration = float(times[peak.end_index] - times[peak.start_index]) + spacing
    tE = max(duration / 2.0, 2.0 * spacing)
    excess = float(curve.flux[peak.apex_index] - base)
    f_source = max(excess, 1e-6)
    u0 = float(amplification_inverse(1.0 + excess / f_source)) if excess > 0 else U0_INIT_BOUNDS[1]
    u0 = min(max(u0, U0_INIT_BOUNDS[0]), U0_INIT_BOUNDS[1])
    return LensModelParams(u0, float(times[peak.apex_index]), tE, f_source, base)


# ---------------------------------------------------------------------------
# Acceptance rules


def chi2_test(fit: FitResult, max_reduced_chi2: float = 2.0, min_delta_chi2: float = 25.0) -> RuleOutcome:
    if fit.dof < 1:
        raise ValueError("chi2 test needs at least one degree of freedom")
    reasons = []
    if not fit.converged:
        reasons.append("convergence")
    if not fit.reduced_chi2 <= max_reduced_chi2:
        reasons.append("chi2_cut")
    if not fit.delta_chi2_vs_constant >= min_delta_chi2:
        reasons.append("delta_chi2_cut")
    return RuleOutcome(not reasons, tuple(reasons))


def color_correlation(curve_r: LightCurve, curve_b: LightCurve, threshold: float = 0.7) -> ColorResult:
    """Pearson correlation of baseline-subtracted fluxes on shared valid epochs."""
    tr = curve_r.times[curve_r.valid]
    tb = curve_b.times[curve_b.valid]
    common, ir, ib = np.intersect1d(tr, tb, assume_unique=True, return_indices=True)
    if len(common) < 6:
        raise InsufficientOverlap(f"{len(common)} common valid epochs; need 6")
    fr = curve_r.flux[curve_r.valid][ir]
    fb = curve_b.flux[curve_b.valid][ib]
    fr = fr - np.median(fr)
    fb = fb - np.median(fb)
    dr = fr - fr.mean()
    db = fb - fb.mean()
    denom = float(np.sqrt((dr @ dr) * (db @ db)))
    corr = float(dr @ db / denom) if denom > 0 else 0.0
    return ColorResult(corr, corr >= threshold, len(common))


def decide_event(fit: FitResult, color: Optional[ColorResult], config: Trigger2Config = Trigger2Config()) -> EventDecision:
    outcome = chi2_test(fit, config.max_reduced_chi2, config.min_delta_chi2)
    reasons = list(outcome.reasons)
    if config.use_color and color is not None and not color.passed:
        reasons.append("achromaticity")
    return EventDecision(not reasons, tuple(reasons))
