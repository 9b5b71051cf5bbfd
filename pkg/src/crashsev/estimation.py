"""Maximum simulated likelihood estimation and the inference around it."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .data import Dataset
from .halton import DrawMatrix, build_draws
from .likelihood import LikelihoodError, SimulatedLikelihood, null_log_likelihood
from .modelspec import ModelSpec, SpecError, parameter_layout, start_point, validate_spec

logger = logging.getLogger(__name__)

RETENTION_T = 1.645  # 90% two-tailed, normal approximation
ROUNDING = 64 * np.finfo(float).eps  # relative resolution of a summed log-likelihood
COVARIANCE_METHODS = ("numerical_hessian", "bhhh")


class EstimationError(RuntimeError):
    pass


class CovarianceError(np.linalg.LinAlgError):
    def __init__(self, message: str, eigenvalue: float | None = None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


@dataclass(frozen=True)
class EstimationOptions:
    n_draws: int = 500
    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    step_tolerance: float = 1e-10
    covariance_method: str = "numerical_hessian"
    skip: int = 100

    def __post_init__(self):
        if self.n_draws < 1 or self.max_iterations < 1:
            raise ValueError("n_draws and max_iterations must be positive")
        if self.gradient_tolerance <= 0 or self.step_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.skip < 0:
            raise ValueError("skip must be >= 0")
        if self.covariance_method not in COVARIANCE_METHODS:
            raise ValueError(f"covariance_method must be one of {COVARIANCE_METHODS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EstimationOptions":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown estimation options: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    converged: bool
    reason: str
    trace: list = field(default_factory=list)


def bfgs_maximize(fun_grad: Callable[[np.ndarray], tuple[float, np.ndarray]], x0,
                  max_iterations: int = 500, gradient_tolerance: float = 1e-6,
                  step_tolerance: float = 1e-10, armijo: float = 1e-4, shrink: float = 0.5,
                  ) -> OptimizeResult:
    """Maximize ``fun`` with BFGS and backtracking (Armijo) line search.

    ``fun_grad`` returns the objective and its gradient.  Evaluations raising
    ``FloatingPointError`` (or returning non-finite values) count as failed
    trial points.  Stops on ``max|grad| < gradient_tolerance``, on a step
    shorter than ``step_tolerance``, or at the iteration cap.

    Accepted steps never lower the objective.  Near the optimum the objective
    stops resolving progress, so a step may also be accepted when ``f`` moves by
    no more than rounding, the gradient shrinks, and the slope along the search
    direction still points uphill (the exact objective rose).
    """
    x = np.array(x0, dtype=float)
    f, g = fun_grad(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise EstimationError("objective is not finite at the start point")
    # minimize the negative internally
    f, g = -f, -np.asarray(g, dtype=float)
    n = x.size
    H = np.eye(n)
    trace = [(0, -f, float(np.max(np.abs(g))), 0.0)]
    reason = "iteration limit"
    it = 0
    for it in range(1, max_iterations + 1):
        gnorm = float(np.max(np.abs(g)))
        if gnorm < gradient_tolerance:
            it -= 1
            reason = "gradient tolerance"
            break
        if not float(g @ (H @ g)) > 0:
            H = np.eye(n)
        accepted = _line_search(fun_grad, x, f, g, H, gnorm, it == 1, step_tolerance, armijo, shrink)
        if accepted is None:
            reason = "line search stalled"
            it -= 1
            break
        alpha, x_new, f_new, g_new = accepted
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            if it == 1:
                H = np.eye(n) * (sy / float(y @ y))
            rho = 1.0 / sy
            Hy = H @ y
            H = (H - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                 + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s))
        x, f, g = x_new, f_new, g_new
        step = float(np.max(np.abs(s)))
        trace.append((it, -f, float(np.max(np.abs(g))), step))
        logger.debug("iter %d  ll=%.6f  |g|=%.3e  step=%.3e", it, -f, trace[-1][2], step)
        if float(np.max(np.abs(g))) < gradient_tolerance:
            reason = "gradient tolerance"
            break
        if step < step_tolerance:
            reason = "step tolerance"
            break
    converged = float(np.max(np.abs(g))) < gradient_tolerance
    return OptimizeResult(x, -f, -g, it, converged, reason, trace)


def _line_search(fun_grad, x, f, g, H, gnorm, first, step_tolerance, armijo, shrink):
    """Backtrack along ``-H g``; ``f`` and ``g`` belong to the negated objective."""
    d = -H @ g
    slope = float(g @ d)
    alpha = min(1.0, 1.0 / float(np.max(np.abs(d)))) if first else 1.0
    fallback = None
    while alpha * float(np.max(np.abs(d))) >= step_tolerance:
        x_new = x + alpha * d
        try:
            f_new, g_new = fun_grad(x_new)
            f_new, g_new = -f_new, -np.asarray(g_new, dtype=float)
        except FloatingPointError:
            f_new, g_new = math.inf, None
        if np.isfinite(f_new) and np.all(np.isfinite(g_new)):
            if f_new <= f + armijo * alpha * slope:
                return alpha, x_new, f_new, g_new
            # at the rounding floor the sufficient-decrease test cannot pass;
            # keep a point that shrinks the gradient without worsening f beyond
            # rounding, and that has not passed the minimum along d
            if (fallback is None and f_new <= f + ROUNDING * max(1.0, abs(f))
                    and float(g_new @ d) <= 0.0 and np.max(np.abs(g_new)) < gnorm):
                fallback = (alpha, x_new, f_new, g_new)
        alpha *= shrink
    return fallback


# --------------------------------------------------------------------------
# covariance and test statistics


def hessian_steps(theta) -> np.ndarray:
    return np.maximum(1e-4, 1e-4 * np.abs(np.asarray(theta, dtype=float)))


def numerical_hessian(grad: Callable[[np.ndarray], np.ndarray], theta) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrised."""
    theta = np.asarray(theta, dtype=float)
    h = hessian_steps(theta)
    H = np.empty((theta.size, theta.size))
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h[k]
        H[:, k] = (np.asarray(grad(theta + e)) - np.asarray(grad(theta - e))) / (2.0 * h[k])
    return 0.5 * (H + H.T)


def covariance_from_hessian(hessian) -> np.ndarray:
    """Inverse of the negative Hessian of a log-likelihood at its maximum."""
    info = -np.asarray(hessian, dtype=float)
    return _inverse_pd(info, "negative Hessian")


def covariance_from_scores(scores) -> np.ndarray:
    """BHHH: inverse of the summed outer products of per-observation scores."""
    scores = np.asarray(scores, dtype=float)
    return _inverse_pd(scores.T @ scores, "outer product of scores")


def _inverse_pd(info: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(info)):
        raise CovarianceError(f"{what} has non-finite entries")
    eig = np.linalg.eigvalsh(info)
    tol = max(float(np.max(np.abs(eig))), 1.0) * 1e-12
    if eig[0] <= tol:
        raise CovarianceError(f"{what} is not positive definite (eigenvalue {eig[0]:.6g})",
                              float(eig[0]))
    cov = np.linalg.inv(info)
    return 0.5 * (cov + cov.T)


def compute_covariance(spec: ModelSpec, theta_hat, dataset: Dataset,
                       draws: DrawMatrix | None = None, method: str = "numerical_hessian",
                       likelihood: SimulatedLikelihood | None = None) -> np.ndarray:
    lik = likelihood or SimulatedLikelihood(spec, dataset, draws)
    if method == "numerical_hessian":
        return covariance_from_hessian(numerical_hessian(lik.score, theta_hat))
    if method == "bhhh":
        return covariance_from_scores(lik.scores(theta_hat)[1])
    raise ValueError(f"unknown covariance method {method!r}")


def pseudo_r2(ll_zero: float, ll_converged: float) -> float:
    if ll_zero == 0:
        raise ValueError("log-likelihood at zero must be non-zero")
    return 1.0 - ll_converged / ll_zero


@dataclass(frozen=True)
class WaldStats:
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    retained: np.ndarray


def wald_stats(theta_hat, covariance, threshold: float = RETENTION_T) -> WaldStats:
    """Standard errors, t-ratios and two-sided normal p-values.

    A zero standard error leaves ``t`` and ``p`` as NaN.
    """
    theta = np.asarray(theta_hat, dtype=float)
    var = np.diag(np.asarray(covariance, dtype=float))
    if np.any(var < 0):
        raise ValueError("covariance has a negative diagonal entry")
    se = np.sqrt(var)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, theta / se, np.nan)
    p = np.where(np.isnan(t), np.nan, 2.0 * ndtr(-np.abs(np.nan_to_num(t))))
    retained = np.abs(np.nan_to_num(t)) >= threshold
    return WaldStats(se, t, p, retained)


# --------------------------------------------------------------------------
# result


def _floats(a) -> list:
    return [None if not math.isfinite(v) else float(v) for v in np.asarray(a, dtype=float).ravel()]


def _array(values, shape=None) -> np.ndarray:
    arr = np.array([np.nan if v is None else v for v in values], dtype=float)
    return arr.reshape(shape) if shape is not None else arr


@dataclass
class EstimationResult:
    spec: ModelSpec
    stratum: str
    names: tuple[str, ...]
    theta_hat: np.ndarray
    covariance: np.ndarray
    std_errors: np.ndarray
    t_stats: np.ndarray
    p_values: np.ndarray
    n_obs: int
    ll_zero: float
    ll_start: float
    ll_converged: float
    rho_squared: float
    iterations: int
    converged: bool
    stop_reason: str
    gradient_norm: float
    covariance_method: str
    options: EstimationOptions
    fingerprint: str
    trace: list = field(default_factory=list)

    @property
    def n_params(self) -> int:
        return len(self.names)

    def param(self, name: str) -> float:
        return float(self.theta_hat[self.names.index(name)])

    def to_dict(self) -> dict:
        return {
            "stratum": self.stratum,
            "spec": self.spec.to_dict(),
            "names": list(self.names),
            "theta_hat": _floats(self.theta_hat),
            "covariance": [_floats(row) for row in self.covariance],
            "std_errors": _floats(self.std_errors),
            "t_stats": _floats(self.t_stats),
            "p_values": _floats(self.p_values),
            "n_obs": self.n_obs,
            "ll_zero": self.ll_zero,
            "ll_start": self.ll_start,
            "ll_converged": self.ll_converged,
            "rho_squared": self.rho_squared,
            "iterations": self.iterations,
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "gradient_norm": self.gradient_norm,
            "covariance_method": self.covariance_method,
            "options": self.options.to_dict(),
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EstimationResult":
        k = len(d["names"])
        return cls(
            spec=ModelSpec.from_dict(d["spec"]),
            stratum=d["stratum"],
            names=tuple(d["names"]),
            theta_hat=_array(d["theta_hat"]),
            covariance=_array([v for row in d["covariance"] for v in row], (k, k)),
            std_errors=_array(d["std_errors"]),
            t_stats=_array(d["t_stats"]),
            p_values=_array(d["p_values"]),
            n_obs=d["n_obs"],
            ll_zero=d["ll_zero"],
            ll_start=d["ll_start"],
            ll_converged=d["ll_converged"],
            rho_squared=d["rho_squared"],
            iterations=d["iterations"],
            converged=d["converged"],
            stop_reason=d["stop_reason"],
            gradient_norm=d["gradient_norm"],
            covariance_method=d["covariance_method"],
            options=EstimationOptions.from_dict(d["options"]),
            fingerprint=d["fingerprint"],
        )

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "EstimationResult":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("iteration\tll\tmax_abs_gradient\tstep\n")
            for it, ll, g, step in self.trace:
                fh.write(f"{it}\t{ll!r}\t{g!r}\t{step!r}\n")


def fingerprint(spec: ModelSpec, dataset: Dataset, options: EstimationOptions) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"spec": spec.to_dict(), "options": options.to_dict()},
                        sort_keys=True).encode())
    h.update(np.ascontiguousarray(dataset.X).tobytes())
    h.update(np.ascontiguousarray(dataset.chosen).tobytes())
    return h.hexdigest()[:16]


def draws_for(spec: ModelSpec, n_obs: int, options: EstimationOptions) -> DrawMatrix | None:
    if spec.n_random == 0:
        return None
    return build_draws(n_obs, options.n_draws, spec.n_random, options.skip)


def _positive_spreads(spec: ModelSpec, theta: np.ndarray, cov: np.ndarray | None):
    """Report spreads as |sd|; the likelihood is even in each sd slot."""
    flip = np.ones_like(theta)
    for d, sl in zip(spec.defs, parameter_layout(spec).slices):
        if d.is_random and theta[sl.start + 1] < 0:
            flip[sl.start + 1] = -1.0
    theta = theta * flip
    if cov is not None:
        cov = cov * np.outer(flip, flip)
    return theta, cov


SPREAD_FLOOR = 1e-3


def _collapsed_spreads(spec: ModelSpec, theta: np.ndarray) -> list[int]:
    """Spread slots that ended up next to zero."""
    out = []
    for d, sl in zip(spec.defs, parameter_layout(spec).slices):
        if d.is_random and abs(theta[sl.start + 1]) < SPREAD_FLOOR:
            out.append(sl.start + 1)
    return out


def _restricted(fun, x_full: np.ndarray, free: np.ndarray):
    def wrapped(x_free):
        x = x_full.copy()
        x[free] = x_free
        out = fun(x)
        if isinstance(out, tuple):
            return out[0], np.asarray(out[1])[free]
        return np.asarray(out)[free]
    return wrapped


def _covariance(spec, theta, dataset, lik, method, free):
    """Covariance over the free slots; pinned slots get NaN rows and columns."""
    k = theta.size
    cov = np.full((k, k), np.nan)
    if method == "numerical_hessian":
        sub = covariance_from_hessian(numerical_hessian(_restricted(lik.score, theta, free), theta[free]))
    else:
        sub = covariance_from_scores(lik.scores(theta)[1][:, free])
    cov[np.ix_(free, free)] = sub
    return cov


def estimate(spec: ModelSpec, dataset: Dataset, options: EstimationOptions | None = None,
             draws: DrawMatrix | None = None, theta0: Sequence[float] | None = None,
             ) -> EstimationResult:
    """Fit ``spec`` to ``dataset`` by maximum simulated likelihood.

    Running out of iterations is not an error: the result comes back with
    ``converged=False``.  A numerical-Hessian failure falls back to BHHH; if
    that is singular too the standard errors are NaN and
    ``covariance_method`` says why.

    The likelihood depends on each spread only through ``|sd|``, so a spread
    the data do not support leaves a kink maximum at zero where the gradient
    cannot vanish.  When the optimizer stops with a spread near zero, that
    spread is pinned at exactly zero and the other slots are re-estimated from
    the start point (the trace shows the restart as a zero-length step); the
    fit counts as converged when the remaining gradient is small and the
    likelihood falls as the spread leaves zero.  Pinned slots have no
    standard error.
    """
    options = options or EstimationOptions()
    violations = validate_spec(spec, dataset)
    if violations:
        raise SpecError("; ".join(violations))
    if len(dataset) == 0:
        raise EstimationError("dataset has no observations")
    if draws is None:
        draws = draws_for(spec, len(dataset), options)
    lik = SimulatedLikelihood(spec, dataset, draws)
    x0 = start_point(spec) if theta0 is None else np.asarray(theta0, dtype=float)
    try:
        ll_start = lik.loglike(x0)
    except LikelihoodError as exc:
        raise EstimationError(f"objective not finite at the start point: {exc}") from exc

    opt = bfgs_maximize(lik.loglike_and_score, x0, options.max_iterations,
                        options.gradient_tolerance, options.step_tolerance)
    theta, _ = _positive_spreads(spec, opt.x, None)
    free = np.ones(theta.size, dtype=bool)
    ll, grad, iterations, converged, reason = opt.fun, opt.grad, opt.iterations, opt.converged, opt.reason
    trace = list(opt.trace)
    pinned = [] if converged else _collapsed_spreads(spec, theta)
    if pinned:
        free[pinned] = False
        # re-estimate from the usual start: the stopping point is the best of many
        # rounding-level comparisons and no neighbour can beat it on f alone
        theta = start_point(spec)
        theta[pinned] = 0.0
        sub = bfgs_maximize(_restricted(lik.loglike_and_score, theta, free), theta[free],
                            max(options.max_iterations - iterations, 1),
                            options.gradient_tolerance, options.step_tolerance)
        theta[free] = sub.x
        ll, full_grad = lik.loglike_and_score(theta)
        # at sd = 0 the score is the slope as |sd| grows from zero
        boundary_max = bool(np.all(full_grad[pinned] <= 0.0))
        grad = np.where(free, full_grad, 0.0)
        iterations += sub.iterations
        trace += [(iterations - sub.iterations + it, f, g, step) for it, f, g, step in sub.trace]
        converged = sub.converged and boundary_max
        names = [parameter_layout(spec).names[j] for j in pinned]
        reason = f"{sub.reason}; spread at zero: {', '.join(names)}"
        if not boundary_max:
            reason += " (likelihood rises away from zero)"

    method = options.covariance_method
    try:
        cov = _covariance(spec, theta, dataset, lik, method, free)
    except CovarianceError as exc:
        cov = None
        if method != "bhhh":
            logger.warning("numerical Hessian unusable (%s); falling back to BHHH", exc)
            try:
                cov = _covariance(spec, theta, dataset, lik, "bhhh", free)
                method = "bhhh (fallback)"
            except CovarianceError as exc2:
                exc = exc2
        if cov is None:
            # typically a parameter drifting off to infinity along a flat ridge
            logger.warning("no usable covariance (%s); standard errors unavailable", exc)
            cov = np.full((theta.size, theta.size), np.nan)
            method = f"unavailable ({exc})"
    stats = wald_stats(theta, cov)
    ll_zero = null_log_likelihood(len(dataset))
    return EstimationResult(
        spec=spec,
        stratum=dataset.stratum,
        names=parameter_layout(spec).names,
        theta_hat=theta,
        covariance=cov,
        std_errors=stats.se,
        t_stats=stats.t,
        p_values=stats.p,
        n_obs=len(dataset),
        ll_zero=ll_zero,
        ll_start=ll_start,
        ll_converged=ll,
        rho_squared=pseudo_r2(ll_zero, ll),
        iterations=iterations,
        converged=converged,
        stop_reason=reason,
        gradient_norm=float(np.max(np.abs(grad))),
        covariance_method=method,
        options=options,
        fingerprint=fingerprint(spec, dataset, options),
        trace=trace,
    )
