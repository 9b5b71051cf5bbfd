"""Utilities, logit and simulated mixed-logit probabilities, log-likelihood and score.

The simulated probability of level ``i`` for observation ``n`` is the plain
average, over that observation's draws, of the logit probability evaluated at
the coefficients realised by each draw.  The score differentiates exactly this
simulated objective (draws held fixed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from .data import ChoiceObservation, Dataset, LEVELS
from .halton import DrawMatrix
from .modelspec import ModelSpec, parameter_layout

PROB_FLOOR = 1e-300
# (observations x draws) cells evaluated per block
_BLOCK_CELLS = 50_000


class LikelihoodError(FloatingPointError):
    """A chosen level has zero simulated probability at working precision."""

    def __init__(self, index: int, prob: float):
        super().__init__(f"observation {index}: probability of the chosen level is {prob:.3g}")
        self.index = index


@dataclass(frozen=True)
class _Compiled:
    level: np.ndarray        # target level index per def
    random: np.ndarray       # bool per def
    dim: np.ndarray          # draw dimension per def (-1 for fixed)
    dist: tuple              # distribution per def (None for fixed)
    starts: np.ndarray       # first slot per def
    length: int
    needs_u: bool


def _compile(spec: ModelSpec) -> _Compiled:
    layout = parameter_layout(spec)
    dims, k = [], 0
    for d in spec.defs:
        dims.append(k if d.is_random else -1)
        k += d.is_random
    dist = tuple(d.distribution if d.is_random else None for d in spec.defs)
    return _Compiled(
        level=np.array([LEVELS.index(d.target_level) for d in spec.defs], dtype=np.int64),
        random=np.array([d.is_random for d in spec.defs], dtype=bool),
        dim=np.array(dims, dtype=np.int64),
        dist=dist,
        starts=np.array([sl.start for sl in layout.slices], dtype=np.int64),
        length=layout.length,
        needs_u=any(x in ("uniform", "triangular") for x in dist),
    )


def design_columns(spec: ModelSpec, names: Sequence[str], X: np.ndarray) -> np.ndarray:
    """One column per def: the variable's values, or ones for the constant."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    cols = np.empty((X.shape[0], len(spec.defs)))
    for j, d in enumerate(spec.defs):
        if d.is_constant:
            cols[:, j] = 1.0
        else:
            try:
                cols[:, j] = X[:, list(names).index(d.variable)]
            except ValueError:
                raise KeyError(f"variable {d.variable!r} not in data") from None
    return cols


def _triangular(u):
    return np.where(u < 0.5, np.sqrt(2.0 * u) - 1.0, 1.0 - np.sqrt(2.0 * (1.0 - u)))


def realize(dist: str, mean: float, sd: float, z, u=None):
    """Coefficient draws and their derivatives w.r.t. the (unconstrained) mean and sd slots."""
    scale = abs(sd)
    sign = 1.0 if sd >= 0 else -1.0
    if dist == "normal":
        shape = z
    elif dist == "lognormal":
        beta = np.exp(mean + scale * z)
        return beta, beta, sign * beta * z
    elif dist == "uniform":
        shape = 2.0 * (ndtr(z) if u is None else u) - 1.0
    elif dist == "triangular":
        shape = _triangular(ndtr(z) if u is None else u)
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return mean + scale * shape, np.ones_like(shape), sign * shape


def mnl_probabilities(utilities):
    """Softmax over the last axis with the row maximum subtracted first."""
    v = np.asarray(utilities, dtype=float)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_theta(comp: _Compiled, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (comp.length,):
        raise ValueError(f"theta has shape {theta.shape}, layout needs ({comp.length},)")
    return theta


def _block(comp, theta, cols, z, u, chosen=None, want_score=False):
    """Probabilities for a block of observations; optionally the per-observation score.

    ``cols`` is (n, D); ``z``/``u`` are (n, R, K) or None when nothing is random.
    Returns (pbar (n, 3), score (n, P) or None).
    """
    n = cols.shape[0]
    R = z.shape[1] if z is not None else 1
    V = np.zeros((n, R, len(LEVELS)))
    derivs = []
    for j in range(cols.shape[1]):
        lvl, start = comp.level[j], comp.starts[j]
        x = cols[:, j]
        if comp.random[j]:
            k = comp.dim[j]
            beta, d_mean, d_sd = realize(comp.dist[j], theta[start], theta[start + 1],
                                         z[:, :, k], None if u is None else u[:, :, k])
            V[:, :, lvl] += beta * x[:, None]
            derivs.append((d_mean, d_sd))
        else:
            V[:, :, lvl] += theta[start] * x[:, None]
            derivs.append(None)
    P = mnl_probabilities(V)
    pbar = P.mean(axis=1)
    if not want_score:
        return pbar, None

    rows = np.arange(n)
    Pc = P[rows, :, chosen]                      # (n, R)
    pc_bar = pbar[rows, chosen]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / pc_bar
    g = np.zeros((n, comp.length))
    for j in range(cols.shape[1]):
        lvl, start = comp.level[j], comp.starts[j]
        w = Pc * ((chosen == lvl)[:, None] - P[:, :, lvl])   # (n, R)
        scale = cols[:, j] * inv
        if derivs[j] is None:
            g[:, start] = w.mean(axis=1) * scale
        else:
            d_mean, d_sd = derivs[j]
            g[:, start] = (w * d_mean).mean(axis=1) * scale
            g[:, start + 1] = (w * d_sd).mean(axis=1) * scale
    return pbar, g


class SimulatedLikelihood:
    """Simulated log-likelihood of one spec on one dataset with fixed draws.

    Holds the design columns so repeated evaluations during estimation do not
    rebuild them.  Per-observation quantities are computed in blocks and then
    reduced in observation order, so results do not depend on the block size.
    """

    def __init__(self, spec: ModelSpec, dataset: Dataset, draws: DrawMatrix | None = None,
                 block_cells: int = _BLOCK_CELLS):
        self.spec = spec
        self.dataset = dataset
        self.comp = _compile(spec)
        self.cols = design_columns(spec, dataset.indicator_names, dataset.X)
        self.chosen = dataset.chosen
        self.z = self.u = None
        K = spec.n_random
        if K:
            if draws is None:
                raise ValueError("spec has random parameters but no draws were supplied")
            if draws.n_obs != len(dataset):
                raise ValueError(f"draws cover {draws.n_obs} observations, dataset has {len(dataset)}")
            if draws.n_dims < K:
                raise ValueError(f"draws have {draws.n_dims} dimensions, spec needs {K}")
            if draws.n_draws < 1:
                raise ValueError("no draws")
            self.z = draws.values[:, :, :K]
            if self.comp.needs_u:
                self.u = ndtr(self.z)
        R = 1 if self.z is None else self.z.shape[1]
        self.block = max(1, block_cells // R)

    @property
    def n_obs(self) -> int:
        return self.cols.shape[0]

    def _blocks(self):
        for a in range(0, self.n_obs, self.block):
            b = min(a + self.block, self.n_obs)
            z = None if self.z is None else self.z[a:b]
            u = None if self.u is None else self.u[a:b]
            yield a, b, z, u

    def probabilities(self, theta, cols: np.ndarray | None = None) -> np.ndarray:
        """Simulated probabilities (N, 3); ``cols`` substitutes counterfactual design columns."""
        theta = _check_theta(self.comp, theta)
        cols = self.cols if cols is None else cols
        out = np.empty((self.n_obs, len(LEVELS)))
        for a, b, z, u in self._blocks():
            out[a:b], _ = _block(self.comp, theta, cols[a:b], z, u)
        return out

    def _chosen_probs(self, theta) -> np.ndarray:
        pbar = self.probabilities(theta)
        return pbar[np.arange(self.n_obs), self.chosen]

    def loglike_obs(self, theta) -> np.ndarray:
        pc = self._chosen_probs(theta)
        self._guard_block(pc, 0)
        return np.log(pc)

    def loglike(self, theta) -> float:
        return float(np.sum(self.loglike_obs(theta)))

    def scores(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Per-observation log-probabilities (N,) and scores (N, P)."""
        theta = _check_theta(self.comp, theta)
        ll = np.empty(self.n_obs)
        g = np.empty((self.n_obs, self.comp.length))
        for a, b, z, u in self._blocks():
            ch = self.chosen[a:b]
            pbar, g[a:b] = _block(self.comp, theta, self.cols[a:b], z, u, ch, want_score=True)
            pc = pbar[np.arange(b - a), ch]
            self._guard_block(pc, a)
            ll[a:b] = np.log(pc)
        return ll, g

    def _guard_block(self, pc, offset):
        bad = np.flatnonzero(~(pc >= PROB_FLOOR))
        if bad.size:
            raise LikelihoodError(int(bad[0]) + offset, float(pc[bad[0]]))

    def loglike_and_score(self, theta) -> tuple[float, np.ndarray]:
        ll, g = self.scores(theta)
        return float(np.sum(ll)), g.sum(axis=0)

    def score(self, theta) -> np.ndarray:
        return self.loglike_and_score(theta)[1]


# --------------------------------------------------------------------------
# per-observation and whole-sample functions


def _covariates(observation) -> Mapping[str, float]:
    return observation.covariates if isinstance(observation, ChoiceObservation) else observation


def systematic_utility(spec: ModelSpec, theta, observation, draw=None) -> np.ndarray:
    """Utility of each level for one observation at one draw (one z per random def)."""
    comp = _compile(spec)
    theta = _check_theta(comp, theta)
    cov = _covariates(observation)
    if spec.n_random:
        draw = np.asarray(draw, dtype=float).reshape(-1)
        if draw.size < spec.n_random:
            raise ValueError(f"draw has {draw.size} values, spec needs {spec.n_random}")
    V = np.zeros(len(LEVELS))
    for j, d in enumerate(spec.defs):
        x = 1.0 if d.is_constant else float(cov[d.variable])
        start = comp.starts[j]
        if d.is_random:
            beta = realize(d.distribution, theta[start], theta[start + 1], draw[comp.dim[j]])[0]
        else:
            beta = theta[start]
        V[comp.level[j]] += beta * x
    return V


def simulated_probabilities(spec: ModelSpec, theta, observation, draws_for_obs=None) -> np.ndarray:
    """Average logit probabilities over the rows of ``draws_for_obs`` (n_draws x n_dims)."""
    comp = _compile(spec)
    theta = _check_theta(comp, theta)
    cov = _covariates(observation)
    names = list(cov)
    cols = design_columns(spec, names, np.array([[cov[k] for k in names]], dtype=float))
    z = u = None
    if spec.n_random:
        if draws_for_obs is None:
            raise ValueError("spec has random parameters but no draws were supplied")
        d = np.asarray(draws_for_obs, dtype=float)
        if d.ndim == 1:
            d = d[:, None]
        if d.shape[0] == 0:
            raise ValueError("zero draws for a spec with random parameters")
        z = d[None, :, :spec.n_random]
        if comp.needs_u:
            u = ndtr(z)
    return _block(comp, theta, cols, z, u)[0][0]


def log_likelihood(spec: ModelSpec, theta, dataset: Dataset, draws: DrawMatrix | None = None) -> float:
    return SimulatedLikelihood(spec, dataset, draws).loglike(theta)


def score(spec: ModelSpec, theta, dataset: Dataset, draws: DrawMatrix | None = None) -> np.ndarray:
    return SimulatedLikelihood(spec, dataset, draws).score(theta)


def null_log_likelihood(n_obs: int, n_levels: int = len(LEVELS)) -> float:
    if n_obs < 1 or n_levels < 2:
        raise ValueError("need n_obs >= 1 and n_levels >= 2")
    return -n_obs * math.log(n_levels)
