"""Halton quasi-random draws mapped to standard-normal values."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

# Keeps base**digits below 2**53 for any base under 8192, so every radical
# inverse is a quotient of two exactly representable integers.
MAX_INDEX = 2 ** 40


def first_primes(n: int) -> list[int]:
    primes: list[int] = []
    candidate = 2
    while len(primes) < n:
        if all(candidate % p for p in primes if p * p <= candidate):
            primes.append(candidate)
        candidate += 1
    return primes


def radical_inverse(index: int, base: int) -> float:
    """Reflect the base-``base`` digits of ``index`` about the radix point.

    >>> radical_inverse(6, 2)   # 110 -> 0.011
    0.375
    """
    if index < 1:
        raise ValueError("index must be >= 1")
    if base < 2:
        raise ValueError("base must be >= 2")
    reversed_digits, denom = 0, 1
    while index:
        index, digit = divmod(index, base)
        reversed_digits = reversed_digits * base + digit
        denom *= base
    return reversed_digits / denom


def radical_inverse_array(indices: np.ndarray, base: int) -> np.ndarray:
    """Vectorised :func:`radical_inverse`; each value is a single correctly rounded division."""
    idx = np.asarray(indices, dtype=np.int64).copy()
    if idx.size and idx.min() < 1:
        raise ValueError("index must be >= 1")
    rev = np.zeros_like(idx)
    denom = np.ones_like(idx)
    # Shorter indices pick up trailing zero digits, which scale numerator and
    # denominator alike, so the quotient is unchanged.
    while idx.any():
        idx, digit = np.divmod(idx, base)
        rev *= base
        rev += digit
        denom *= base
    return rev / denom


def norm_cdf(x):
    return ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


# Acklam's rational approximation; relative error about 1.15e-9 before refinement.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def _acklam_lower(q: np.ndarray) -> np.ndarray:
    """Initial quantile for q in (0, 0.5]."""
    z = np.empty_like(q)
    tail = q < _P_LOW
    if tail.any():
        t = np.sqrt(-2.0 * np.log(q[tail]))
        num = ((((_C[0] * t + _C[1]) * t + _C[2]) * t + _C[3]) * t + _C[4]) * t + _C[5]
        den = (((_D[0] * t + _D[1]) * t + _D[2]) * t + _D[3]) * t + 1.0
        z[tail] = num / den
    mid = ~tail
    if mid.any():
        s = q[mid] - 0.5
        r = s * s
        num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * s
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        z[mid] = num / den
    return z


def standard_normal_quantile(u):
    """Inverse of the standard normal CDF.

    Works on the lower half (``min(u, 1-u)``) so the Newton correction
    ``(Phi(z) - q) / phi(z)`` never suffers cancellation near 1, then mirrors.
    Accepts scalars or arrays; raises ``ValueError`` outside (0, 1).
    """
    arr = np.asarray(u, dtype=float)
    if not np.all((arr > 0.0) & (arr < 1.0)):
        raise ValueError("u must lie strictly inside (0, 1)")
    upper = arr > 0.5
    q = np.where(upper, 1.0 - arr, arr)
    z = _acklam_lower(np.atleast_1d(q)).reshape(q.shape)
    z = z - (ndtr(z) - q) / norm_pdf(z)
    z = np.where(upper, -z, z)
    if np.ndim(u) == 0:
        return float(z)
    return z


@dataclass(frozen=True, eq=False)
class DrawMatrix:
    """Standard-normal draws of shape (n_obs, n_draws, n_dims).

    Dimension ``k`` comes from the Halton sequence in base ``bases[k]``.
    Observation ``n`` owns the index block ``skip + 1 + n * n_draws + r``.
    """

    values: np.ndarray
    skip: int
    bases: tuple[int, ...]

    def __post_init__(self):
        self.values.flags.writeable = False

    @property
    def n_obs(self) -> int:
        return self.values.shape[0]

    @property
    def n_draws(self) -> int:
        return self.values.shape[1]

    @property
    def n_dims(self) -> int:
        return self.values.shape[2]

    def header(self) -> dict:
        return {"n_obs": self.n_obs, "n_draws": self.n_draws, "n_dims": self.n_dims,
                "skip": self.skip, "bases": list(self.bases)}

    def export(self, path: str | Path) -> None:
        """Write ``.json`` (header + nested values) or ``.npz`` (header + array)."""
        path = Path(path)
        if path.suffix == ".npz":
            np.savez(path, values=self.values, header=json.dumps(self.header()))
        else:
            with open(path, "w", encoding="utf-8") as fh:
                json.dump({"header": self.header(), "values": self.values.tolist()}, fh)


def halton_uniforms(n_obs: int, n_draws: int, base: int, skip: int = 100) -> np.ndarray:
    _check_counts(n_obs, n_draws, 1, skip)
    indices = skip + 1 + np.arange(n_obs * n_draws, dtype=np.int64)
    return radical_inverse_array(indices, base).reshape(n_obs, n_draws)


def _check_counts(n_obs, n_draws, n_dims, skip):
    if min(n_obs, n_draws, n_dims) < 1:
        raise ValueError("n_obs, n_draws and n_random_dims must be >= 1")
    if skip < 0:
        raise ValueError("skip must be >= 0")
    if skip + 1 + n_obs * n_draws >= MAX_INDEX:
        raise OverflowError("Halton index range exceeds 2**40")


def build_draws(n_obs: int, n_draws: int, n_random_dims: int, skip: int = 100) -> DrawMatrix:
    _check_counts(n_obs, n_draws, n_random_dims, skip)
    bases = tuple(first_primes(n_random_dims))
    values = np.empty((n_obs, n_draws, n_random_dims))
    for k, base in enumerate(bases):
        values[:, :, k] = standard_normal_quantile(halton_uniforms(n_obs, n_draws, base, skip))
    return DrawMatrix(values, skip, bases)
