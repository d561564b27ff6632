"""Latent-space utilities: Gaussian priors, chi-squared hyperellipsoid
projection, interpolation, and nearest-neighbor lookup.

Sampling in a latent space draws from a fitted Gaussian prior; a draw is
pulled onto the confidence hyperellipsoid by rescaling its offset from the
mean so its Mahalanobis distance equals the chi-squared critical radius
beta = sqrt(chi2_quantile(rho, zeta)). The quantile is computed here by
inverting the regularized incomplete gamma function, so the package has no
runtime dependency on a stats library.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import atomic_write_text

__all__ = [
    "LatentError",
    "LatentCode",
    "GaussianPrior",
    "REFERENCE_PRESET",
    "fit_prior",
    "mahalanobis",
    "gamma_p",
    "chi2_cdf",
    "chi2_critical",
    "project_to_hyperellipsoid",
    "interpolate",
    "nearest_neighbor",
    "save_codes",
    "load_codes",
]

SPACES = ("identity", "expression")
COORDS = ("w", "z")

# Constants quoted from the reference configuration; shipped as data, the
# math never assumes them.
REFERENCE_PRESET = {
    "rho": 0.99,
    "zeta_ex": 7,
    "beta_ex": 4.07,
    "zeta_id": 26,
    "beta_id": 6.01,
}


class LatentError(Exception):
    pass


@dataclass
class LatentCode:
    values: np.ndarray
    space: str    # identity | expression
    coords: str   # w (pre-flow) | z (post-flow)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.space not in SPACES:
            raise LatentError(f"unknown space {self.space!r}")
        if self.coords not in COORDS:
            raise LatentError(f"unknown coords {self.coords!r}")


@dataclass
class GaussianPrior:
    mean: np.ndarray
    cov: np.ndarray
    whitener: np.ndarray  # symmetric inverse square root of cov

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_prior(samples: np.ndarray) -> GaussianPrior:
    """Unbiased mean/covariance with eigenvalue clipping; the whitener floors
    eigenvalues at 1e-12 * trace / d so rank-deficient covariances invert."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise LatentError(f"samples must be (n, d), got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise LatentError("fitting a prior needs at least 2 samples")
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    cov = (evecs * evals) @ evecs.T
    floor = max(1e-12 * float(np.trace(cov)) / d, 1e-300)
    inv_sqrt = 1.0 / np.sqrt(np.maximum(evals, floor))
    whitener = (evecs * inv_sqrt) @ evecs.T
    return GaussianPrior(mean, cov, whitener)


def mahalanobis(prior: GaussianPrior, b: np.ndarray) -> float:
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    return float(np.linalg.norm(prior.whitener @ (b - prior.mean)))


# ---------------------------------------------------------------------------
# chi-squared quantiles via the regularized incomplete gamma function

_EPS = 1e-15
_MAX_ITER = 500


def gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x), series for small x and a
    Lentz continued fraction otherwise."""
    if a <= 0:
        raise LatentError("gamma_p needs a > 0")
    if x < 0:
        raise LatentError("gamma_p needs x >= 0")
    if x == 0.0:
        return 0.0
    log_front = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1.0:
        # series representation
        term = 1.0 / a
        total = term
        for n in range(1, _MAX_ITER):
            term *= x / (a + n)
            total += term
            if abs(term) < abs(total) * _EPS:
                break
        return min(1.0, math.exp(log_front) * total)
    # continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    q = math.exp(log_front) * h
    return max(0.0, 1.0 - q)


def chi2_cdf(x: float, zeta: float) -> float:
    if zeta < 1:
        raise LatentError("degrees of freedom must be >= 1")
    if x < 0:
        return 0.0
    return gamma_p(0.5 * zeta, 0.5 * x)


def chi2_critical(zeta: float, rho: float) -> float:
    """beta = sqrt of the chi-squared quantile at confidence rho with zeta
    degrees of freedom, from bisection on the CDF (quantile accurate to well
    under 1e-6)."""
    if zeta < 1:
        raise LatentError("degrees of freedom must be >= 1")
    if not 0.0 < rho < 1.0:
        raise LatentError("confidence must lie strictly between 0 and 1")
    hi = max(4.0 * zeta, 16.0)
    while chi2_cdf(hi, zeta) < rho:
        hi *= 2.0
        if hi > 1e12:
            raise LatentError("quantile search failed to bracket")
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, zeta) < rho:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-10 * max(1.0, hi):
            break
    return math.sqrt(0.5 * (lo + hi))


def project_to_hyperellipsoid(b: np.ndarray, prior: GaussianPrior, beta: float) -> np.ndarray:
    """Rescale b - mean so the result's Mahalanobis distance is exactly beta;
    the direction from the mean is preserved."""
    if beta <= 0:
        raise LatentError("beta must be positive")
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    offset = b - prior.mean
    dist = float(np.linalg.norm(prior.whitener @ offset))
    if dist == 0.0:
        raise LatentError("projection undefined at the prior mean")
    return prior.mean + offset * (beta / dist)


def interpolate(a: LatentCode, b: LatentCode, nu: float) -> LatentCode:
    if a.space != b.space or a.coords != b.coords:
        raise LatentError(
            f"cannot interpolate across ({a.space}, {a.coords}) and "
            f"({b.space}, {b.coords})"
        )
    if a.values.shape != b.values.shape:
        raise LatentError("dimension mismatch")
    return LatentCode((1.0 - nu) * a.values + nu * b.values, a.space, a.coords)


def nearest_neighbor(query, pool):
    """(index, distance) of the Euclidean nearest pool entry; ties go to the
    lowest index. Accepts LatentCodes or plain vectors."""
    qv = query.values if isinstance(query, LatentCode) else np.asarray(query, dtype=np.float64)
    rows = [
        (p.values if isinstance(p, LatentCode) else np.asarray(p, dtype=np.float64))
        for p in pool
    ]
    if not rows:
        raise LatentError("empty pool")
    mat = np.stack(rows)
    dists = np.linalg.norm(mat - qv, axis=1)
    idx = int(np.argmin(dists))  # argmin returns the first minimum
    return idx, float(dists[idx])


# ---------------------------------------------------------------------------
# text serialization


def save_codes(path: str, codes) -> None:
    lines = ["morphflow-latent 1"]
    for code in codes:
        vals = " ".join(f"{v:.17g}" for v in code.values)
        lines.append(f"{code.space} {code.coords} {vals}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_codes(path: str) -> list:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "morphflow-latent 1":
            raise LatentError(f"{path}: unrecognized latent code file")
        out = []
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 3:
                raise LatentError(f"{path}: malformed code at line {lineno}")
            out.append(LatentCode(np.array([float(v) for v in parts[2:]]), parts[0], parts[1]))
    return out
