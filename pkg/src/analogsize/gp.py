"""Gaussian-process surrogate with a Matérn-5/2 ARD kernel.

Inputs are expected in the unit cube; targets are standardized internally
and posteriors are reported in the original target units. Hyperparameters
(log lengthscales, log signal variance, log noise variance) are fitted by
maximizing the log marginal likelihood from several random starts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import FitError, InvariantError

SQRT5 = math.sqrt(5.0)
JITTER_START = 1e-6
JITTER_MAX = 1e-4

LOG_LS_BOUNDS = (math.log(1e-2), math.log(1e2))
LOG_SF_BOUNDS = (math.log(1e-2), math.log(1e2))
LOG_SN_BOUNDS = (math.log(1e-8), math.log(1.0))


def matern52(a: np.ndarray, b: np.ndarray, lengthscales, signal_variance: float) -> np.ndarray:
    """k(r) = s2 (1 + sqrt5 r + 5/3 r^2) exp(-sqrt5 r), r the ARD-scaled distance."""
    a = np.atleast_2d(a) / lengthscales
    b = np.atleast_2d(b) / lengthscales
    sq = np.sum(a**2, 1)[:, None] + np.sum(b**2, 1)[None, :] - 2.0 * a @ b.T
    r = np.sqrt(np.maximum(sq, 0.0))
    return signal_variance * (1.0 + SQRT5 * r + 5.0 / 3.0 * r**2) * np.exp(-SQRT5 * r)


@dataclass
class GpModel:
    inputs: np.ndarray
    targets: np.ndarray
    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float
    y_mean: float = 0.0
    y_scale: float = 1.0
    jitter: float = JITTER_START
    chol: np.ndarray | None = None
    alpha: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).ravel()
        self.lengthscales = np.broadcast_to(np.asarray(self.lengthscales, dtype=float),
                                            (self.inputs.shape[1],)).copy()
        if len(self.inputs) != len(self.targets):
            raise InvariantError("inputs and targets differ in length")
        if np.any(self.lengthscales <= 0) or self.signal_variance <= 0 or self.noise_variance < 0:
            raise InvariantError("GP hyperparameters must be positive")
        if self.chol is None:
            self._factorize()

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def _z(self) -> np.ndarray:
        return (self.targets - self.y_mean) / self.y_scale

    def _factorize(self):
        K = matern52(self.inputs, self.inputs, self.lengthscales, self.signal_variance)
        K[np.diag_indices_from(K)] += self.noise_variance
        self.chol, self.jitter = _cholesky(K)
        self.alpha = cho_solve((self.chol, True), self._z())


def _cholesky(K: np.ndarray) -> tuple[np.ndarray, float]:
    jitter = JITTER_START
    n = len(K)
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise FitError(f"Gram matrix not positive definite even with jitter {JITTER_MAX:g}")


def _standardize(y: np.ndarray) -> tuple[float, float]:
    mu = float(np.mean(y))
    sd = float(np.std(y))
    return mu, (sd if sd > 1e-12 else 1.0)


def _nll_and_grad(theta, X, z, fixed_noise):
    d = X.shape[1]
    ls = np.exp(theta[:d])
    sf = math.exp(theta[d])
    sn = fixed_noise if fixed_noise is not None else math.exp(theta[d + 1])
    n = len(z)
    diff = (X[:, None, :] - X[None, :, :]) / ls
    d2 = diff**2
    r = np.sqrt(np.sum(d2, -1))
    e = np.exp(-SQRT5 * r)
    K0 = sf * (1.0 + SQRT5 * r + 5.0 / 3.0 * r**2) * e
    K = K0 + (sn + JITTER_START) * np.eye(n)
    try:
        Lc = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return 1e25, np.zeros_like(theta)
    alpha = cho_solve((Lc, True), z)
    nll = 0.5 * z @ alpha + np.sum(np.log(np.diag(Lc))) + 0.5 * n * math.log(2 * math.pi)
    W = np.outer(alpha, alpha) - cho_solve((Lc, True), np.eye(n))
    g = np.empty_like(theta)
    common = sf * 5.0 / 3.0 * (1.0 + SQRT5 * r) * e
    for k in range(d):
        g[k] = -0.5 * np.sum(W * (common * d2[:, :, k]))
    g[d] = -0.5 * np.sum(W * K0)
    if fixed_noise is None:
        g[d + 1] = -0.5 * np.trace(W) * sn
    return float(nll), g


def gp_fit(inputs, targets, restarts: int = 4, rng: np.random.Generator | None = None,
           noise_variance: float | None = None) -> GpModel:
    """Fit hyperparameters by L-BFGS-B on the negative log marginal likelihood.

    One start at the default hyperparameters plus ``restarts`` random ones;
    the best optimum wins. ``noise_variance`` (in standardized units) pins
    the noise instead of learning it.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    if len(X) < 2:
        raise InvariantError("gp_fit needs at least two observations")
    if len(X) != len(y):
        raise InvariantError("inputs and targets differ in length")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise InvariantError("non-finite training data")
    rng = rng if rng is not None else np.random.default_rng(0)
    d = X.shape[1]
    mu, sd = _standardize(y)
    z = (y - mu) / sd

    bounds = [LOG_LS_BOUNDS] * d + [LOG_SF_BOUNDS]
    if noise_variance is None:
        bounds.append(LOG_SN_BOUNDS)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    default = np.array([math.log(0.5)] * d + [0.0] + ([math.log(1e-3)] if noise_variance is None else []))
    starts = [default] + [lo + rng.random(len(lo)) * (hi - lo) for _ in range(restarts)]

    best = None
    for th0 in starts:
        with np.errstate(all="ignore"):
            res = minimize(_nll_and_grad, th0, args=(X, z, noise_variance), jac=True,
                           method="L-BFGS-B", bounds=bounds)
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None or best.fun >= 1e24:
        raise FitError("marginal likelihood optimization failed from every start")
    th = best.x
    noise = noise_variance if noise_variance is not None else math.exp(th[d + 1])
    return GpModel(X, y, np.exp(th[:d]), math.exp(th[d]), noise, y_mean=mu, y_scale=sd)


def gp_posterior(model: GpModel, query, full_cov: bool = False):
    """Posterior mean and variance of the latent function at ``query``.

    Returns arrays for a batch of points; with ``full_cov`` the second
    output is the joint covariance matrix. Variances are clamped at zero.
    """
    Q = np.atleast_2d(np.asarray(query, dtype=float))
    if Q.shape[1] != model.dim:
        raise InvariantError(f"query has dimension {Q.shape[1]}, model has {model.dim}")
    Ks = matern52(model.inputs, Q, model.lengthscales, model.signal_variance)
    mean = Ks.T @ model.alpha
    v = solve_triangular(model.chol, Ks, lower=True)
    s2 = model.y_scale**2
    mean = model.y_mean + model.y_scale * mean
    if full_cov:
        Kss = matern52(Q, Q, model.lengthscales, model.signal_variance)
        cov = (Kss - v.T @ v) * s2
        cov = 0.5 * (cov + cov.T)
        return mean, cov
    var = np.maximum(model.signal_variance - np.sum(v * v, 0), 0.0) * s2
    return mean, var
