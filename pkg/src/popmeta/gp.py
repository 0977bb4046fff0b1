"""Gaussian-process regression with an RBF kernel, fitted per structure.

The baseline sees only the few shots of one testing structure, never the
population, which is exactly what it is meant to contrast with.  Kernel
hyperparameters maximize the log marginal likelihood (ML-II) by bounded
quasi-Newton ascent in log-space from several restart points; with one or
two shots the bounds act as the regularizer and ties are broken towards the
largest lengthscale (the smoothest explanation), then the smallest noise.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky
from scipy.optimize import minimize

from .seeding import derive_seed, rng_for

JITTER = 1e-10

# (lengthscale, signal variance, noise variance) boxes for ML-II, in input
# units after scaling to [-1, 1] and standardized target units.
DEFAULT_BOUNDS = ((1e-1, 1e2), (1e-2, 1e2), (1e-8, 1.0))

# Restart 0 always starts here; the remaining restarts are log-uniform draws.
DEFAULT_START = (1.0, 1.0, 1e-4)


@dataclass
class GPModel:
    lengthscale: float
    signal_variance: float
    noise_variance: float
    train_inputs: np.ndarray   # (n,)
    train_targets: np.ndarray  # (n,)
    factor: np.ndarray         # lower Cholesky factor of K + sn2*I
    alpha: np.ndarray          # (K + sn2*I)^{-1} y
    log_marginal: float


def rbf_kernel(x1, x2, lengthscale, signal_variance):
    """k(x, x') = sf2 * exp(-(x - x')^2 / (2 l^2)) for 1-D inputs."""
    d = np.subtract.outer(np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64))
    return signal_variance * np.exp(-0.5 * (d / lengthscale) ** 2)


def _chol_with_jitter(K_y):
    jitter = 0.0
    for _ in range(6):
        try:
            return cholesky(K_y + jitter * np.eye(K_y.shape[0]), lower=True,
                            check_finite=False)
        except LinAlgError:
            jitter = max(JITTER, 10.0 * jitter) * np.max(np.diag(K_y))
    raise LinAlgError("kernel matrix not positive definite even with jitter")


def log_marginal_likelihood(x, y, lengthscale, signal_variance, noise_variance):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    K_y = rbf_kernel(x, x, lengthscale, signal_variance) + noise_variance * np.eye(n)
    L = _chol_with_jitter(K_y)
    alpha = cho_solve((L, True), y, check_finite=False)
    return float(
        -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2.0 * np.pi)
    )


def _neg_lml_and_grad(log_params, d2, y, eye):
    """Negative LML and gradient w.r.t. (log l, log sf2, log sn2).

    ``d2`` is the precomputed squared-distance matrix of the inputs.
    """
    ell, sf2, sn2 = np.exp(log_params)
    n = y.size
    Kf = sf2 * np.exp(-0.5 * d2 / ell**2)
    L = _chol_with_jitter(Kf + sn2 * eye)
    alpha = cho_solve((L, True), y, check_finite=False)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2.0 * np.pi)

    # dLML/dtheta = 0.5 tr((alpha alpha^T - K_y^{-1}) dK/dtheta)
    inner = np.outer(alpha, alpha) - cho_solve((L, True), eye, check_finite=False)
    dK_dlog_ell = Kf * (d2 / ell**2)
    grad = np.array(
        [
            0.5 * (inner * dK_dlog_ell).sum(),
            0.5 * (inner * Kf).sum(),
            0.5 * np.trace(inner) * sn2,
        ]
    )
    return -lml, -grad


def gp_build(inputs, targets, lengthscale, signal_variance, noise_variance) -> GPModel:
    """Assemble a model with explicitly chosen hyperparameters."""
    if noise_variance < JITTER:
        raise ValueError(f"noise variance below the jitter floor {JITTER}")
    x = np.asarray(inputs, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    n = x.size
    K_y = rbf_kernel(x, x, lengthscale, signal_variance) + noise_variance * np.eye(n)
    L = _chol_with_jitter(K_y)
    alpha = cho_solve((L, True), y, check_finite=False)
    lml = float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2.0 * np.pi))
    return GPModel(
        lengthscale=float(lengthscale),
        signal_variance=float(signal_variance),
        noise_variance=float(noise_variance),
        train_inputs=x,
        train_targets=y,
        factor=L,
        alpha=alpha,
        log_marginal=lml,
    )


def _merge_duplicates(x, y):
    """Average the targets of exactly repeated inputs."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    uniq, start = np.unique(xs, return_index=True)
    if uniq.size == xs.size:
        return x, y
    merged = np.array([seg.mean() for seg in np.split(ys, start[1:])])
    return uniq, merged


def gp_fit(inputs, targets, restarts: int = 8, seed: int = 0,
           bounds=DEFAULT_BOUNDS) -> GPModel:
    """ML-II fit of (lengthscale, signal variance, noise variance).

    Deterministic given the seed.  The returned model's LML is never below
    the LML at any restart's initial hyperparameters.
    """
    x = np.asarray(inputs, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("empty training set")
    if x.size != y.size:
        raise ValueError("inputs and targets differ in length")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise ValueError("non-finite training data")
    x, y = _merge_duplicates(x, y)

    log_lo = np.log([b[0] for b in bounds])
    log_hi = np.log([b[1] for b in bounds])
    rng = rng_for(seed, "gp_restarts", x.size)
    starts = [np.clip(np.log(DEFAULT_START), log_lo, log_hi)]
    for _ in range(max(0, restarts - 1)):
        starts.append(rng.uniform(log_lo, log_hi))

    d2 = np.subtract.outer(x, x) ** 2
    eye = np.eye(x.size)
    candidates = []
    for start in starts:
        neg0, _ = _neg_lml_and_grad(start, d2, y, eye)
        res = minimize(
            _neg_lml_and_grad,
            start,
            args=(d2, y, eye),
            jac=True,
            method="L-BFGS-B",
            bounds=list(zip(log_lo, log_hi)),
            options={"maxiter": 60, "ftol": 1e-10, "gtol": 1e-5},
        )
        best = res.x if res.fun <= neg0 else start
        lml = -min(res.fun, neg0)
        if np.isfinite(lml):
            ell, sf2, sn2 = np.exp(best)
            candidates.append((lml, ell, sf2, sn2))
    if not candidates:
        raise ValueError("all restarts produced non-finite marginal likelihood")

    top = max(c[0] for c in candidates)
    tol = 1e-9 * (1.0 + abs(top))
    tied = [c for c in candidates if c[0] >= top - tol]
    # smoothest explanation first, then the least noise
    lml, ell, sf2, sn2 = sorted(tied, key=lambda c: (-c[1], c[3]))[0]
    return gp_build(x, y, ell, sf2, sn2)


def gp_predict_mean(model: GPModel, query_inputs) -> np.ndarray:
    """Posterior mean k_*^T (K + sn2 I)^{-1} y at the query points."""
    q = np.atleast_1d(np.asarray(query_inputs, dtype=np.float64))
    k_star = rbf_kernel(q, model.train_inputs, model.lengthscale, model.signal_variance)
    mean = k_star @ model.alpha
    if not np.all(np.isfinite(mean)):
        raise ValueError("non-finite GP prediction")
    return mean


def gp_fit_multi(inputs, target_vectors, restarts: int = 8, seed: int = 0,
                 bounds=DEFAULT_BOUNDS):
    """One independent GP per output dimension."""
    targets = np.asarray(target_vectors, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets.reshape(-1, 1)
    return [
        gp_fit(inputs, targets[:, j], restarts=restarts,
               seed=derive_seed(seed, "gp_dim", j), bounds=bounds)
        for j in range(targets.shape[1])
    ]
