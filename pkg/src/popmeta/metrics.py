"""Normalised mean-squared error against a population-level scale.

    NMSE = 100 / (N * sigma^2) * sum_i ||yhat_i - y_i||^2

where sigma is the standard deviation of the evaluation targets over the
whole testing population (1/N convention; for vector targets the
per-dimension variances are summed before the square root).  A predictor
that always emits the population mean scores exactly 100; values below 5
indicate a well-fitted model.
"""

import numpy as np


def _as_matrix(values):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    return arr


def population_sigma(all_evaluation_targets) -> float:
    """Population-scale sigma: sqrt of per-dimension variances summed."""
    targets = _as_matrix(all_evaluation_targets)
    if targets.shape[0] == 0:
        raise ValueError("no targets")
    var = float(targets.var(axis=0).sum())
    if var <= 0:
        raise ValueError("degenerate population: zero variance")
    return float(np.sqrt(var))


def nmse(predictions, observations, sigma_pop: float) -> float:
    """Normalised mean-squared error in percent."""
    preds = _as_matrix(predictions)
    obs = _as_matrix(observations)
    if preds.shape != obs.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {obs.shape}")
    if preds.shape[0] < 1:
        raise ValueError("empty evaluation set")
    if not sigma_pop > 0:
        raise ValueError("sigma_pop must be positive")
    n = preds.shape[0]
    return float(100.0 / (n * sigma_pop**2) * ((preds - obs) ** 2).sum())
