"""Two-layer tanh perceptron with exact gradients and Hessian-vector products.

The network is input -> hidden (tanh) -> output (linear), stored in double
precision.  Forward/loss/gradient/HVP run on one of two interchangeable
backends: the compiled extension ``popmeta._nn_kernels`` when it was built,
otherwise the numpy implementation in ``popmeta._nn_numpy``.  Set
``POPMETA_BACKEND=python`` or ``POPMETA_BACKEND=compiled`` to force one.
"""

import base64
import json
import os
from dataclasses import dataclass

import numpy as np

from . import _nn_numpy
from .seeding import rng_for

_requested = os.environ.get("POPMETA_BACKEND", "auto")
if _requested not in ("auto", "compiled", "python"):
    raise ValueError(f"POPMETA_BACKEND must be auto|compiled|python, got {_requested!r}")

if _requested == "python":
    _K = _nn_numpy
    BACKEND = "python"
else:
    try:
        from . import _nn_kernels as _K  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        _K = _nn_numpy
        BACKEND = "python"


@dataclass(frozen=True)
class MLPParams:
    """Weights and biases; also used as the gradient/tangent container."""

    W1: np.ndarray  # (hidden, in_dim)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (out_dim, hidden)
    b2: np.ndarray  # (out_dim,)

    def __post_init__(self):
        h, din = self.W1.shape
        dout, h2 = self.W2.shape
        if h2 != h or self.b1.shape != (h,) or self.b2.shape != (dout,):
            raise ValueError("inconsistent parameter shapes")
        for arr in (self.W1, self.b1, self.W2, self.b2):
            if not np.all(np.isfinite(arr)):
                raise ValueError("parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[0]

    def arrays(self):
        return self.W1, self.b1, self.W2, self.b2


# A gradient has exactly the shape of the parameters it differentiates.
ParamGradient = MLPParams


def init_params(in_dim: int, hidden: int, out_dim: int, seed: int) -> MLPParams:
    """Glorot-uniform weights (limit sqrt(6/(fan_in+fan_out))), zero biases."""
    if in_dim < 1 or hidden < 1 or out_dim < 1:
        raise ValueError("all dimensions must be >= 1")
    rng = rng_for(seed, "init", in_dim, hidden, out_dim)
    lim1 = np.sqrt(6.0 / (in_dim + hidden))
    lim2 = np.sqrt(6.0 / (hidden + out_dim))
    return MLPParams(
        W1=rng.uniform(-lim1, lim1, size=(hidden, in_dim)),
        b1=np.zeros(hidden),
        W2=rng.uniform(-lim2, lim2, size=(out_dim, hidden)),
        b2=np.zeros(out_dim),
    )


def as_batch(batch):
    """Normalize a batch to (X, Y) float64 matrices.

    Accepts an (X, Y) pair of arrays or a list of (x, y) samples whose
    entries may be scalars or vectors.
    """
    if isinstance(batch, tuple) and len(batch) == 2 and not np.isscalar(batch[0]):
        X, Y = batch
    else:
        xs, ys = zip(*batch)
        X, Y = np.asarray(xs), np.asarray(ys)
    X = np.ascontiguousarray(np.atleast_1d(np.asarray(X, dtype=np.float64)))
    Y = np.ascontiguousarray(np.atleast_1d(np.asarray(Y, dtype=np.float64)))
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if Y.ndim == 1:
        Y = Y.reshape(-1, 1)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if X.shape[0] != Y.shape[0]:
        raise ValueError("inputs and targets differ in length")
    return X, Y


def forward(params: MLPParams, x) -> np.ndarray:
    """Evaluate the network on a single input vector (or scalar)."""
    X = np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(1, -1)
    if X.shape[1] != params.in_dim:
        raise ValueError(f"expected input dim {params.in_dim}, got {X.shape[1]}")
    return np.asarray(_K.forward(*params.arrays(), np.ascontiguousarray(X)))[0]


def forward_batch(params: MLPParams, X) -> np.ndarray:
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[1] != params.in_dim:
        raise ValueError(f"expected input dim {params.in_dim}, got {X.shape[1]}")
    return np.asarray(_K.forward(*params.arrays(), X))


def mse_loss(params: MLPParams, batch) -> float:
    """Mean over the batch of squared Euclidean prediction error."""
    X, Y = as_batch(batch)
    _check_dims(params, X, Y)
    return float(_K.loss(*params.arrays(), X, Y))


def grad(params: MLPParams, batch) -> ParamGradient:
    """Exact gradient of ``mse_loss`` with respect to every parameter."""
    X, Y = as_batch(batch)
    _check_dims(params, X, Y)
    _, gW1, gb1, gW2, gb2 = _K.loss_grad(*params.arrays(), X, Y)
    return MLPParams(np.asarray(gW1), np.asarray(gb1), np.asarray(gW2), np.asarray(gb2))


def loss_and_grad(params: MLPParams, batch):
    X, Y = as_batch(batch)
    _check_dims(params, X, Y)
    value, gW1, gb1, gW2, gb2 = _K.loss_grad(*params.arrays(), X, Y)
    g = MLPParams(np.asarray(gW1), np.asarray(gb1), np.asarray(gW2), np.asarray(gb2))
    return float(value), g


def hessian_vector_product(params: MLPParams, batch, v: ParamGradient) -> ParamGradient:
    """H @ v for the Hessian H of ``mse_loss`` at ``params`` (exact)."""
    X, Y = as_batch(batch)
    _check_dims(params, X, Y)
    if v.W1.shape != params.W1.shape or v.W2.shape != params.W2.shape:
        raise ValueError("tangent shape does not match parameters")
    hW1, hb1, hW2, hb2 = _K.loss_hvp(*params.arrays(), X, Y, *v.arrays())
    return MLPParams(np.asarray(hW1), np.asarray(hb1), np.asarray(hW2), np.asarray(hb2))


def axpy_update(params: MLPParams, g: ParamGradient, lr: float) -> MLPParams:
    """Functional update params - lr * g; the inputs are left untouched."""
    if g.W1.shape != params.W1.shape or g.W2.shape != params.W2.shape:
        raise ValueError("gradient shape does not match parameters")
    return MLPParams(
        params.W1 - lr * g.W1,
        params.b1 - lr * g.b1,
        params.W2 - lr * g.W2,
        params.b2 - lr * g.b2,
    )


def zeros_like(params: MLPParams) -> MLPParams:
    return MLPParams(
        np.zeros_like(params.W1),
        np.zeros_like(params.b1),
        np.zeros_like(params.W2),
        np.zeros_like(params.b2),
    )


def add(a: MLPParams, b: MLPParams) -> MLPParams:
    return MLPParams(a.W1 + b.W1, a.b1 + b.b1, a.W2 + b.W2, a.b2 + b.b2)


def scale(a: MLPParams, c: float) -> MLPParams:
    return MLPParams(c * a.W1, c * a.b1, c * a.W2, c * a.b2)


def dot(a: MLPParams, b: MLPParams) -> float:
    return float(
        (a.W1 * b.W1).sum() + (a.b1 * b.b1).sum() + (a.W2 * b.W2).sum() + (a.b2 * b.b2).sum()
    )


def flatten(params: MLPParams) -> np.ndarray:
    return np.concatenate([params.W1.ravel(), params.b1, params.W2.ravel(), params.b2])


def unflatten(vec: np.ndarray, like: MLPParams) -> MLPParams:
    sizes = [like.W1.size, like.b1.size, like.W2.size, like.b2.size]
    if vec.size != sum(sizes):
        raise ValueError("flat vector length mismatch")
    parts = np.split(np.asarray(vec, dtype=np.float64), np.cumsum(sizes)[:-1])
    return MLPParams(
        parts[0].reshape(like.W1.shape),
        parts[1].copy(),
        parts[2].reshape(like.W2.shape),
        parts[3].copy(),
    )


def _check_dims(params, X, Y):
    if X.shape[1] != params.in_dim:
        raise ValueError(f"expected input dim {params.in_dim}, got {X.shape[1]}")
    if Y.shape[1] != params.out_dim:
        raise ValueError(f"expected target dim {params.out_dim}, got {Y.shape[1]}")


def encode_array(arr: np.ndarray) -> dict:
    """Bit-exact JSON-able encoding: shape plus base64 of raw float64 bytes."""
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).copy()


def params_to_dict(params: MLPParams) -> dict:
    """Self-describing, bit-exact representation of the parameters."""
    return {name: encode_array(getattr(params, name)) for name in ("W1", "b1", "W2", "b2")}


def params_from_dict(obj: dict) -> MLPParams:
    return MLPParams(**{name: decode_array(obj[name]) for name in ("W1", "b1", "W2", "b2")})


def save_params(params: MLPParams, path):
    with open(path, "w") as fh:
        json.dump(params_to_dict(params), fh)


def load_params(path) -> MLPParams:
    with open(path) as fh:
        return params_from_dict(json.load(fh))
