"""Pure-numpy kernels for the two-layer tanh network.

Fallback backend used when the compiled extension (``popmeta._nn_kernels``)
is unavailable.  The function signatures are identical in both backends;
all arrays are C-contiguous float64.

Shapes: W1 (h, d_in), b1 (h,), W2 (d_out, h), b2 (d_out,);
X (n, d_in), Y (n, d_out).
"""

import numpy as np


def forward(W1, b1, W2, b2, X):
    A = np.tanh(X @ W1.T + b1)
    return A @ W2.T + b2


def loss(W1, b1, W2, b2, X, Y):
    E = forward(W1, b1, W2, b2, X) - Y
    return float((E * E).sum() / X.shape[0])


def loss_grad(W1, b1, W2, b2, X, Y):
    """Mean-squared-error loss and its exact gradient via backprop."""
    n = X.shape[0]
    A = np.tanh(X @ W1.T + b1)
    E = A @ W2.T + b2 - Y
    R = (2.0 / n) * E                  # dL/d(out), per sample
    gW2 = R.T @ A
    gb2 = R.sum(axis=0)
    dZ = (1.0 - A * A) * (R @ W2)      # tanh' = 1 - a^2
    gW1 = dZ.T @ X
    gb1 = dZ.sum(axis=0)
    return float((E * E).sum() / n), gW1, gb1, gW2, gb2


def maml_contrib(W1, b1, W2, b2, X, Y, tr_idx, m_idx, alpha, second_order,
                 accW1, accb1, accW2, accb2):
    """One task's share of the meta update; adds the gradient onto acc*.

    Inner step on X[tr_idx], meta loss/gradient on X[m_idx] at the stepped
    parameters, optional second-order correction g - alpha * (H @ g).
    Returns the post-inner-update meta-batch loss.
    """
    Xtr, Ytr = X[tr_idx], Y[tr_idx]
    _, gW1, gb1, gW2, gb2 = loss_grad(W1, b1, W2, b2, Xtr, Ytr)
    aW1, ab1 = W1 - alpha * gW1, b1 - alpha * gb1
    aW2, ab2 = W2 - alpha * gW2, b2 - alpha * gb2
    value, mW1, mb1, mW2, mb2 = loss_grad(aW1, ab1, aW2, ab2, X[m_idx], Y[m_idx])
    if second_order:
        hW1, hb1, hW2, hb2 = loss_hvp(W1, b1, W2, b2, Xtr, Ytr, mW1, mb1, mW2, mb2)
        mW1, mb1 = mW1 - alpha * hW1, mb1 - alpha * hb1
        mW2, mb2 = mW2 - alpha * hW2, mb2 - alpha * hb2
    accW1 += mW1
    accb1 += mb1
    accW2 += mW2
    accb2 += mb2
    return value


def gd_adapt(W1, b1, W2, b2, X, Y, steps, alpha):
    """``steps`` plain gradient-descent updates on (X, Y), functionally."""
    for _ in range(steps):
        _, gW1, gb1, gW2, gb2 = loss_grad(W1, b1, W2, b2, X, Y)
        W1, b1 = W1 - alpha * gW1, b1 - alpha * gb1
        W2, b2 = W2 - alpha * gW2, b2 - alpha * gb2
    return W1, b1, W2, b2


def loss_hvp(W1, b1, W2, b2, X, Y, vW1, vb1, vW2, vb2):
    """Exact Hessian-vector product by forward-over-reverse differentiation.

    Propagates the directional derivative along v through the same forward
    and backward passes as ``loss_grad``; no finite differences involved.
    """
    n = X.shape[0]
    A = np.tanh(X @ W1.T + b1)
    T = 1.0 - A * A
    E = A @ W2.T + b2 - Y

    RA = T * (X @ vW1.T + vb1)                 # tangent of hidden activations
    RE = A @ vW2.T + RA @ W2.T + vb2           # tangent of the output error

    R = (2.0 / n) * E
    RR = (2.0 / n) * RE

    hW2 = RR.T @ A + R.T @ RA
    hb2 = RR.sum(axis=0)

    dA = R @ W2
    RdA = R @ vW2 + RR @ W2
    RdZ = T * RdA - 2.0 * (A * RA) * dA        # tangent of dL/dz
    hW1 = RdZ.T @ X
    hb1 = RdZ.sum(axis=0)
    return hW1, hb1, hW2, hb2
