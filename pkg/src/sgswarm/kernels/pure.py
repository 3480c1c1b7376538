"""NumPy reference implementation of the dense-net kernels.

Same call surface as the compiled extension; used as the import-time
fallback and as the ground truth in the backend-equivalence tests.
"""

import numpy as np

LEAKY_SLOPE = 0.01

OUT_NONE = 0
OUT_TANH = 1


def _leaky(z):
    return np.where(z >= 0.0, z, LEAKY_SLOPE * z)


def _leaky_grad(z):
    return np.where(z >= 0.0, 1.0, LEAKY_SLOPE)


def mlp_forward(Ws, bs, X, out_act):
    """Forward pass. X is (B, d_in); returns (B, d_out)."""
    A = X
    last = len(Ws) - 1
    for l, (W, b) in enumerate(zip(Ws, bs)):
        Z = A @ W.T + b
        if l < last:
            A = _leaky(Z)
        elif out_act == OUT_TANH:
            A = np.tanh(Z)
        else:
            A = Z
    return A


def mlp_forward_cached(Ws, bs, X, out_act):
    """Forward pass keeping layer inputs and pre-activations for backward.

    Returns (Y, As, Zs) where As[l] is the input to layer l (As[0] = X)
    and Zs[l] the pre-activation of layer l.
    """
    As = [X]
    Zs = []
    A = X
    last = len(Ws) - 1
    for l, (W, b) in enumerate(zip(Ws, bs)):
        Z = A @ W.T + b
        Zs.append(Z)
        if l < last:
            A = _leaky(Z)
            As.append(A)
        elif out_act == OUT_TANH:
            A = np.tanh(Z)
        else:
            A = Z
    return A, As, Zs


def mlp_backward(Ws, As, Zs, Y, dY, out_act):
    """Backprop from output gradient dY (B, d_out).

    Returns (dWs, dbs, dX); gradients are sums over the batch.
    """
    if out_act == OUT_TANH:
        dZ = dY * (1.0 - Y * Y)
    else:
        dZ = np.asarray(dY, dtype=np.float64)
    dWs = [None] * len(Ws)
    dbs = [None] * len(Ws)
    for l in range(len(Ws) - 1, -1, -1):
        dWs[l] = dZ.T @ As[l]
        dbs[l] = dZ.sum(axis=0)
        dA = dZ @ Ws[l]
        if l > 0:
            dZ = dA * _leaky_grad(Zs[l - 1])
    return dWs, dbs, dA


def sgd_step(params, grads, lr):
    """In-place w -= lr * g over a list of arrays."""
    for p, g in zip(params, grads):
        p -= lr * g


def adam_step(params, grads, ms, vs, t, lr, beta1, beta2, eps):
    """In-place bias-corrected Adam update; t is the 1-based step count."""
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, ms, vs):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
