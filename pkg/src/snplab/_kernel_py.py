"""Pure-numpy two-tower loss/gradient kernel.

Reference path and import-time fallback for the compiled ``_kernel`` module;
both expose ``loss_and_grad`` with the same signature and semantics.
"""

import numpy as np


def _unpack(theta, dims, offset):
    layers = []
    for l in range(len(dims) - 1):
        n_in, n_out = dims[l], dims[l + 1]
        W = theta[offset:offset + n_out * n_in].reshape(n_out, n_in)
        offset += n_out * n_in
        b = theta[offset:offset + n_out]
        offset += n_out
        layers.append((W, b))
    return layers, offset


def _forward(layers, a, relu):
    acts = [a]
    last = len(layers) - 1
    for l, (W, b) in enumerate(layers):
        z = a @ W.T + b
        if l < last:
            a = np.maximum(z, 0.0) if relu else np.tanh(z)
        else:
            a = z
        acts.append(a)
    return acts


def _backward(layers, acts, delta, relu, grads):
    # grads: list of (dW, db) views into the flat gradient, filled in place
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        a_in = acts[l]
        dW, db = grads[l]
        dW[...] = delta.T @ a_in
        db[...] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ W
            if relu:
                delta = delta * (a_in > 0.0)
            else:
                delta = delta * (1.0 - a_in * a_in)


def loss_and_grad(theta, x_dims, d_dims, relu, temperature, X, labels, D):
    """Mean cross-entropy of the cosine-similarity softmax and its gradient.

    Returns ``(loss, grad, bad)`` where ``bad`` is the index of the first
    sample whose loss is non-finite, or -1.  Raises ``ZeroDivisionError``
    when an embedding has zero norm.
    """
    theta = np.asarray(theta, dtype=np.float64)
    x_layers, off = _unpack(theta, x_dims, 0)
    d_layers, _ = _unpack(theta, d_dims, off)

    x_acts = _forward(x_layers, X, relu)
    d_acts = _forward(d_layers, D, relu)
    U, V = x_acts[-1], d_acts[-1]
    nu = np.sqrt(np.einsum("ij,ij->i", U, U))
    nv = np.sqrt(np.einsum("ij,ij->i", V, V))
    if np.any(nu == 0.0) or np.any(nv == 0.0):
        raise ZeroDivisionError("zero-norm embedding")
    Uh = U / nu[:, None]
    Vh = V / nv[:, None]
    Z = temperature * (Uh @ Vh.T)

    n = X.shape[0]
    rows = np.arange(n)
    m = Z.max(axis=1)
    E = np.exp(Z - m[:, None])
    s = E.sum(axis=1)
    per_sample = m + np.log(s) - Z[rows, labels]
    finite = np.isfinite(per_sample)
    if not finite.all():
        return float("nan"), None, int(np.argmin(finite))
    loss = float(per_sample.sum() / n)

    G = E / s[:, None]
    G[rows, labels] -= 1.0
    G /= n
    dS = temperature * G
    dUh = dS @ Vh
    dVh = dS.T @ Uh
    dU = (dUh - np.einsum("ij,ij->i", dUh, Uh)[:, None] * Uh) / nu[:, None]
    dV = (dVh - np.einsum("ij,ij->i", dVh, Vh)[:, None] * Vh) / nv[:, None]

    grad = np.zeros_like(theta)
    gx, off = _unpack(grad, x_dims, 0)
    gd, _ = _unpack(grad, d_dims, off)
    _backward(x_layers, x_acts, dU, relu, gx)
    _backward(d_layers, d_acts, dV, relu, gd)
    return loss, grad, -1
