"""Differentiable building blocks on NHWC float64 arrays.

Each forward returns (output, cache); each backward consumes the upstream
gradient plus the cache and returns gradients for inputs and parameters.
Convolutions are valid-mode, stride 1, expressed as a sum of nine shifted
matrix products, which keeps both passes plain matmuls.
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x: (B, H, W, Cin), w: (k, k, Cin, Cout), b: (Cout)."""
    k = w.shape[0]
    bsz, h, wd, _ = x.shape
    ho, wo = h - k + 1, wd - k + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"input {h}x{wd} too small for {k}x{k} kernel")
    out = np.tile(b, (bsz, ho, wo, 1))
    for di in range(k):
        for dj in range(k):
            out += x[:, di : di + ho, dj : dj + wo, :] @ w[di, dj]
    return out, (x, w)


def conv_backward(dout: np.ndarray, cache):
    x, w = cache
    k = w.shape[0]
    _, ho, wo, cout = dout.shape
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    flat_dout = dout.reshape(-1, cout)
    for di in range(k):
        for dj in range(k):
            patch = x[:, di : di + ho, dj : dj + wo, :]
            dw[di, dj] = patch.reshape(-1, patch.shape[-1]).T @ flat_dout
            dx[:, di : di + ho, dj : dj + wo, :] += dout @ w[di, dj].T
    db = flat_dout.sum(axis=0)
    return dx, dw, db


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    """Per-channel normalization over batch and spatial axes (training mode)."""
    mu = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, gamma), mu, var


def batchnorm_backward(dout: np.ndarray, cache):
    xhat, inv_std, gamma = cache
    n = dout.shape[0] * dout.shape[1] * dout.shape[2]
    dgamma = (dout * xhat).sum(axis=(0, 1, 2))
    dbeta = dout.sum(axis=(0, 1, 2))
    dxhat = dout * gamma
    dx = (
        inv_std
        / n
        * (
            n * dxhat
            - dxhat.sum(axis=(0, 1, 2))
            - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
        )
    )
    return dx, dgamma, dbeta


def batchnorm_inference(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    run_mean: np.ndarray,
    run_var: np.ndarray,
) -> np.ndarray:
    return gamma * (x - run_mean) / np.sqrt(run_var + BN_EPS) + beta


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout: np.ndarray, cache) -> np.ndarray:
    return dout * cache
