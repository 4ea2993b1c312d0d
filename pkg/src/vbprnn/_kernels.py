"""Compiled inner time loops for open-loop forward and BPTT.

These mirror the numpy loops in ``net.run_batch`` and
``train.backward_batch`` operation for operation; the test-suite checks
agreement.  Set ``VBPRNN_PURE_NUMPY=1`` to disable them.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is optional
    numba = None

ENABLED = numba is not None and os.environ.get("VBPRNN_PURE_NUMPY", "") not in ("1", "true", "yes")


def _forward_open(z1, drive_x, rec, b_sigma, decay, inv_tau, eps, z, c, mu, log_var):
    # rec is (C, 2C): columns [:C] feed mu, columns [C:] feed log sigma^2
    B, T, C = z.shape
    acc = np.empty(2 * C)
    for b in range(B):
        for i in range(C):
            z[b, 0, i] = z1[b, i]
            c[b, 0, i] = np.tanh(z1[b, i])
        for t in range(1, T):
            acc[:] = 0.0
            for j in range(C):
                cj = c[b, t - 1, j]
                for k in range(2 * C):
                    acc[k] += cj * rec[j, k]
            for i in range(C):
                m = decay[i] * z[b, t - 1, i] + inv_tau[i] * (acc[i] + drive_x[b, t - 1, i])
                s = acc[C + i] + b_sigma[i]
                zt = m + np.exp(0.5 * s) * eps[b, t - 1, i]
                mu[b, t - 1, i] = m
                log_var[b, t - 1, i] = s
                z[b, t, i] = zt
                c[b, t, i] = np.tanh(zt)


def _backward(dc, c, mu, sigma, eps, rec, decay, inv_tau, kl_scale, g_pre, g_z1):
    B, T, C = c.shape
    gz = np.empty(C)
    gc = np.empty(C)
    for b in range(B):
        g_mu_next = np.zeros(C)
        for t in range(T - 1, -1, -1):
            for i in range(C):
                gc[i] = dc[b, t, i]
            if t < T - 1:
                for k in range(2 * C):
                    gk = g_pre[b, t, k]
                    if gk != 0.0:
                        for i in range(C):
                            gc[i] += gk * rec[k, i]
            for i in range(C):
                gz[i] = gc[i] * (1.0 - c[b, t, i] * c[b, t, i]) + decay[i] * g_mu_next[i]
            if t == 0:
                for i in range(C):
                    g_z1[b, i] = gz[i]
                break
            k = t - 1
            for i in range(C):
                s = sigma[b, k, i]
                g_mu = gz[i] - kl_scale * mu[b, k, i]
                g_pre[b, k, i] = g_mu * inv_tau[i]
                g_pre[b, k, C + i] = 0.5 * kl_scale * (1.0 - s * s) + 0.5 * gz[i] * eps[b, k, i] * s
                g_mu_next[i] = g_mu


if ENABLED:
    forward_open = numba.njit(cache=True)(_forward_open)
    backward = numba.njit(cache=True)(_backward)
else:  # pragma: no cover
    forward_open = backward = None
