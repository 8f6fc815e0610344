"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly, unless the environment
variable ``LATENT_ANOMALY_DISABLE_NUMBA`` is set to a non-empty value other
than ``0``. Both paths are always importable as ``numpy_*`` / ``numba_*`` so
they can be compared against each other (see ``benchmarks/``).
"""
from __future__ import annotations

import os

import numpy as np


def numpy_mixture_eps(z, sqrt_ab, log_w, mu, sigma2):
    """Exact eps of a diagonal Gaussian mixture diffused to level ``sqrt_ab**2``.

    z: (N, D); log_w: (N, K) log mixture weights; mu, sigma2: (K, D).
    """
    ab = sqrt_ab * sqrt_ab
    var = ab * sigma2 + (1.0 - ab)                      # (K, D)
    diff = z[:, None, :] - sqrt_ab * mu[None, :, :]     # (N, K, D)
    logp = log_w - 0.5 * (np.sum(diff * diff / var, axis=2) + np.sum(np.log(var), axis=1))
    logp -= logp.max(axis=1, keepdims=True)
    r = np.exp(logp)
    r /= r.sum(axis=1, keepdims=True)
    score = -np.einsum("nk,nkd->nd", r, diff / var)
    return -np.sqrt(1.0 - ab) * score


def numpy_erode_2x2(a):
    """Min over the 2x2 window extending right/down, edges replicated."""
    p = np.pad(a, ((0, 1), (0, 1)), mode="edge")
    return np.minimum(np.minimum(p[:-1, :-1], p[1:, :-1]), np.minimum(p[:-1, 1:], p[1:, 1:]))


try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


if numba is not None:

    @numba.njit(cache=True, nogil=True)
    def numba_mixture_eps(z, sqrt_ab, log_w, mu, sigma2):
        n, d = z.shape
        k = mu.shape[0]
        ab = sqrt_ab * sqrt_ab
        var = ab * sigma2 + (1.0 - ab)
        logdet = np.empty(k)
        for j in range(k):
            s = 0.0
            for c in range(d):
                s += np.log(var[j, c])
            logdet[j] = s
        out = np.empty((n, d))
        logp = np.empty(k)
        noise_scale = np.sqrt(1.0 - ab)
        for i in range(n):
            top = -np.inf
            for j in range(k):
                q = 0.0
                for c in range(d):
                    df = z[i, c] - sqrt_ab * mu[j, c]
                    q += df * df / var[j, c]
                lp = log_w[i, j] - 0.5 * (q + logdet[j])
                logp[j] = lp
                if lp > top:
                    top = lp
            tot = 0.0
            for j in range(k):
                logp[j] = np.exp(logp[j] - top)
                tot += logp[j]
            for c in range(d):
                acc = 0.0
                for j in range(k):
                    acc += logp[j] * (z[i, c] - sqrt_ab * mu[j, c]) / var[j, c]
                out[i, c] = noise_scale * acc / tot
        return out

    @numba.njit(cache=True, nogil=True)
    def numba_erode_2x2(a):
        h, w = a.shape
        out = np.empty_like(a)
        for i in range(h):
            i2 = min(i + 1, h - 1)
            for j in range(w):
                j2 = min(j + 1, w - 1)
                out[i, j] = min(min(a[i, j], a[i2, j]), min(a[i, j2], a[i2, j2]))
        return out

else:  # pragma: no cover
    numba_mixture_eps = numpy_mixture_eps
    numba_erode_2x2 = numpy_erode_2x2


def _use_numba() -> bool:
    flag = os.environ.get("LATENT_ANOMALY_DISABLE_NUMBA", "")
    return numba is not None and flag in ("", "0")


USE_NUMBA = _use_numba()
BACKEND = "numba" if USE_NUMBA else "numpy"

if USE_NUMBA:
    _mixture_eps = numba_mixture_eps
    _erode = numba_erode_2x2
else:
    _mixture_eps = numpy_mixture_eps
    _erode = numpy_erode_2x2


def mixture_eps(z, sqrt_ab, log_w, mu, sigma2):
    z = np.ascontiguousarray(z, dtype=np.float64)
    log_w = np.ascontiguousarray(np.broadcast_to(log_w, (z.shape[0], mu.shape[0])), dtype=np.float64)
    return _mixture_eps(z, float(sqrt_ab), log_w, np.ascontiguousarray(mu, dtype=np.float64),
                        np.ascontiguousarray(sigma2, dtype=np.float64))


def erode_2x2(a):
    return _erode(np.ascontiguousarray(a, dtype=np.float64))
