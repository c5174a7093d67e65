"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``PFDLAB_DISABLE_NUMBA=1`` to force the numpy implementations (also used
automatically when numba is not importable).  Both paths are kept importable
under explicit names so tests and the benchmark can compare them.
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("PFDLAB_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")


# -- isotropic Gaussian mixture: score and log-density -----------------------


def iso_mixture_numpy(x, sqrt_alpha, nu, means, s2, logw):
    """Score and log-density of sum_k w_k N(sqrt_alpha_i mu_k, (alpha_i s2_k + nu_i) I) at x_i.

    x: (n, d); sqrt_alpha, nu: (n,); means: (K, d); s2, logw: (K,).
    """
    n, d = x.shape
    alpha = sqrt_alpha * sqrt_alpha
    var = alpha[:, None] * s2[None, :] + nu[:, None]  # (n, K)
    diff = x[:, None, :] - sqrt_alpha[:, None, None] * means[None, :, :]  # (n, K, d)
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    logp = logw[None, :] - 0.5 * sq / var - 0.5 * d * np.log(2.0 * np.pi * var)
    m = logp.max(axis=1, keepdims=True)
    r = np.exp(logp - m)
    tot = r.sum(axis=1, keepdims=True)
    resp = r / tot
    score = -np.einsum("nk,nkd->nd", resp / var, diff)
    logdens = m[:, 0] + np.log(tot[:, 0])
    return score, logdens


def _iso_mixture_loop(x, sqrt_alpha, nu, means, s2, logw):
    n, d = x.shape
    K = means.shape[0]
    score = np.zeros((n, d))
    logdens = np.empty(n)
    logp = np.empty(K)
    var = np.empty(K)
    log2pi = np.log(2.0 * np.pi)
    for i in range(n):
        a = sqrt_alpha[i]
        mx = -np.inf
        for k in range(K):
            v = a * a * s2[k] + nu[i]
            var[k] = v
            sq = 0.0
            for j in range(d):
                dj = x[i, j] - a * means[k, j]
                sq += dj * dj
            lp = logw[k] - 0.5 * sq / v - 0.5 * d * (log2pi + np.log(v))
            logp[k] = lp
            if lp > mx:
                mx = lp
        tot = 0.0
        for k in range(K):
            logp[k] = np.exp(logp[k] - mx)
            tot += logp[k]
        for k in range(K):
            wk = logp[k] / (tot * var[k])
            for j in range(d):
                score[i, j] -= wk * (x[i, j] - a * means[k, j])
        logdens[i] = mx + np.log(tot)
    return score, logdens


# -- Gaussian KDE evaluated on a set of grid points ---------------------------


def kde_numpy(grid, samples, h, chunk=4096):
    """Unnormalized sum_j exp(-|g - s_j|^2 / (2 h^2)) at each grid point."""
    out = np.empty(grid.shape[0])
    inv = 0.5 / (h * h)
    for lo in range(0, grid.shape[0], chunk):
        g = grid[lo : lo + chunk]
        d2 = ((g[:, None, :] - samples[None, :, :]) ** 2).sum(axis=-1)
        out[lo : lo + chunk] = np.exp(-d2 * inv).sum(axis=1)
    return out


def _kde_loop(grid, samples, h):
    m, d = grid.shape
    n = samples.shape[0]
    out = np.zeros(m)
    inv = 0.5 / (h * h)
    for i in range(m):
        acc = 0.0
        for j in range(n):
            sq = 0.0
            for k in range(d):
                dk = grid[i, k] - samples[j, k]
                sq += dk * dk
            acc += np.exp(-sq * inv)
        out[i] = acc
    return out


if HAVE_NUMBA:
    iso_mixture_numba = numba.njit(cache=True, fastmath=False)(_iso_mixture_loop)
    kde_numba = numba.njit(cache=True)(_kde_loop)
else:  # pragma: no cover
    iso_mixture_numba = None
    kde_numba = None


def iso_mixture(x, sqrt_alpha, nu, means, s2, logw):
    x = np.ascontiguousarray(x, dtype=np.float64)
    args = (
        x,
        np.ascontiguousarray(sqrt_alpha, dtype=np.float64),
        np.ascontiguousarray(nu, dtype=np.float64),
        np.ascontiguousarray(means, dtype=np.float64),
        np.ascontiguousarray(s2, dtype=np.float64),
        np.ascontiguousarray(logw, dtype=np.float64),
    )
    if USE_NUMBA:
        return iso_mixture_numba(*args)
    return iso_mixture_numpy(*args)


def kde(grid, samples, h):
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    if USE_NUMBA:
        return kde_numba(grid, samples, float(h))
    return kde_numpy(grid, samples, float(h))
