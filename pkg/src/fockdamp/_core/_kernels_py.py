"""Pure NumPy reference versions of the compiled kernels.

Signatures and results match ``_kernels.pyx`` to rounding.
"""
import numpy as np

TINY = 1e-300


def filter_forward(times, phase_idx, outcome, t_start, prior, lam, V, W, table):
    """Alternate spectral propagation and Bayes updates along one sequence.

    Returns ``(posteriors, fail)`` where ``posteriors[i]`` is the distribution
    right after detection ``i`` and ``fail`` is the index of the first
    detection whose evidence fell below ``TINY`` (``-1`` if none).  Rows from
    ``fail`` on are left at zero.
    """
    n = times.shape[0]
    D = prior.shape[0]
    out = np.zeros((n, D))
    p = np.array(prior, dtype=float)
    t_prev = float(t_start)
    for i in range(n):
        dt = times[i] - t_prev
        if dt > 0:
            p = V @ (np.exp(lam * dt) * (W @ p))
            np.maximum(p, 0.0, out=p)
        t_prev = times[i]
        p = p * table[phase_idx[i], outcome[i]]
        z = p.sum()
        if not z >= TINY:
            return out, i
        p /= z
        out[i] = p
    return out, -1


def fixed_point(log_products, seed, iterations):
    """Iterate ``P -> mean_w[P * Pi_w / <P, Pi_w>]`` starting from ``seed``.

    Returns ``(P, tv_steps, fail)``; ``tv_steps[k]`` is the total-variation
    distance between iterates ``k`` and ``k+1``, ``fail`` the first window
    whose normalizer vanished (``-1`` if none).
    """
    L = np.asarray(log_products, dtype=float)
    M = L.shape[0]
    P = np.array(seed, dtype=float)
    tv = np.zeros(iterations)
    if M == 0:
        return P, tv, -1
    Pi = np.exp(L - L.max(axis=1, keepdims=True))
    for k in range(iterations):
        z = Pi @ P
        bad = np.flatnonzero(~(z >= TINY))
        if bad.size:
            return P, tv, int(bad[0])
        new = P * (Pi / z[:, None]).sum(axis=0) / M
        new /= new.sum()
        tv[k] = 0.5 * np.abs(new - P).sum()
        P = new
    return P, tv, -1
