"""Parameter extraction from reconstructed photon-number timelines."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.stats import poisson

from .ensemble import DistributionTimeline
from .numkernel import GeneratorMatrix, PhotonDistribution, _as_probs, _as_rates

__all__ = [
    "ExpFit",
    "diagonal_law",
    "FitError",
    "FitResult",
    "fit_exponential_mean",
    "fit_generator",
    "fit_poisson",
    "fock_lifetimes",
    "predict_curves",
]


class FitError(RuntimeError):
    pass


class FitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ExpFit:
    time_constant: float
    offset: float
    amplitude: float
    rms_residual: float
    stderr: tuple = (math.nan, math.nan, math.nan)  # offset, amplitude, time constant
    flags: tuple = ()

    def __call__(self, t):
        return self.offset + self.amplitude * np.exp(-np.asarray(t) / self.time_constant)


def fit_exponential_mean(timeline: DistributionTimeline, t_max: float | None = None) -> ExpFit:
    """Least-squares fit of ``<n>(t) = offset + amplitude * exp(-t / time_constant)``."""
    ok = timeline.valid()
    if t_max is not None:
        ok &= timeline.grid <= t_max
    t = timeline.grid[ok]
    y = timeline.mean()[ok]
    return fit_exponential(t, y)


def fit_exponential(t, y) -> ExpFit:
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    if t.size < 4:
        raise FitError("need at least 4 points for an exponential fit")
    scale = max(np.abs(y).max(), 1e-300)
    if np.ptp(y) <= 1e-12 * scale:
        warnings.warn("constant mean photon number: time constant unidentifiable", FitWarning,
                      stacklevel=2)
        return ExpFit(math.inf, float(y.mean()), 0.0, float(np.std(y)),
                      flags=("time_constant_unidentifiable",))
    offset0 = y[-1] - 0.05 * (y[0] - y[-1])
    amp0 = y[0] - offset0
    rel = (y - offset0) / amp0
    use = rel > 0.05
    if use.sum() >= 2:
        slope = np.polyfit(t[use] - t[0], np.log(rel[use]), 1)[0]
        tau0 = -1.0 / slope if slope < 0 else np.ptp(t) / 3
    else:
        tau0 = np.ptp(t) / 3
    amp0 *= math.exp(t[0] / tau0)

    def resid(x):
        return x[0] + x[1] * np.exp(-t / x[2]) - y

    res = optimize.least_squares(resid, [offset0, amp0, tau0], method="lm",
                                 xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
    if not res.success:
        raise FitError(f"exponential fit did not converge: {res.message}")
    offset, amp, tau = res.x
    if tau <= 0:
        raise FitError(f"fitted time constant is negative ({tau:.4g} s)")
    dof = max(t.size - 3, 1)
    s2 = 2 * res.cost / dof
    cov = linalg.pinv(res.jac.T @ res.jac) * s2
    return ExpFit(float(tau), float(offset), float(amp),
                  float(np.sqrt(np.mean(res.fun ** 2))),
                  tuple(float(v) for v in np.sqrt(np.abs(np.diag(cov)))))


def _truncated_poisson(mu: float, D: int) -> np.ndarray:
    if mu <= 0:
        return np.eye(D)[0]
    p = poisson.pmf(np.arange(D), mu)
    return p / p.sum()


def fit_poisson(P) -> tuple[float, float]:
    """Maximum-likelihood truncated-Poisson mean and its total-variation misfit.

    The likelihood equation of the truncated family equates the truncated
    Poisson mean with the mean of ``P``.
    """
    p = np.asarray(_as_probs(P), float)
    p = p / p.sum()
    D = p.size
    target = float(np.dot(np.arange(D), p))

    def tmean(mu):
        return float(np.dot(np.arange(D), _truncated_poisson(mu, D)))

    if target <= 0:
        mu = 0.0
    else:
        hi = max(1.0, target)
        while tmean(hi) < target and hi < 1e6:
            hi *= 2
        if tmean(hi) < target:
            mu = hi
        else:
            mu = optimize.brentq(lambda m: tmean(m) - target, 0.0, hi, xtol=1e-14, rtol=1e-15)
    tv = 0.5 * float(np.abs(p - _truncated_poisson(mu, D)).sum())
    return float(mu), tv


# --- generator fit -------------------------------------------------------


@dataclass(eq=False)
class FitResult:
    K_hat: GeneratorMatrix
    initial_dists: dict
    residual: float
    K_stderr: np.ndarray
    initial_stderr: dict = field(default_factory=dict)
    stage_log: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    constrained: bool = True
    dof: int = 0

    @property
    def uncertainties(self) -> dict:
        return {"K": self.K_stderr, "initial": self.initial_stderr}


def _expm_series(K: np.ndarray, times: np.ndarray) -> np.ndarray:
    """``exp(K t)`` for each time; repeated products when the grid is uniform."""
    times = np.asarray(times, float)
    D = K.shape[0]
    out = np.empty((times.size, D, D))
    if times.size >= 2:
        dt = times[1] - times[0]
        steps = times / dt if dt > 0 else None
        if steps is not None and np.allclose(steps, np.round(steps), atol=1e-9) and steps[0] >= 0:
            steps = np.round(steps).astype(int)
            if np.all(np.diff(steps) == 1):
                E = linalg.expm(K * dt)
                cur = linalg.expm(K * times[0]) if steps[0] else np.eye(D)
                for g in range(times.size):
                    out[g] = cur
                    cur = E @ cur
                return out
    for g, t in enumerate(times):
        out[g] = linalg.expm(K * t)
    return out


class _StageModel:
    """Parameter vector <-> (K block, initial vectors) for one fit stage."""

    def __init__(self, size, n0s, constrained):
        self.size = size
        self.n0s = list(n0s)
        self.constrained = constrained
        if constrained:
            self.k_index = [(a, b) for b in range(size) for a in range(size) if a != b]
        else:
            self.k_index = [(a, b) for b in range(size) for a in range(size)]
        self.nk = len(self.k_index)
        self.p_index = [(n0, n) for n0 in self.n0s for n in range(size)]

    @property
    def n_params(self):
        return self.nk + len(self.p_index)

    def K(self, x):
        K = np.zeros((self.size, self.size))
        for v, (a, b) in zip(x[: self.nk], self.k_index):
            K[a, b] = v
        if self.constrained:
            K[np.diag_indices(self.size)] = -K.sum(axis=0)
        return K

    def initial(self, x):
        P0 = {n0: np.zeros(self.size) for n0 in self.n0s}
        for v, (n0, n) in zip(x[self.nk:], self.p_index):
            P0[n0][n] = v
        return P0

    def pack(self, K, P0):
        xk = [K[a, b] for a, b in self.k_index]
        xp = [P0[n0][n] for n0, n in self.p_index]
        return np.array(xk + xp, float)

    def bounds(self):
        lo = np.concatenate([np.zeros(self.nk) if self.constrained else np.full(self.nk, -np.inf),
                             np.zeros(len(self.p_index))])
        hi = np.concatenate([np.full(self.nk, np.inf), np.ones(len(self.p_index))])
        return lo, hi

    def dK(self, i):
        """``dK/dx_i`` for a generator parameter."""
        a, b = self.k_index[i]
        E = np.zeros((self.size, self.size))
        E[a, b] = 1.0
        if self.constrained:
            E[b, b] -= 1.0
        return E


@dataclass
class _FitData:
    n0s: list
    times: dict
    values: dict  # n0 -> (G, D) observed
    sqrt_w: dict  # n0 -> (G, D)


def _prepare(ensembles, fit_window, var_floor, min_count):
    n0s = sorted(ensembles)
    times, values, sqrt_w = {}, {}, {}
    for n0 in n0s:
        tl = ensembles[n0]
        ok = tl.valid(min_count) & (tl.grid <= fit_window + 1e-12)
        if ok.sum() < 2:
            continue
        t = tl.grid[ok]
        y = tl.table[ok]
        var = np.maximum(y * (1 - y), var_floor)
        times[n0] = t
        values[n0] = y
        sqrt_w[n0] = np.sqrt(tl.counts[ok][:, None] / var)
    return _FitData([n for n in n0s if n in times], times, values, sqrt_w)


def _residuals(x, model: _StageModel, data: _FitData):
    K = model.K(x)
    P0 = model.initial(x)
    s = model.size
    out = []
    for n0 in model.n0s:
        E = _expm_series(K, data.times[n0])
        pred = E @ P0[n0]
        out.append(((pred - data.values[n0][:, :s]) * data.sqrt_w[n0][:, :s]).ravel())
    return np.concatenate(out)


def sensitivity_jacobian(x, model: _StageModel, data: _FitData) -> np.ndarray:
    """Jacobian of the weighted residuals by forward sensitivities.

    ``S(t) = d/dx exp(K t) P0`` solves ``dS/dt = K S + (dK/dx) P``, ``S(0) = 0``;
    the pair ``(P, S)`` is advanced exactly with the block generator
    ``[[K, dK/dx], [0, K]]``.
    """
    K = model.K(x)
    P0 = model.initial(x)
    s = model.size
    rows = []
    for n0 in model.n0s:
        t = data.times[n0]
        w = data.sqrt_w[n0][:, :s]
        J = np.zeros((t.size * s, model.n_params))
        for i in range(model.nk):
            big = np.zeros((2 * s, 2 * s))
            big[:s, :s] = K
            big[s:, s:] = K
            big[:s, s:] = model.dK(i)
            Es = _expm_series(big, t)
            J[:, i] = ((Es[:, :s, s:] @ P0[n0]) * w).ravel()
        E = _expm_series(K, t)
        for j, (m0, n) in enumerate(model.p_index):
            if m0 == n0:
                J[:, model.nk + j] = (E[:, :, n] * w).ravel()
        rows.append(J)
    return np.vstack(rows)


def _slope(t, y):
    if t.size < 2:
        return 0.0
    return float(np.polyfit(t, y, 1)[0])


def _stage1_seed(data: _FitData, constrained: bool):
    n_seed = 4
    t1, y1 = data.times[1][:n_seed], data.values[1][:n_seed]
    kappa = _slope(t1, y1[:, 0]) / max(y1[0, 1], 0.1)
    if not kappa > 0:
        kappa = -_slope(t1, y1[:, 1]) / max(y1[0, 1], 0.1)
    kappa = max(kappa, 1e-6)
    up = 0.0
    if 0 in data.times:
        t0, y0 = data.times[0][:n_seed], data.values[0][:n_seed]
        up = _slope(t0, y0[:, 1]) / max(y0[0, 0], 0.1)
    up = min(max(up, 1e-3 * kappa), kappa)
    return kappa, up / kappa


def fit_generator(
    ensembles: dict,
    fit_window: float = 0.020,
    constrained: bool = True,
    var_floor: float = 0.03,
    min_count: int = 1,
    jac: str = "2-point",
    max_nfev: int = 100,
) -> FitResult:
    """Staged weighted least-squares fit of the damping generator.

    Stage ``s`` fits the generator restricted to photon numbers ``0..s`` on
    the ensembles with ``n0 <= s`` (data rows ``n <= s``), re-optimizing all
    earlier parameters.  Each stage gets at most ``max_nfev`` function
    evaluations; a stage that runs out is flagged.  In constrained mode the off-diagonal rates are
    bounded below by zero and each diagonal entry is minus its column's
    off-diagonal sum; otherwise every entry of the block is free.
    """
    if jac not in ("2-point", "3-point", "sensitivity"):
        raise ValueError(f"unknown jacobian mode {jac!r}")
    data = _prepare(ensembles, fit_window, var_floor, min_count)
    if not {0, 1} <= set(data.n0s):
        raise FitError("ensembles for n0 = 0 and n0 = 1 with data in the fit window are required")
    D = next(iter(ensembles.values())).table.shape[1]
    n_max = D - 1
    kappa, nb = _stage1_seed(data, constrained)
    K_full = np.zeros((D, D))
    for m in range(D):
        if m > 0:
            K_full[m - 1, m] = kappa * (1 + nb) * m
        if m < n_max:
            K_full[m + 1, m] = kappa * nb * (m + 1)
    off_seed = 1e-3 * kappa
    K_full[(K_full == 0) & ~np.eye(D, dtype=bool)] = off_seed
    K_full[np.diag_indices(D)] = -(K_full.sum(axis=0) - np.diag(K_full))
    P0_full = {n0: np.clip(data.values[n0][0].copy(), 0.0, 1.0) for n0 in data.n0s}

    stage_log, flags = [], []
    jac_fn = sensitivity_jacobian if jac == "sensitivity" else jac
    res = model = None
    for s in range(1, n_max + 1):
        size = s + 1
        n0s = [n0 for n0 in data.n0s if n0 <= s]
        model = _StageModel(size, n0s, constrained)
        x0 = model.pack(K_full[:size, :size], {n0: P0_full[n0][:size] for n0 in n0s})
        lo, hi = model.bounds()
        x0 = np.clip(x0, lo, hi)
        res = optimize.least_squares(
            _residuals, x0, jac=jac_fn, bounds=(lo, hi), method="trf",
            x_scale="jac", args=(model, data), xtol=1e-12, ftol=1e-12, gtol=1e-12,
            max_nfev=max_nfev,
        )
        cost = 2 * res.cost
        stage_log.append(
            f"stage {s}: states 0..{s}, ensembles {n0s}, {model.n_params} parameters, "
            f"weighted SSR {cost:.6g}, nfev {res.nfev}, status {res.status}")
        if res.status <= 0:
            flags.append(f"stage {s} did not converge: {res.message}")
            warnings.warn(f"stage {s} of the generator fit did not converge", FitWarning,
                          stacklevel=2)
        K_full[:size, :size] = model.K(res.x)
        for n0, p in model.initial(res.x).items():
            P0_full[n0][:size] = p

    x = res.x
    m = res.fun.size
    dof = max(m - model.n_params, 1)
    s2 = 2 * res.cost / dof
    J = res.jac if jac != "sensitivity" else sensitivity_jacobian(x, model, data)
    cov = linalg.pinv(J.T @ J) * s2
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    K_se = np.zeros((D, D))
    for i, (a, b) in enumerate(model.k_index):
        K_se[a, b] = se[i]
    if constrained:
        for b in range(D):
            idx = [i for i, (_, c) in enumerate(model.k_index) if c == b]
            K_se[b, b] = math.sqrt(max(cov[np.ix_(idx, idx)].sum(), 0.0))
        active = [model.k_index[i] for i in range(model.nk) if x[i] <= 1e-12 * max(kappa, 1.0)]
        if active:
            flags.append("nonnegativity active at " + ", ".join(f"K[{a}][{b}]" for a, b in active))
    init_se = {n0: np.zeros(D) for n0 in model.n0s}
    for j, (n0, n) in enumerate(model.p_index):
        init_se[n0][n] = se[model.nk + j]

    K_hat = GeneratorMatrix(_clean_columns(K_full) if constrained else K_full,
                            validate=constrained)
    initial = {}
    for n0 in model.n0s:
        p = np.clip(P0_full[n0], 0.0, None)
        initial[n0] = PhotonDistribution(p / p.sum())
    return FitResult(K_hat, initial, float(2 * res.cost), K_se, init_se, stage_log, flags,
                     constrained, dof)


def _clean_columns(K: np.ndarray) -> np.ndarray:
    K = np.array(K, float)
    off = K.copy()
    off[np.diag_indices_from(off)] = 0.0
    off = np.clip(off, 0.0, None)
    off[np.diag_indices_from(off)] = -off.sum(axis=0)
    return off


def predict_curves(fit: FitResult, horizon: float = 0.400, grid=None) -> dict:
    """Model curves from the fitted generator and initial distributions."""
    if grid is None:
        grid = np.linspace(0.0, horizon, int(round(horizon / 2e-3)) + 1)
    grid = np.asarray(grid, float)
    K = _as_rates(fit.K_hat)
    E = _expm_series(K, grid)
    out = {}
    for n0, P0 in fit.initial_dists.items():
        table = E @ _as_probs(P0)
        out[n0] = DistributionTimeline(grid, table, np.zeros(grid.size, np.int64))
    return out


def fock_lifetimes(fit) -> list[tuple[int, float]]:
    """``(n, -1/K[n][n])`` for every photon number; non-negative diagonals give
    an infinite lifetime and a warning."""
    K = _as_rates(fit.K_hat if isinstance(fit, FitResult) else fit)
    out = []
    bad = []
    for n in range(K.shape[0]):
        d = K[n, n]
        if d >= 0:
            bad.append(n)
            out.append((n, math.inf))
        else:
            out.append((n, -1.0 / d))
    if bad:
        warnings.warn(f"non-negative diagonal rates for n = {bad}", FitWarning, stacklevel=2)
    return out


def diagonal_law(fit: FitResult, kappa: float, weighted: bool = True) -> tuple[float, float]:
    """Slope and intercept of ``-K_hat[n][n] / kappa`` against ``n``.

    With ``weighted`` each point counts with the inverse variance from the
    fit's standard errors, which differ by two orders of magnitude between
    ``n = 0`` and ``n_max``.
    """
    d = -np.diag(_as_rates(fit.K_hat)) / kappa
    n = np.arange(d.size, dtype=float)
    if weighted:
        se = np.diag(fit.K_stderr) / kappa
        if not np.all(se > 0):
            raise FitError("weighted regression needs positive standard errors")
        w = 1.0 / se
    else:
        w = np.ones_like(d)
    A = np.column_stack([n, np.ones_like(n)]) * w[:, None]
    coef, *_ = np.linalg.lstsq(A, d * w, rcond=None)
    return float(coef[0]), float(coef[1])
