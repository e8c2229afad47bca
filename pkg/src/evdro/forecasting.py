"""Per-region ARIMA forecasting of demand and supply counts.

Each region series gets an independent ARIMA(p, d, q) model fitted by
maximizing the Gaussian likelihood of the d-times differenced series,
conditional on the first p observations and zero pre-sample innovations.
Forecasts for a horizon of ``tau`` steps are concatenated step-major into a
length ``N * tau`` vector, matching the layout used by the ambiguity sets.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize, signal

from .errors import ConvergenceError, DataError, DimensionError, NonStationaryError

log = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-12
MAX_ITER = 500
GRAD_TOL = 1e-8
DEFAULT_ORDERS = tuple((p, d, q) for p in range(3) for d in range(2) for q in range(3))
MIN_RESIDUAL_ROWS = 30


@dataclass(frozen=True)
class SeriesPanel:
    values: np.ndarray
    step_minutes: float = 30.0
    kind: str = "demand"

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise DimensionError("panel values must be a T x N matrix")
        if not np.all(np.isfinite(v)):
            raise DataError("panel contains missing or non-finite entries")
        if np.any(v < 0):
            raise DataError("panel entries must be nonnegative")
        if self.kind not in ("demand", "supply"):
            raise ValueError(f"kind must be 'demand' or 'supply', got {self.kind!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def N(self):
        return self.values.shape[1]

    def head(self, T):
        return SeriesPanel(self.values[:T], self.step_minutes, self.kind)


@dataclass(frozen=True)
class ArimaModel:
    order: tuple
    phi: np.ndarray
    psi: np.ndarray
    intercept: float
    sigma2: float
    loglik: float = float("nan")
    n_obs: int = 0

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(int(o) for o in self.order))
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float).reshape(-1))
        object.__setattr__(self, "psi", np.asarray(self.psi, dtype=float).reshape(-1))
        p, _, q = self.order
        if self.phi.shape != (p,) or self.psi.shape != (q,):
            raise DimensionError("coefficient lengths do not match the model order")

    @property
    def n_params(self):
        p, _, q = self.order
        return p + q + 2

    @property
    def aic(self):
        return 2.0 * self.n_params - 2.0 * self.loglik

    def is_stationary(self):
        return _ar_is_stationary(self.phi)

    def to_dict(self):
        return {
            "order": list(self.order),
            "phi": self.phi.tolist(),
            "psi": self.psi.tolist(),
            "intercept": self.intercept,
            "sigma2": self.sigma2,
            "loglik": self.loglik,
            "n_obs": self.n_obs,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(order=tuple(d["order"]), phi=d["phi"], psi=d["psi"], intercept=d["intercept"],
                   sigma2=d["sigma2"], loglik=d.get("loglik", float("nan")), n_obs=d.get("n_obs", 0))


@dataclass(frozen=True)
class ResidualSample:
    deltas: np.ndarray
    kind: str = "demand"
    N: int = 0
    tau: int = 0

    def __post_init__(self):
        d = np.array(self.deltas, dtype=float)
        if d.ndim != 2:
            raise DimensionError("residual sample must be an M x (N*tau) matrix")
        if self.N and self.tau and d.shape[1] != self.N * self.tau:
            raise DimensionError("residual width must equal N*tau")
        d.setflags(write=False)
        object.__setattr__(self, "deltas", d)

    @property
    def M(self):
        return self.deltas.shape[0]


def _ar_is_stationary(phi):
    if phi.size == 0:
        return True
    # roots of 1 - phi_1 z - ... - phi_p z^p must lie outside the unit circle
    roots = np.roots(np.r_[-phi[::-1], 1.0])
    return bool(np.all(np.abs(roots) > 1.0 + 1e-10))


def _difference(y, d):
    return np.diff(y, n=d) if d else np.asarray(y, dtype=float)


def _innovations(w, p, q, intercept, phi, psi):
    """Conditional innovations e_t for t >= p of the differenced series w."""
    n = w.size
    u = w[p:] - intercept
    for i in range(p):
        u = u - phi[i] * w[p - 1 - i:n - 1 - i]
    if q:
        u = signal.lfilter([1.0], np.r_[1.0, psi], u)
    return u


def _concentrated_loglik(ssr, n):
    sigma2 = max(ssr / n, SIGMA2_FLOOR)
    return -0.5 * n * (np.log(2 * np.pi * sigma2) + 1.0), sigma2


def _lagmat(x, lags, start):
    return np.column_stack([x[start - i:x.size - i] for i in range(1, lags + 1)]) if lags else np.empty((x.size - start, 0))


def _initial_guess(w, p, q):
    """Hannan-Rissanen style least-squares start."""
    n = w.size
    resid = np.zeros(n)
    if q:
        m = min(max(p + q + 3, int(np.ceil(np.log(n) ** 1.5))), max(n // 3, 1))
        X = np.column_stack([np.ones(n - m), _lagmat(w, m, m)])
        coef, *_ = np.linalg.lstsq(X, w[m:], rcond=None)
        resid[m:] = w[m:] - X @ coef
    start = max(p, q)
    X = np.column_stack([np.ones(n - start), _lagmat(w, p, start), _lagmat(resid, q, start)])
    coef, *_ = np.linalg.lstsq(X, w[start:], rcond=None)
    intercept, phi, psi = coef[0], coef[1:1 + p], coef[1 + p:]
    if not _ar_is_stationary(phi):
        phi = phi * 0.5
    if q and np.any(np.abs(np.roots(np.r_[psi[::-1], 1.0])) <= 1.0):
        psi = np.zeros(q)
    return np.r_[intercept, phi, psi]


def fit_arima(series, order, condition_on=None) -> ArimaModel:
    """Fit ARIMA(p, d, q) by conditional maximum likelihood.

    Least-squares start values are refined with BFGS on the concentrated
    conditional log-likelihood (max 500 iterations, gradient tolerance 1e-8).
    ``condition_on`` (>= p) differenced observations are treated as fixed;
    innovations before that point are excluded from the likelihood so that
    different orders can be scored on a common sample.
    """
    y = np.asarray(series, dtype=float).reshape(-1)
    p, d, q = (int(o) for o in order)
    if min(p, d, q) < 0:
        raise ValueError(f"order entries must be nonnegative, got {order}")
    if not np.all(np.isfinite(y)):
        raise DataError("series must be finite")
    if y.size <= p + d + q + 1:
        raise DataError(f"series of length {y.size} too short for order {(p, d, q)}")
    w = _difference(y, d)
    skip = 0 if condition_on is None else max(int(condition_on) - p, 0)
    n_eff = w.size - p - skip
    if n_eff < 1:
        raise DataError("nothing left to fit after conditioning")

    def unpack(theta):
        return theta[0], theta[1:1 + p], theta[1 + p:]

    def negll(theta):
        e = _innovations(w, p, q, *unpack(theta))[skip:]
        ssr = float(e @ e)
        if not np.isfinite(ssr):
            return 1e300
        return -_concentrated_loglik(ssr, n_eff)[0]

    theta0 = _initial_guess(w, p, q)
    e0 = _innovations(w, p, q, *unpack(theta0))[skip:]
    if float(e0 @ e0) <= SIGMA2_FLOOR * n_eff or theta0.size == 1:
        theta = theta0
        if theta0.size == 1:
            theta = np.array([w[skip:].mean()])
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = optimize.minimize(negll, theta0, method="BFGS",
                                    options={"maxiter": MAX_ITER, "gtol": GRAD_TOL})
        if res.status == 1:
            raise ConvergenceError(f"ARIMA{(p, d, q)} did not converge in {MAX_ITER} iterations",
                                   last_iterate=res.x)
        theta = res.x if res.fun <= negll(theta0) else theta0
    intercept, phi, psi = unpack(theta)
    if not _ar_is_stationary(phi):
        raise NonStationaryError(
            f"ARIMA{(p, d, q)} optimum has a nonstationary AR polynomial; try a higher d")
    e = _innovations(w, p, q, intercept, phi, psi)[skip:]
    ll, sigma2 = _concentrated_loglik(float(e @ e), n_eff)
    return ArimaModel(order=(p, d, q), phi=phi, psi=psi, intercept=float(intercept),
                      sigma2=float(sigma2), loglik=float(ll), n_obs=int(n_eff))


def select_order(series, candidate_orders=DEFAULT_ORDERS):
    """Return the candidate order with the smallest AIC (ties: lexicographic)."""
    candidates = sorted({tuple(int(v) for v in o) for o in candidate_orders})
    if not candidates:
        raise ValueError("candidate grid is empty")
    lead = max(p + d for p, d, _ in candidates)
    best, best_aic, failures = None, np.inf, []
    for order in candidates:
        try:
            model = fit_arima(series, order, condition_on=lead - order[1])
        except (ConvergenceError, NonStationaryError, DataError, np.linalg.LinAlgError) as exc:
            failures.append(f"{order}: {exc}")
            continue
        if model.aic < best_aic:
            best, best_aic = order, model.aic
    if best is None:
        raise ConvergenceError("no candidate order could be fitted: " + "; ".join(failures))
    return best


def fit_panel(panel: SeriesPanel, candidate_orders=DEFAULT_ORDERS):
    """Select and fit one model per region column of ``panel``."""
    models = []
    for i in range(panel.N):
        col = panel.values[:, i]
        order = select_order(col, candidate_orders)
        models.append(fit_arima(col, order))
        log.debug("region %d (%s): order %s", i, panel.kind, order)
    return models


def _min_history(model):
    p, d, _ = model.order
    return p + d + 1


def _forecast_one(model, y, e, steps):
    """Forecast ``steps`` values after ``y`` given in-sample innovations ``e`` of diff(y, d)."""
    p, d, q = model.order
    w = list(_difference(y, d)[-max(p, 1):]) if p else []
    ehist = list(e[-q:]) if q else []
    out_w = []
    for h in range(steps):
        val = model.intercept
        for i in range(p):
            val += model.phi[i] * w[-1 - i]
        for j in range(q):
            idx = len(ehist) - 1 - j
            if idx >= 0:
                val += model.psi[j] * ehist[idx]
        out_w.append(val)
        if p:
            w.append(val)
        if q:
            ehist.append(0.0)
    out = np.asarray(out_w)
    # undo differencing one level at a time
    for level in range(d, 0, -1):
        last = _difference(y, level - 1)[-1]
        out = last + np.cumsum(out)
    return out


def _model_innovations(model, y):
    p, d, q = model.order
    w = _difference(y, d)
    e = np.zeros(w.size)
    e[p:] = _innovations(w, p, q, model.intercept, model.phi, model.psi)
    return e


def forecast_path(models, history, tau):
    """Concatenated step-major forecasts of the ``tau`` steps after ``history``."""
    values = history.values if isinstance(history, SeriesPanel) else np.atleast_2d(np.asarray(history, dtype=float))
    if values.shape[1] != len(models):
        raise DimensionError(f"{len(models)} models for a panel with {values.shape[1]} regions")
    out = np.empty((tau, len(models)))
    for i, model in enumerate(models):
        y = values[:, i]
        if y.size < _min_history(model):
            raise DataError(f"region {i}: history of {y.size} steps too short for order {model.order}")
        out[:, i] = _forecast_one(model, y, _model_innovations(model, y), tau)
    return np.maximum(out, 0.0).reshape(-1)


def rolling_residuals(models, panel: SeriesPanel, tau, min_rows=1) -> ResidualSample:
    """Rolling-origin forecast residuals, one row per forecast origin.

    Row t holds observed(t .. t+tau-1) minus the forecast issued with data up
    to step t-1, flattened step-major.  Models are held fixed.
    """
    T, N = panel.values.shape
    if N != len(models):
        raise DimensionError(f"{len(models)} models for a panel with {N} regions")
    warmup = max(_min_history(m) for m in models)
    M = T - tau - warmup + 1
    if M < min_rows:
        raise DataError(f"panel of {T} steps yields {max(M, 0)} residual rows; "
                        f"need at least {warmup + tau + min_rows - 1} steps for {min_rows} rows")
    deltas = np.empty((M, tau, N))
    for i, model in enumerate(models):
        y = panel.values[:, i]
        e_full = _model_innovations(model, y)
        d = model.order[1]
        for row, t in enumerate(range(warmup, warmup + M)):
            # innovations of diff(y[:t], d) are the first t-d entries of e_full
            fc = np.maximum(_forecast_one(model, y[:t], e_full[:t - d], tau), 0.0)
            deltas[row, :, i] = y[t:t + tau] - fc
    return ResidualSample(deltas=deltas.reshape(M, tau * N), kind=panel.kind, N=N, tau=tau)


def simulate_arima(phi, psi, intercept, sigma, T, rng, burn=200):
    """Simulate a stationary ARMA series (used for synthetic histories and tests)."""
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    e = rng.normal(0.0, sigma, T + burn)
    x = signal.lfilter(np.r_[1.0, psi], np.r_[1.0, -phi], e + 0.0)
    mean = intercept / (1.0 - phi.sum()) if phi.size else intercept
    return x[burn:] + mean


def order_grid(p_values=(0, 1, 2), d_values=(0, 1), q_values=(0, 1, 2)):
    return tuple(itertools.product(p_values, d_values, q_values))
