"""Synthetic cities, ground-truth demand/supply processes and receding-horizon rollouts.

A scenario carries a training history followed by one operating day.  The
history is drawn once and used to fit forecasters and ambiguity sets; each
rollout seed then draws its own operating-day truth stream, and every policy
run under that seed consumes the identical stream.
"""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .ambiguity import BootstrapConfig, bootstrap_thresholds, build_set, estimate_moments
from .dro import Mode, ProblemInstance, solve_with_retries
from .fleet import (
    EPS_S,
    EPS_Y,
    CostMatrices,
    FleetState,
    HorizonConfig,
    ServiceBounds,
    TransitionModel,
    TransitionStep,
    balancing_cost,
    charging_arrivals,
    net_flow,
    propagate,
    unfairness_ratio,
    unfairness_utilization,
)
from .forecasting import SeriesPanel, fit_panel, forecast_path, rolling_residuals

log = logging.getLogger(__name__)

POLICIES = ("Robust", "NonRobust", "NoOp")
METRICS_HEADER = ("step", "policy", "seed", "jd_realized", "unfair_ratio", "unfair_util", "solve_ms", "retries")
SCENARIO_SCHEMA = "evdro-scenario/1"
PEAK_HOURS = (9.0, 15.0, 21.0)  # centers of the 8-10am, 2-4pm and 8-10pm peaks
DEMAND_FLOOR = 0.5  # smallest forecast demand fed to the planner (a zero forecast makes l*S <= r infeasible)
FALLBACK_BACKEND = "cvxopt"
# Supply residuals at stationless regions are identically zero; without a
# ridge above the estimator's 1e-8 the moment block has a nearly free face.
COV_RIDGE = 1e-6
FORECAST_ORDERS = ((0, 0, 0), (1, 0, 0), (2, 0, 0), (1, 0, 1), (2, 0, 1), (0, 1, 1), (1, 1, 0), (1, 1, 1))


def derive_seed(*labels) -> int:
    """Stable 63-bit seed from a tuple of labels (ints/strings)."""
    h = hashlib.sha256("/".join(str(x) for x in labels).encode()).digest()
    return int.from_bytes(h[:8], "big") >> 1


def diurnal_profile(K, step_minutes=30.0, base=0.5, amp=0.9, width_h=1.0):
    hours = (np.arange(K) + 0.5) * step_minutes / 60.0
    bumps = sum(np.exp(-0.5 * ((hours - c) / width_h) ** 2) for c in PEAK_HOURS)
    return base + amp * bumps


@dataclass(frozen=True)
class TruthProcess:
    """Per-region Gaussian noise around a mean path, floored at zero.

    ``mean`` spans history plus the operating day.  From ``shift_start`` on,
    means are multiplied by ``shift_factors`` (one per region).
    """

    mean: np.ndarray
    cv: float
    shift_start: int | None = None
    shift_factors: np.ndarray | None = None

    def __post_init__(self):
        m = np.array(self.mean, dtype=float)
        if m.ndim != 2 or np.any(m < 0):
            raise ValueError("truth mean must be a nonnegative T x N array")
        object.__setattr__(self, "mean", m)
        if self.shift_factors is not None:
            object.__setattr__(self, "shift_factors", np.array(self.shift_factors, dtype=float))

    @property
    def T(self):
        return self.mean.shape[0]

    def mean_at(self, t):
        m = self.mean[t].copy()
        if self.shift_start is not None and t >= self.shift_start:
            m = m * self.shift_factors
        return m

    def sample(self, t, rng):
        m = self.mean_at(t)
        return np.maximum(m + self.cv * m * rng.standard_normal(m.size), 0.0)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "cv": self.cv, "shift_start": self.shift_start,
                "shift_factors": None if self.shift_factors is None else self.shift_factors.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(mean=d["mean"], cv=d["cv"], shift_start=d.get("shift_start"),
                   shift_factors=d.get("shift_factors"))


@dataclass(frozen=True)
class Scenario:
    config: HorizonConfig
    costs: CostMatrices
    trans: TransitionModel  # one step per time-of-day slot
    stations: np.ndarray
    truth_r: TruthProcess
    truth_c: TruthProcess
    initial: FleetState
    ratio_band: tuple  # (lo, hi) multiples of the forecast city-wide demand/supply ratio
    history_steps: int
    seed: int
    positions: np.ndarray | None = None

    def __post_init__(self):
        st = np.array(self.stations, dtype=int)
        if st.sum() < 1:
            raise ValueError("scenario needs at least one charging station")
        object.__setattr__(self, "stations", st)
        if self.truth_r.T != self.history_steps + self.config.K:
            raise ValueError("truth processes must span history plus one day")

    @property
    def N(self):
        return self.config.N

    def bounds(self, r_hat, vacant_total):
        """Per-step band around the forecast city-wide demand/supply ratio."""
        lo, hi = self.ratio_band
        rho = np.asarray(r_hat, float).reshape(self.config.tau, self.N).sum(axis=1) / max(vacant_total, EPS_S)
        rho = np.maximum(rho, 1e-3)[:, None] * np.ones((1, self.N))
        return ServiceBounds(l=lo * rho, h=hi * rho)

    def trans_at(self, t):
        return self.trans[t % len(self.trans)]

    def to_dict(self):
        return {
            "schema": SCENARIO_SCHEMA,
            "config": self.config.to_dict(),
            "costs": self.costs.to_dict(),
            "trans": self.trans.to_dict(),
            "stations": self.stations.tolist(),
            "truth_r": self.truth_r.to_dict(),
            "truth_c": self.truth_c.to_dict(),
            "initial": self.initial.to_dict(),
            "ratio_band": list(self.ratio_band),
            "history_steps": self.history_steps,
            "seed": self.seed,
            "positions": None if self.positions is None else np.asarray(self.positions).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != SCENARIO_SCHEMA:
            raise ValueError(f"unsupported scenario schema {d.get('schema')!r}")
        return cls(
            config=HorizonConfig.from_dict(d["config"]),
            costs=CostMatrices.from_dict(d["costs"]),
            trans=TransitionModel.from_dict(d["trans"]),
            stations=d["stations"],
            truth_r=TruthProcess.from_dict(d["truth_r"]),
            truth_c=TruthProcess.from_dict(d["truth_c"]),
            initial=FleetState.from_dict(d["initial"]),
            ratio_band=tuple(d["ratio_band"]),
            history_steps=d["history_steps"],
            seed=d["seed"],
            positions=d.get("positions"),
        )


def _grid_positions(N, extent, rng, jitter):
    cols = int(np.ceil(np.sqrt(N)))
    rows = int(np.ceil(N / cols))
    cell = extent / cols
    pts = np.array([((c + 0.5) * cell, (r + 0.5) * cell) for r in range(rows) for c in range(cols)])[:N]
    # centroids off the exact lattice: tied distances give the planner alternative optima
    return pts + jitter * cell * rng.uniform(-0.5, 0.5, size=pts.shape), cell


def _gravity(W, scale):
    G = np.exp(-W / scale)
    return G / G.sum(axis=1, keepdims=True)


def generate_city(seed, N=6, station_fraction=0.5, grid_extent=10.0, *, tau=2, K=48, history_days=7,
                  fleet_per_region=60.0, demand_per_region=20.0, field_sigma=0.5, demand_cv=0.25,
                  supply_cv=0.3, mix=(0.6, 0.3, 0.1), q_vacant=0.35, shift=True, shift_range=(0.7, 1.4),
                  ratio_band=(0.75, 1.33), theta=1.0, beta=1.0, a=0.5, step_minutes=30.0,
                  jitter=0.2) -> Scenario:
    """Random synthetic city on a square grid of regions.

    ``mix`` splits each gravity row among vacant, occupied and low-battery
    outcomes for vacant vehicles.  Charging completions are calibrated to the
    expected low-battery outflow and spread over stations by station count.
    """
    if N < 2:
        raise ValueError("need at least two regions")
    if not 0.0 < station_fraction <= 1.0:
        raise ValueError("station_fraction must lie in (0, 1]")
    if abs(sum(mix) - 1.0) > 1e-12:
        raise ValueError("mix must sum to 1")
    rng = np.random.default_rng(derive_seed("city", seed))
    pos, cell = _grid_positions(N, grid_extent, rng, jitter)
    W = np.linalg.norm(pos[:, None] - pos[None], axis=2)
    n_st = max(1, int(round(station_fraction * N)))
    stations = np.zeros(N, dtype=int)
    stations[rng.choice(N, size=n_st, replace=False)] = rng.integers(1, 4, size=n_st)
    if stations.sum() == 0:
        raise ValueError("no stations generated")
    costs = CostMatrices(W, stations > 0)

    # log-normal spatial field, smoothed over neighbors
    z = rng.standard_normal(N)
    kern = np.exp(-(W / cell) ** 2)
    z = kern @ z / np.sqrt((kern ** 2).sum(axis=1))
    field_ = np.exp(field_sigma * z - 0.5 * field_sigma ** 2)

    profile = diurnal_profile(K, step_minutes)
    steps = []
    for k in range(K):
        G = _gravity(W, cell * (1.5 if profile[k] > 1 else 1.0))
        busy = min(0.9, mix[1] * profile[k] / profile.mean())
        pv = max(1.0 - busy - mix[2], 0.0)
        steps.append(TransitionStep(Pv=pv * G, Po=busy * G, Pl=mix[2] * G,
                                    Qv=q_vacant * G, Qo=(1 - q_vacant) * G))
    trans = TransitionModel(tuple(steps))

    H = history_days * K
    T = H + K
    day = np.tile(profile, history_days + 1)[:T]
    r_mean = demand_per_region * np.outer(day, field_)
    # charging completions: the low-battery share of the vacant fleet, spread over stations
    fleet = fleet_per_region * N
    vacant_share = 1.0 - mix[1]
    c_total = mix[2] * vacant_share * fleet
    c_mean = np.outer(np.ones(T), c_total * stations / stations.sum())
    shift_start = H + K // 2 if shift else None
    lo, hi = shift_range
    fr = rng.uniform(lo, hi, N) if shift else None
    fc = rng.uniform(lo, hi, N) if shift else None
    truth_r = TruthProcess(r_mean, demand_cv, shift_start, fr)
    truth_c = TruthProcess(c_mean, supply_cv, shift_start, fc)

    share = field_ / field_.sum()
    V = vacant_share * fleet * (0.5 * share + 0.5 / N)
    O = mix[1] * fleet * share
    L = np.full(N, mix[2] * fleet / N)
    cfg = HorizonConfig(N=N, tau=tau, K=K, theta=theta, beta=beta, a=a, step_minutes=step_minutes)
    return Scenario(cfg, costs, trans, stations, truth_r, truth_c, FleetState(V, O, L),
                    tuple(ratio_band), H, int(seed), pos)


def sample_truth(scn: Scenario, k, rng):
    """Draw (r_k, c_k) at operating-day step ``k`` in [1, K]."""
    if not 1 <= k <= scn.config.K:
        raise ValueError(f"step {k} outside [1, {scn.config.K}]")
    return _draw(scn, scn.history_steps + k - 1, rng)


def _draw(scn, t, rng):
    return scn.truth_r.sample(t, rng), scn.truth_c.sample(t, rng)


@dataclass(frozen=True)
class TruthStream:
    """Operating-day draws consumed by one seed, identical for every policy."""

    r: np.ndarray  # (K, N)
    c: np.ndarray

    def digest(self):
        h = hashlib.sha256()
        for arr in (self.r, self.c):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def truth_stream(scn: Scenario, seed) -> TruthStream:
    rng = np.random.default_rng(derive_seed("truth", scn.seed, seed))
    draws = [_draw(scn, scn.history_steps + k, rng) for k in range(scn.config.K)]
    return TruthStream(np.array([d[0] for d in draws]), np.array([d[1] for d in draws]))


def history_panels(scn: Scenario, history_seed=0):
    """Training history (demand and supply panels) preceding the operating day."""
    rng = np.random.default_rng(derive_seed("history", scn.seed, history_seed))
    draws = [_draw(scn, t, rng) for t in range(scn.history_steps)]
    minutes = scn.config.step_minutes
    return (SeriesPanel(np.array([d[0] for d in draws]), minutes, "demand"),
            SeriesPanel(np.array([d[1] for d in draws]), minutes, "supply"))


def ridged_covariance(residuals):
    _, S = estimate_moments(residuals)
    return S + COV_RIDGE * max(1.0, np.trace(S) / S.shape[0]) * np.eye(S.shape[0])


@dataclass
class Forecaster:
    """Fitted per-region models, their training history and the residual-based set parameters.

    NonRobust planning only uses the forecasts; the thresholds stay at the
    degenerate (0, 1) when no bootstrap was run.
    """

    models_r: list
    models_c: list
    history_r: np.ndarray
    history_c: np.ndarray
    Sigma_r: np.ndarray
    Sigma_c: np.ndarray
    gammas_r: tuple = (0.0, 1.0)
    gammas_c: tuple = (0.0, 1.0)
    M: int = 0

    @property
    def tau(self):
        return self.Sigma_r.shape[0] // len(self.models_r)

    def forecast(self, recent_r=(), recent_c=()):
        """(r_hat, c_hat) for the next tau steps after the history plus recent observations."""
        hr = np.vstack([self.history_r, recent_r]) if len(recent_r) else self.history_r
        hc = np.vstack([self.history_c, recent_c]) if len(recent_c) else self.history_c
        return forecast_path(self.models_r, hr, self.tau), forecast_path(self.models_c, hc, self.tau)

    def sets(self, r_hat, c_hat):
        dset = build_set(r_hat, self.Sigma_r, *self.gammas_r)
        sset = build_set(c_hat, self.Sigma_c, *self.gammas_c)
        return dset, sset


def fit_forecaster(scn: Scenario, panels=None, bootstrap: BootstrapConfig | None = None,
                   orders=FORECAST_ORDERS, robust=True, history_seed=0) -> Forecaster:
    """Fit models on the training history; with ``robust`` also bootstrap the thresholds."""
    tau = scn.config.tau
    pr, pc = panels or history_panels(scn, history_seed)
    mr = fit_panel(pr, orders)
    mc = fit_panel(pc, orders)
    res_r = rolling_residuals(mr, pr, tau)
    res_c = rolling_residuals(mc, pc, tau)
    fc = Forecaster(mr, mc, pr.values, pc.values, ridged_covariance(res_r), ridged_covariance(res_c), M=res_r.M)
    if robust:
        cfg = bootstrap or BootstrapConfig()
        fc.gammas_r = bootstrap_thresholds(res_r, cfg)
        fc.gammas_c = bootstrap_thresholds(res_c, supply_bootstrap(cfg))
    return fc


def supply_bootstrap(cfg: BootstrapConfig):
    """Supply thresholds use their own resampling stream."""
    return BootstrapConfig(cfg.NB, cfg.alpha, derive_seed("supply", cfg.seed) % (2 ** 32))


@dataclass
class EpisodeMetrics:
    policy: str
    seed: int
    jd: np.ndarray
    unfair_ratio: np.ndarray
    unfair_util: np.ndarray
    solve_ms: np.ndarray
    retries: np.ndarray
    aborted: bool = False
    stream_digest: str = ""
    notes: list = field(default_factory=list)
    held: np.ndarray | None = None  # steps where no plan was found and the fleet held position

    @property
    def held_steps(self):
        return 0 if self.held is None else int(np.sum(self.held))

    @property
    def steps(self):
        return self.jd.size

    @property
    def total_driving_distance(self):
        return float(self.jd.sum())

    @property
    def unfairness_ratio_total(self):
        return float(self.unfair_ratio.sum())

    @property
    def unfairness_utilization_total(self):
        return float(self.unfair_util.sum())

    @property
    def retry_count(self):
        return int(self.retries.sum())

    def totals(self):
        return {"jd": self.total_driving_distance, "unfair_ratio": self.unfairness_ratio_total,
                "unfair_util": self.unfairness_utilization_total}

    def rows(self, timing=True):
        for s in range(self.steps):
            yield (s, self.policy, self.seed, float(self.jd[s]), float(self.unfair_ratio[s]),
                   float(self.unfair_util[s]), float(self.solve_ms[s]) if timing else "NA", int(self.retries[s]))


def _step_metrics(scn, state, X1, Y1, r_true, c_true):
    S = np.maximum(state.V + net_flow(X1), EPS_S)
    st = scn.stations > 0
    A = charging_arrivals(Y1[None], state.L[None])[0]
    jd = balancing_cost(X1[None], Y1[None], scn.costs, scn.config.beta)
    ur = unfairness_ratio(r_true, S)
    uu = unfairness_utilization(np.maximum(A[st], EPS_Y), c_true[st]) if c_true[st].sum() > 0 else 0.0
    return jd, ur, uu


def planning_instance(scn: Scenario, state: FleetState, t, dset, sset, mode=Mode.ROBUST) -> ProblemInstance:
    """Program for planning steps t .. t+tau-1 (absolute index) from ``state``."""
    tau = scn.config.tau
    return ProblemInstance(
        config=scn.config, costs=scn.costs,
        trans=TransitionModel(tuple(scn.trans_at(t + j) for j in range(tau))),
        initial=state, bounds=scn.bounds(dset.center, state.V.sum()), demand_set=dset, supply_set=sset,
        mode=mode)


def run_episode(scn: Scenario, policy, seed, steps=None, tau=None, forecaster: Forecaster | None = None,
                stream: TruthStream | None = None, backend="clarabel", on_failure="hold", tol=None) -> EpisodeMetrics:
    """Receding-horizon rollout: plan tau steps, apply the first, observe, repeat.

    A step whose program stays unsolved after bound widening and a second
    backend either holds position (``on_failure="hold"``, noted and counted)
    or ends the episode with partial metrics (``"abort"``).
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if on_failure not in ("hold", "abort"):
        raise ValueError("on_failure must be 'hold' or 'abort'")
    cfg = scn.config
    tau = tau or cfg.tau
    if tau != cfg.tau:
        raise ValueError("tau must match the scenario horizon")
    steps = cfg.K - tau if steps is None else steps
    if steps > cfg.K - tau:
        raise ValueError(f"steps must be <= K - tau = {cfg.K - tau}")
    stream = stream or truth_stream(scn, seed)
    if policy != "NoOp" and forecaster is None:
        forecaster = fit_forecaster(scn, robust=policy == "Robust")
    N = scn.N
    H = scn.history_steps
    state = scn.initial
    out = {k: np.zeros(steps) for k in ("jd", "ur", "uu", "ms", "retries", "held")}
    aborted = False
    notes = []
    for s in range(steps):
        t = H + s
        r_true, c_true = stream.r[s], stream.c[s]
        if policy == "NoOp":
            X1 = np.zeros((N, N))
            Y1 = np.zeros((N, N))
            elapsed = 0.0
            retries = 0
        else:
            r_hat, c_hat = forecaster.forecast(stream.r[:s], stream.c[:s])
            dset, sset = forecaster.sets(np.maximum(r_hat, DEMAND_FLOOR), c_hat)
            inst = planning_instance(scn, state, t, dset, sset, Mode.ROBUST if policy == "Robust" else Mode.NONROBUST)
            started = time.perf_counter()
            res = solve_with_retries(inst, backend=backend, tol=tol)
            if res.plan is None and res.result.status != "Infeasible" and backend != FALLBACK_BACKEND:
                log.warning("%s/%s step %d: %s on %s, retrying on %s", policy, seed, s, res.result.status,
                            backend, FALLBACK_BACKEND)
                res = solve_with_retries(inst, backend=FALLBACK_BACKEND, tol=tol)
            elapsed = 1e3 * (time.perf_counter() - started)
            retries = res.retries
            if res.plan is None:
                notes.append(f"step {s}: solver status {res.result.status} after {retries} retries")
                if on_failure == "abort":
                    aborted = True
                    log.error("episode %s/%s aborted at step %d: %s", policy, seed, s, res.result.status)
                    for k in out:
                        out[k] = out[k][:s]
                    break
                log.warning("episode %s/%s holds position at step %d: %s", policy, seed, s, res.result.status)
                out["held"][s] = 1
                X1 = np.zeros((N, N))
                Y1 = np.zeros((N, N))
            else:
                X1, Y1 = res.plan.X[0], res.plan.Y[0]
        jd, ur, uu = _step_metrics(scn, state, X1, Y1, r_true, c_true)
        out["jd"][s], out["ur"][s], out["uu"][s] = jd, ur, uu
        out["ms"][s], out["retries"][s] = elapsed, retries
        state = propagate(state, X1, Y1, scn.trans_at(t), c_true)
    return EpisodeMetrics(policy, int(seed), out["jd"], out["ur"], out["uu"], out["ms"],
                          out["retries"].astype(int), aborted, stream.digest(), notes, out["held"].astype(bool))


def sign_test(diffs):
    """Two-sided sign test p-value of paired differences (ties dropped)."""
    diffs = np.asarray(diffs, dtype=float)
    pos = int(np.sum(diffs > 0))
    neg = int(np.sum(diffs < 0))
    if pos + neg == 0:
        return 1.0
    return float(stats.binomtest(pos, pos + neg, 0.5).pvalue)


@dataclass
class ComparisonReport:
    policies: tuple
    seeds: tuple
    episodes: dict  # (policy, seed) -> EpisodeMetrics

    def totals(self, policy):
        return {m: np.array([self.episodes[(policy, s)].totals()[m] for s in self.seeds])
                for m in ("jd", "unfair_ratio", "unfair_util")}

    def summary(self, baseline=None):
        """Per-policy means; paired differences and sign tests against ``baseline``."""
        baseline = baseline or self.policies[-1]
        base = self.totals(baseline)
        rows = []
        for p in self.policies:
            tot = self.totals(p)
            for m, vals in tot.items():
                d = vals - base[m]
                rows.append({
                    "policy": p, "metric": m, "mean": float(vals.mean()), "baseline": baseline,
                    "mean_diff": float(d.mean()),
                    "rel_change": float(d.mean() / base[m].mean()) if base[m].mean() else 0.0,
                    "wins": int(np.sum(d < 0)), "losses": int(np.sum(d > 0)),
                    "sign_p": sign_test(d),
                })
        return rows

    def metric_rows(self, timing=True):
        for s in self.seeds:
            for p in self.policies:
                yield from self.episodes[(p, s)].rows(timing)

    @property
    def aborted(self):
        return [k for k, e in self.episodes.items() if e.aborted]


def _episode_task(args):
    scn, policy, seed, steps, fc, stream, backend, tol = args
    return run_episode(scn, policy, seed, steps=steps, forecaster=fc, stream=stream, backend=backend, tol=tol)


def compare(scn: Scenario, policies=("Robust", "NonRobust"), seeds=20, backend="clarabel", steps=None,
            forecaster: Forecaster | None = None, bootstrap=None, workers=1, tol=None) -> ComparisonReport:
    """Paired episodes: every policy sees the same truth stream for a given seed.

    One forecaster (fitted on the shared training history) serves all
    episodes.  With ``workers > 1`` episodes run in worker processes; results
    are collected in a fixed order so the report does not depend on scheduling.
    """
    seeds = tuple(range(seeds)) if isinstance(seeds, int) else tuple(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    for p in policies:
        if p not in POLICIES:
            raise ValueError(f"unknown policy {p!r}")
    if forecaster is None and any(p != "NoOp" for p in policies):
        forecaster = fit_forecaster(scn, bootstrap=bootstrap, robust="Robust" in policies)
    tasks = []
    for s in seeds:
        stream = truth_stream(scn, s)
        tasks += [(scn, p, s, steps, forecaster, stream, backend, tol) for p in policies]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_episode_task, tasks))
    else:
        results = [_episode_task(t) for t in tasks]
    episodes = {(t[1], t[2]): e for t, e in zip(tasks, results)}
    return ComparisonReport(tuple(policies), seeds, episodes)
