"""Fleet domain: types, cost evaluators, fairness metrics and fluid dynamics.

Vehicle counts are continuous throughout.  A planning horizon of ``tau``
steps is indexed ``k = 0 .. tau-1`` and per-step quantities are stored as
``(tau, N)`` arrays; the concatenated uncertainty vectors ``r`` and ``c``
are the row-major flattening of those arrays (step-major, region-minor).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, InfeasibleDispatchError

log = logging.getLogger(__name__)

EPS_S = 1e-3
EPS_L = 1e-3
EPS_Y = 1e-3
CLIP_TOL = 1e-9
STOCHASTIC_TOL = 1e-9


def _as_float_array(x, ndim=None, name="array"):
    arr = np.array(x, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class HorizonConfig:
    N: int
    tau: int = 2
    K: int = 48
    theta: float = 1.0
    beta: float = 1.0
    a: float = 0.5
    m1: float = np.inf
    m2: float = np.inf
    step_minutes: float = 30.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not 1 <= self.tau <= self.K:
            raise ValueError(f"need 1 <= tau <= K, got tau={self.tau}, K={self.K}")
        if not 0.0 < self.a <= 1.0:
            raise ValueError(f"power exponent a must lie in (0, 1], got {self.a}")
        if self.theta < 0 or self.beta < 0:
            raise ValueError("theta and beta must be nonnegative")
        if not (self.m1 > 0 and self.m2 > 0):
            raise ValueError("reach bounds m1, m2 must be positive")

    def to_dict(self):
        d = dict(self.__dict__)
        for key in ("m1", "m2"):
            if not np.isfinite(d[key]):
                d[key] = None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("m1", "m2"):
            if d.get(key) is None:
                d[key] = np.inf
        return cls(**d)


@dataclass(frozen=True)
class CostMatrices:
    """Vacant-dispatch costs ``W`` and the charging-dispatch view ``Wstar``.

    ``Wstar`` is ``W`` restricted to destination columns that hold at least one
    charging station.  Columns without a station are *unreachable*; they are
    represented by the mask ``~has_station``, never by a large number.
    """

    W: np.ndarray
    has_station: np.ndarray

    def __post_init__(self):
        W = _as_float_array(self.W, 2, "W")
        st = np.array(self.has_station, dtype=bool)
        st.setflags(write=False)
        if W.shape[0] != W.shape[1]:
            raise DimensionError(f"W must be square, got {W.shape}")
        if st.shape != (W.shape[0],):
            raise DimensionError("has_station must have one entry per region")
        if np.any(W < 0) or not np.all(np.isfinite(W)):
            raise ValueError("W must be finite and nonnegative")
        if np.any(np.diag(W) != 0):
            raise ValueError("diag(W) must be zero")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "has_station", st)

    @property
    def N(self):
        return self.W.shape[0]

    @property
    def unreachable(self):
        """Boolean N x N mask of Wstar entries marked Unreachable."""
        return np.broadcast_to(~self.has_station[None, :], self.W.shape)

    @property
    def Wstar(self):
        return np.ma.masked_array(self.W, mask=self.unreachable.copy())

    def vacant_mask(self, m1):
        """Arcs on which vacant dispatch x_ij may be nonzero."""
        mask = self.W < m1
        np.fill_diagonal(mask, False)
        return mask

    def charging_mask(self, m2):
        """Arcs on which low-battery dispatch y_ij may be nonzero."""
        mask = (self.W < m2) & ~self.unreachable
        np.fill_diagonal(mask, False)
        return mask

    def to_dict(self):
        wstar = [[None if u else float(w) for w, u in zip(row, urow)]
                 for row, urow in zip(self.W, self.unreachable)]
        return {"W": self.W.tolist(), "Wstar": wstar,
                "has_station": self.has_station.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(W=np.array(d["W"], dtype=float), has_station=np.array(d["has_station"], dtype=bool))


@dataclass(frozen=True)
class TransitionStep:
    """Region transition probabilities for one step.

    ``Pv[j, i]`` is the probability that a vacant vehicle in region j is vacant
    in region i one step later; ``Po``/``Pl`` are the occupied/low-battery
    analogues and ``Qv``/``Qo`` apply to vehicles that start occupied.
    """

    Pv: np.ndarray
    Po: np.ndarray
    Pl: np.ndarray
    Qv: np.ndarray
    Qo: np.ndarray

    def __post_init__(self):
        mats = {}
        for name in ("Pv", "Po", "Pl", "Qv", "Qo"):
            m = _as_float_array(getattr(self, name), 2, name)
            mats[name] = m
            object.__setattr__(self, name, m)
        shape = mats["Pv"].shape
        if shape[0] != shape[1] or any(m.shape != shape for m in mats.values()):
            raise DimensionError("transition matrices must be square and share one shape")
        for name, m in mats.items():
            if np.any(m < -STOCHASTIC_TOL) or np.any(m > 1 + STOCHASTIC_TOL):
                raise ValueError(f"{name} entries must lie in [0, 1]")
        p_rows = (mats["Pv"] + mats["Po"] + mats["Pl"]).sum(axis=1)
        q_rows = (mats["Qv"] + mats["Qo"]).sum(axis=1)
        if np.max(np.abs(p_rows - 1)) > STOCHASTIC_TOL:
            raise ValueError("rows of Pv + Po + Pl must sum to 1")
        if np.max(np.abs(q_rows - 1)) > STOCHASTIC_TOL:
            raise ValueError("rows of Qv + Qo must sum to 1")

    @property
    def N(self):
        return self.Pv.shape[0]

    @classmethod
    def identity(cls, N):
        eye, zero = np.eye(N), np.zeros((N, N))
        return cls(Pv=eye, Po=zero, Pl=zero, Qv=zero, Qo=eye)


@dataclass(frozen=True)
class TransitionModel:
    steps: tuple

    def __post_init__(self):
        steps = tuple(self.steps)
        if not steps:
            raise ValueError("TransitionModel needs at least one step")
        if len({s.N for s in steps}) != 1:
            raise DimensionError("all transition steps must share N")
        object.__setattr__(self, "steps", steps)

    def __len__(self):
        return len(self.steps)

    def __getitem__(self, k):
        return self.steps[k]

    @property
    def N(self):
        return self.steps[0].N

    def to_dict(self):
        return {"steps": [{n: getattr(s, n).tolist() for n in ("Pv", "Po", "Pl", "Qv", "Qo")}
                          for s in self.steps]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(TransitionStep(**{k: np.array(v) for k, v in s.items()}) for s in d["steps"]))


@dataclass(frozen=True)
class FleetState:
    V: np.ndarray
    O: np.ndarray
    L: np.ndarray

    def __post_init__(self):
        for name in ("V", "O", "L"):
            v = _as_float_array(getattr(self, name), 1, name)
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise ValueError(f"{name} must be finite and nonnegative")
            object.__setattr__(self, name, v)
        if not (self.V.shape == self.O.shape == self.L.shape):
            raise DimensionError("V, O, L must have equal length")

    @property
    def N(self):
        return self.V.shape[0]

    def total(self):
        return float(self.V.sum() + self.O.sum() + self.L.sum())

    def to_dict(self):
        return {"V": self.V.tolist(), "O": self.O.tolist(), "L": self.L.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(V=d["V"], O=d["O"], L=d["L"])


@dataclass(frozen=True)
class DemandSupplyPath:
    r: np.ndarray
    c: np.ndarray
    N: int
    tau: int

    def __post_init__(self):
        for name in ("r", "c"):
            v = _as_float_array(getattr(self, name), 1, name)
            if v.shape != (self.N * self.tau,):
                raise DimensionError(f"{name} must have length N*tau = {self.N * self.tau}")
            if np.any(v < 0):
                raise ValueError(f"{name} entries must be nonnegative")
            object.__setattr__(self, name, v)

    def r_matrix(self):
        return self.r.reshape(self.tau, self.N)

    def c_matrix(self):
        return self.c.reshape(self.tau, self.N)


@dataclass(frozen=True)
class ServiceBounds:
    l: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        l = _as_float_array(self.l, 2, "l")
        h = _as_float_array(self.h, 2, "h")
        if l.shape != h.shape:
            raise DimensionError("l and h must share a shape")
        if np.any(l <= 0) or np.any(l > h):
            raise ValueError("service bounds need 0 < l <= h")
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "h", h)

    def widened(self, factor=0.1):
        """Bounds relaxed multiplicatively by ``factor`` on both sides."""
        return ServiceBounds(l=self.l / (1 + factor), h=self.h * (1 + factor))

    def to_dict(self):
        return {"l": self.l.tolist(), "h": self.h.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(l=d["l"], h=d["h"])


@dataclass(frozen=True)
class DecisionPlan:
    X: np.ndarray
    Y: np.ndarray
    S: np.ndarray
    D: np.ndarray
    U: np.ndarray
    Vtraj: np.ndarray
    Otraj: np.ndarray
    Ltraj: np.ndarray
    Z: np.ndarray | None = None
    objective_parts: dict = field(default_factory=dict)

    @property
    def tau(self):
        return self.X.shape[0]

    @property
    def arrivals(self):
        """Low-battery vehicles present in each region after balancing."""
        return charging_arrivals(self.Y, self.Ltraj)

    def to_dict(self):
        out = {k: getattr(self, k).tolist() for k in ("X", "Y", "S", "D", "U", "Vtraj", "Otraj", "Ltraj")}
        out["Z"] = None if self.Z is None else self.Z.tolist()
        out["objective_parts"] = dict(self.objective_parts)
        return out


def _stack(seq, name):
    arr = np.asarray(seq, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise DimensionError(f"{name} must be a sequence of square matrices, got shape {arr.shape}")
    return arr


def net_flow(M):
    """Net inflow per region: column sum minus row sum."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"net_flow needs a square matrix, got shape {M.shape}")
    return M.sum(axis=0) - M.sum(axis=1)


def balancing_cost(X, Y, costs: CostMatrices, beta: float) -> float:
    """Total rebalancing distance of vacant (X) and low-battery (Y) dispatch."""
    X = _stack(X, "X")
    Y = _stack(Y, "Y")
    if X.shape != Y.shape or X.shape[1] != costs.N:
        raise DimensionError(f"X {X.shape} and Y {Y.shape} inconsistent with N={costs.N}")
    unreach = costs.unreachable
    if np.any(Y[:, unreach] != 0):
        raise DomainError("low-battery dispatch into a region without charging stations")
    W = costs.W
    return float(np.einsum("kij,ij->", X, W) + beta * np.einsum("kij,ij->", Y, np.where(unreach, 0.0, W)))


def charging_arrivals(Y, L):
    """Low-battery vehicles in each region once step-k charging dispatch completes.

    ``L[k] + net_flow(Y[k])`` for every step; used as the per-region arrival
    rate at charging stations.
    """
    Y = _stack(Y, "Y")
    L = np.atleast_2d(np.asarray(L, dtype=float))
    if L.shape != Y.shape[:2]:
        raise DimensionError(f"L shape {L.shape} does not match Y {Y.shape}")
    return L + np.stack([net_flow(y) for y in Y])


def _clip_small_negative(v, name):
    v = np.asarray(v, dtype=float)
    worst = v.min() if v.size else 0.0
    if worst < -CLIP_TOL:
        raise InfeasibleDispatchError(f"{name} has negative entry {worst:.3g}")
    if worst < 0:
        log.warning("clipping %s entries in [%g, 0) to zero", name, worst)
        v = np.maximum(v, 0.0)
    return v


def propagate(state: FleetState, Xk, Yk, trans: TransitionStep, ck) -> FleetState:
    """Advance the fleet one step under dispatch (Xk, Yk) and new supply ck."""
    N = state.N
    Xk = np.asarray(Xk, dtype=float)
    Yk = np.asarray(Yk, dtype=float)
    ck = np.asarray(ck, dtype=float)
    if Xk.shape != (N, N) or Yk.shape != (N, N) or trans.N != N or ck.shape != (N,):
        raise DimensionError("propagate inputs inconsistent with state size")
    if np.any(ck < 0):
        raise ValueError("new supply ck must be nonnegative")
    S = state.V + net_flow(Xk)
    if S.min() < -CLIP_TOL:
        bad = np.flatnonzero(S < -CLIP_TOL).tolist()
        raise InfeasibleDispatchError(f"dispatch sends out more vacant vehicles than present in regions {bad}")
    S = np.maximum(S, 0.0)
    O = state.O
    V_next = trans.Pv.T @ S + trans.Qv.T @ O + ck
    O_next = trans.Po.T @ S + trans.Qo.T @ O
    L_next = net_flow(Yk) + trans.Pl.T @ S
    return FleetState(
        V=_clip_small_negative(V_next, "V"),
        O=_clip_small_negative(O_next, "O"),
        L=_clip_small_negative(L_next, "L"),
    )


def _per_step(x, name):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a tau x N matrix")
    return arr


def utilization_objective(arrivals, c, a: float) -> float:
    """Sum over steps and regions of c / arrivals**a.

    ``c`` may be a ``(tau, N)`` matrix or its step-major flattening.  Entries
    with zero supply contribute nothing, so stationless regions (whose
    arrivals are zero) are admissible.
    """
    A = _per_step(arrivals, "arrivals")
    c = np.asarray(c, dtype=float).reshape(A.shape)
    if not 0.0 < a <= 1.0:
        raise DomainError(f"a must lie in (0, 1], got {a}")
    active = c != 0
    if np.any(A < 0) or np.any(A[active] <= 0):
        raise DomainError("charging arrivals must be positive wherever supply is nonzero")
    return float(np.sum(c[active] / A[active] ** a))


def _ratio_unfairness(num, den, name):
    num = _per_step(num, name)
    den = _per_step(den, name)
    if num.shape != den.shape:
        raise DimensionError("numerator and denominator shapes differ")
    if np.any(den <= 0):
        raise DomainError(f"{name}: denominators must be positive")
    local = num / den
    glob = num.sum(axis=1, keepdims=True) / den.sum(axis=1, keepdims=True)
    return float(np.abs(local - glob).sum())


def unfairness_utilization(arrivals, c) -> float:
    """Total deviation of inverse local charging utilization from the city-wide value."""
    return _ratio_unfairness(c, arrivals, "unfairness_utilization")


def unfairness_ratio(r, S) -> float:
    """Total deviation of each region's demand/supply ratio from the city-wide ratio."""
    return _ratio_unfairness(r, S, "unfairness_ratio")
