"""Small random instances shared by the solver and acceptance tests."""

from dataclasses import replace

import numpy as np

from evdro.ambiguity import build_set, singleton_set
from evdro.dro import Mode, ProblemInstance
from evdro.fleet import (
    CostMatrices,
    FleetState,
    HorizonConfig,
    ServiceBounds,
    TransitionModel,
    TransitionStep,
)


def diagonal_step(N, pl=0.1, po=0.3, qv=0.4):
    """Vehicles stay put; only their status changes."""
    eye = np.eye(N)
    return TransitionStep(Pv=(1 - pl - po) * eye, Po=po * eye, Pl=pl * eye, Qv=qv * eye, Qo=(1 - qv) * eye)


def random_step(rng, N):
    P = rng.dirichlet(np.full(3 * N, 0.7), size=N)
    pv, po, pl = P[:, :N], P[:, N:2 * N], P[:, 2 * N:]
    # shrink the low-battery share and hand the rest back to vacant moves
    moved = 0.8 * pl.sum(axis=1, keepdims=True)
    pv = pv + moved * pv / pv.sum(axis=1, keepdims=True)
    Q = rng.dirichlet(np.ones(2 * N), size=N)
    return TransitionStep(Pv=pv, Po=po, Pl=0.2 * pl, Qv=Q[:, :N], Qo=Q[:, N:])


def random_instance(rng, N=3, tau=2, gamma1=0.5, gamma2=None, mode=Mode.ROBUST, theta=1.0, a=0.5):
    xy = rng.uniform(0, 10, size=(N, 2))
    W = np.linalg.norm(xy[:, None] - xy[None], axis=2)
    st = rng.uniform(size=N) < 0.6
    st[rng.integers(N)] = True
    cfg = HorizonConfig(N=N, tau=tau, theta=theta, a=a)
    trans = TransitionModel(tuple(random_step(rng, N) for _ in range(tau)))
    init = FleetState(V=rng.uniform(5, 20, N), O=rng.uniform(5, 15, N), L=rng.uniform(1, 4, N))
    n = N * tau
    A = rng.normal(size=(n, n))
    Sigma = 0.3 * (A @ A.T / n + 0.5 * np.eye(n))
    g2 = max(gamma1, 1.0) + 0.5 if gamma2 is None else gamma2
    dset = build_set(rng.uniform(3, 12, n), Sigma, gamma1, g2)
    sset = build_set(rng.uniform(0.5, 3, n), 0.2 * Sigma, gamma1, g2)
    bounds = ServiceBounds(l=np.full((tau, N), 0.2), h=np.full((tau, N), 4.0))
    return ProblemInstance(cfg, CostMatrices(W, st), trans, init, bounds, dset, sset, mode)


def with_gammas(inst, gamma1, gamma2=None):
    g2 = max(gamma1, 1.0) + 0.5 if gamma2 is None else gamma2
    d, s = inst.demand_set, inst.supply_set
    return replace(inst, demand_set=build_set(d.center, d.Sigma, gamma1, g2),
                   supply_set=build_set(s.center, s.Sigma, gamma1, g2))


def singleton(inst):
    return replace(inst, demand_set=singleton_set(inst.demand_set.center),
                   supply_set=singleton_set(inst.supply_set.center))
