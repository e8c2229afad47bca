"""Distributionally robust balancing program: assembly, solve and plan extraction.

Three program variants share one set of primal constraints:

* ``Robust``: uncertain demand ``r`` and supply ``c`` are replaced in the
  constraints by their worst-case expectations over the ambiguity sets
  (largest demand, smallest supply).  The objective is ``J_D`` plus the
  worst-case expectation of ``theta * Z^T c``, written through the moment
  dual block (``Q_c, q_c, v_c, t_c``) with a Schur-complement LMI.
* ``NonRobust``: point forecasts everywhere, objective ``J_D + theta Z^T c_hat``.
* ``FullTheorem1``: the Lagrangian form with multipliers frozen at the duals
  of a first ``Robust`` solve, adding the demand-side block
  (``Q_r, q_r, v_r, t_r``).  It is a cross-check, not a replacement.

Variable counts for a horizon ``tau`` with ``nx`` admissible vacant arcs,
``ny`` admissible charging arcs and ``ns`` station regions:

    X: tau*nx   Y: tau*ny   S, D, U: tau*N   Vtraj, Otraj, Ltraj: (tau-1)*N
    Z: tau*ns   Q_c: n(n+1)/2, q_c: n, v_c: 1, t_c: 1  with n = N*tau
    PSD block side: n + 1

``Z`` lives only on station regions; elsewhere the utilization term is
identically zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .ambiguity import AmbiguitySet, worst_case_coordinate_bounds, worst_case_linear
from .conic import RESIDUAL_TOL, Affine, ConicProgram, SolveResult, psd_block, solve, verify_schur
from .errors import DimensionError, InfeasibleProblemError, SolverError
from .fleet import (
    EPS_L,
    EPS_S,
    EPS_Y,
    CostMatrices,
    DecisionPlan,
    FleetState,
    HorizonConfig,
    ServiceBounds,
    TransitionModel,
    balancing_cost,
)

log = logging.getLogger(__name__)

TANGENT_SEGMENTS = 16
MAX_RETRIES = 5
WIDEN_FACTOR = 0.1
# constraint groups whose multipliers enter the frozen Lagrangian
MULTIPLIER_GROUPS = ("ratio_low", "ratio_high", "supply_def", "dyn_V", "dyn_O", "dyn_L", "S_pos", "L_pos")


class Mode(str, Enum):
    ROBUST = "Robust"
    NONROBUST = "NonRobust"
    FULL = "FullTheorem1"


@dataclass(frozen=True)
class ProblemInstance:
    config: HorizonConfig
    costs: CostMatrices
    trans: TransitionModel
    initial: FleetState
    bounds: ServiceBounds
    demand_set: AmbiguitySet
    supply_set: AmbiguitySet
    mode: Mode = Mode.ROBUST

    def __post_init__(self):
        cfg = self.config
        N, tau = cfg.N, cfg.tau
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.costs.N != N or self.initial.N != N or self.trans.N != N:
            raise DimensionError("costs, initial state and transitions must all have N regions")
        if len(self.trans) < tau:
            raise DimensionError(f"need {tau} transition steps, got {len(self.trans)}")
        if self.bounds.l.shape != (tau, N):
            raise DimensionError(f"service bounds must be tau x N = {(tau, N)}")
        for name in ("demand_set", "supply_set"):
            if getattr(self, name).dim != N * tau:
                raise DimensionError(f"{name} has dimension {getattr(self, name).dim}, expected N*tau = {N * tau}")

    def with_mode(self, mode):
        return replace(self, mode=Mode(mode))

    def with_bounds(self, bounds):
        return replace(self, bounds=bounds)

    def uncertainty_values(self):
        """(r_low, r_up, c_low) substituted into the constraints for this instance's mode.

        The ratio band must hold for every admissible expected demand, so its
        lower side sees the smallest and its upper side the largest value.
        """
        if self.mode == Mode.NONROBUST:
            r = self.demand_set.center.copy()
            return r, r.copy(), self.supply_set.center.copy()
        r_up, r_low = worst_case_coordinate_bounds(self.demand_set)
        _, c_low = worst_case_coordinate_bounds(self.supply_set)
        return r_low, r_up, c_low


# -- structural helpers ----------------------------------------------------

@dataclass(frozen=True)
class _Layout:
    N: int
    tau: int
    xarcs: np.ndarray  # (nx, 2)
    yarcs: np.ndarray
    stations: np.ndarray  # region indices with a charging station

    @property
    def nx(self):
        return len(self.xarcs)

    @property
    def ny(self):
        return len(self.yarcs)

    @property
    def ns(self):
        return len(self.stations)


def _arcs(mask):
    return np.argwhere(mask).reshape(-1, 2)


def _incidence(arcs, N):
    """N x n matrix mapping arc flows to net inflow per region."""
    B = np.zeros((N, len(arcs)))
    for a, (i, j) in enumerate(arcs):
        B[j, a] += 1.0
        B[i, a] -= 1.0
    return B


def layout(inst: ProblemInstance) -> _Layout:
    cfg = inst.config
    return _Layout(
        N=cfg.N,
        tau=cfg.tau,
        xarcs=_arcs(inst.costs.vacant_mask(cfg.m1)),
        yarcs=_arcs(inst.costs.charging_mask(cfg.m2)),
        stations=np.flatnonzero(inst.costs.has_station),
    )


def variable_counts(inst: ProblemInstance):
    """Size of every variable block the assembled program will carry."""
    lay = layout(inst)
    N, tau = lay.N, lay.tau
    n = N * tau
    counts = {"X": tau * lay.nx, "Y": tau * lay.ny, "S": n, "D": n, "U": n,
              "Vtraj": (tau - 1) * N, "Otraj": (tau - 1) * N, "Ltraj": (tau - 1) * N, "Z": tau * lay.ns}
    if inst.mode != Mode.NONROBUST:
        counts.update({"Q_c": n * (n + 1) // 2, "q_c": n, "v_c": 1, "t_c": 1})
    if inst.mode == Mode.FULL:
        counts.update({"Q_r": n * (n + 1) // 2, "q_r": n, "v_r": 1, "t_r": 1})
    return counts


def _check_charging_reach(inst: ProblemInstance, lay: _Layout):
    """Every station region must be able to hold a positive number of arrivals at step 1."""
    L1 = inst.initial.L
    allowed = inst.costs.charging_mask(inst.config.m2)
    for i in lay.stations:
        if L1[i] >= EPS_Y:
            continue
        donors = np.flatnonzero(allowed[:, i] & (L1 > 0))
        if donors.size == 0:
            raise InfeasibleProblemError(
                f"station region {i} starts with {L1[i]:g} low-battery vehicles and no region holding "
                f"low-battery vehicles can reach it within m2={inst.config.m2}")


def _tangent_points(lo, hi, m=TANGENT_SEGMENTS):
    return np.geomspace(lo, hi, m)


def _moment_block(prog, name, center, aset: AmbiguitySet, h):
    """Dual encoding of sup E[h^T xi] over a moment ambiguity set.

    Adds Q, q, v, t with [[v, (q - h)^T/2], [(q - h)/2, Q]] PSD, v >= 0 and
    t >= (gamma2 Sigma + c c^T).Q + c^T q + sqrt(gamma1) ||Sigma^{1/2}(q + 2 Q c)||.
    ``h`` is an Affine of length n.  Returns v + t.
    """
    n = center.size
    Q = prog.add_symmetric(f"Q_{name}", n)
    q = prog.add_variable(f"q_{name}", n)
    v = prog.add_variable(f"v_{name}", 1)
    t = prog.add_variable(f"t_{name}", 1)
    prog.add_constraint(psd_block(v, 0.5 * (q - h), Q), "psd", name=f"schur_{name}")
    prog.add_constraint(v, "nonneg", name=f"v_{name}_pos")
    M = aset.gamma2 * aset.Sigma + np.outer(center, center)
    lin = Q.dot(M.ravel()) + q.dot(center)
    Qc = np.kron(np.eye(n), center[None, :]) @ Q
    norm_arg = (np.sqrt(aset.gamma1) * aset.Sigma_sqrt) @ (q + 2.0 * Qc)
    prog.add_constraint(Affine.stack([t - lin, norm_arg]), "soc", name=f"moment_{name}")
    return v + t


# -- assembly ---------------------------------------------------------------

def _assemble_primal(inst: ProblemInstance, epigraph="power"):
    """Shared variables and constraints; returns (program, handles)."""
    cfg = inst.config
    lay = layout(inst)
    N, tau = lay.N, lay.tau
    _check_charging_reach(inst, lay)
    r_low, r_up, c_sub = inst.uncertainty_values()

    prog = ConicProgram()
    prog.metadata.update({"mode": inst.mode.value, "N": N, "tau": tau, "epigraph": epigraph,
                          "xarcs": lay.xarcs.tolist(), "yarcs": lay.yarcs.tolist(),
                          "stations": lay.stations.tolist()})
    prog.parameters.update({"r_low": r_low, "r_up": r_up, "c_low": c_sub})
    X = prog.add_variable("X", tau * lay.nx)
    Y = prog.add_variable("Y", tau * lay.ny)
    S = prog.add_variable("S", tau * N)
    D = prog.add_variable("D", tau * N)
    U = prog.add_variable("U", tau * N)
    if tau > 1:
        Vt = prog.add_variable("Vtraj", (tau - 1) * N)
        Ot = prog.add_variable("Otraj", (tau - 1) * N)
        Lt = prog.add_variable("Ltraj", (tau - 1) * N)
    Z = prog.add_variable("Z", tau * lay.ns) if lay.ns else None

    Bx = _incidence(lay.xarcs, N)
    By = _incidence(lay.yarcs, N)

    def step(expr, k, width):
        return expr[k * width:(k + 1) * width]

    def state(k, init, traj):
        return Affine.constant(init) if k == 0 else step(traj, k - 1, N)

    if lay.nx:
        prog.add_constraint(X, "nonneg", name="X_pos")
    if lay.ny:
        prog.add_constraint(Y, "nonneg", name="Y_pos")

    V0, O0, L0 = inst.initial.V, inst.initial.O, inst.initial.L
    l = inst.bounds.l.ravel()
    h = inst.bounds.h.ravel()
    arrivals = []
    for k in range(tau):
        Sk = step(S, k, N)
        Vk = state(k, V0, Vt if tau > 1 else None)
        Ok = state(k, O0, Ot if tau > 1 else None)
        Lk = state(k, L0, Lt if tau > 1 else None)
        Xk = step(X, k, lay.nx) if lay.nx else Affine.constant(np.zeros(0))
        Yk = step(Y, k, lay.ny) if lay.ny else Affine.constant(np.zeros(0))
        flow_x = Bx @ Xk if lay.nx else Affine.constant(np.zeros(N))
        flow_y = By @ Yk if lay.ny else Affine.constant(np.zeros(N))
        prog.add_constraint(Vk + flow_x - Sk, "zero", name=f"supply_def[{k}]")
        prog.add_constraint(Sk - EPS_S, "nonneg", name=f"S_pos[{k}]")
        # demand/supply ratio band: l S <= r <= h S with slack D^2, U^2
        sl = slice(k * N, (k + 1) * N)
        low = r_low[sl] - l[sl] * Sk
        high = h[sl] * Sk - r_up[sl]
        prog.add_constraint(low, "nonneg", name=f"ratio_low[{k}]")
        prog.add_constraint(high, "nonneg", name=f"ratio_high[{k}]")
        Dk, Uk = step(D, k, N), step(U, k, N)
        for i in range(N):
            # rotated cone: D^2 <= slack  <=>  ||(2 D, slack - 1)|| <= slack + 1
            prog.add_constraint(Affine.stack([low[i] + 1.0, 2.0 * Dk[i], low[i] - 1.0]), "soc")
            prog.add_constraint(Affine.stack([high[i] + 1.0, 2.0 * Uk[i], high[i] - 1.0]), "soc")
        # charging arrivals: low-battery vehicles present after dispatch
        Ak = Lk + flow_y
        arrivals.append(Ak)
        nost = np.flatnonzero(~inst.costs.has_station)
        if nost.size:
            prog.add_constraint(Ak[nost], "nonneg", name=f"arrivals_pos[{k}]")
        if lay.ns:
            prog.add_constraint(Ak[lay.stations] - EPS_Y, "nonneg", name=f"arrivals_station[{k}]")
        ts = inst.trans[k]
        L_next = flow_y + ts.Pl.T @ Sk
        if k + 1 < tau:
            ck = c_sub[k * N:(k + 1) * N]
            Vn, On, Ln = step(Vt, k, N), step(Ot, k, N), step(Lt, k, N)
            prog.add_constraint(ts.Pv.T @ Sk + ts.Qv.T @ Ok + ck - Vn, "zero", name=f"dyn_V[{k}]")
            prog.add_constraint(ts.Po.T @ Sk + ts.Qo.T @ Ok - On, "zero", name=f"dyn_O[{k}]")
            prog.add_constraint(L_next - Ln, "zero", name=f"dyn_L[{k}]")
            prog.add_constraint(Ln - EPS_L, "nonneg", name=f"L_pos[{k}]")
        else:
            # keeps the state handed to the next planning step valid
            prog.add_constraint(L_next - EPS_L, "nonneg", name="L_terminal")

    # utilization epigraph Z >= A^-a on station regions
    if lay.ns:
        a = cfg.a
        if epigraph == "power":
            alpha = 1.0 / (1.0 + a)
            for k in range(tau):
                for s, i in enumerate(lay.stations):
                    prog.add_constraint(Affine.stack([Z[k * lay.ns + s], arrivals[k][i], [1.0]]), "power",
                                        alpha=alpha)
        elif epigraph == "tangent":
            y_max = max(inst.initial.total() + float(np.sum(c_sub)), 2 * EPS_Y)
            pts = _tangent_points(EPS_Y, y_max)
            val, slope = pts ** -a, -a * pts ** (-a - 1)
            for k in range(tau):
                for s, i in enumerate(lay.stations):
                    zi = Z[k * lay.ns + s]
                    Ai = arrivals[k][i]
                    cut = Affine.stack([zi - float(v) - float(g) * (Ai - float(p)) for p, v, g in zip(pts, val, slope)])
                    prog.add_constraint(cut, "nonneg", name=f"tangent[{k},{i}]")
            prog.metadata["tangent_points"] = pts.tolist()
        else:
            raise ValueError(f"unknown epigraph {epigraph!r}")

    # balancing cost
    W = inst.costs.W
    wx = np.tile([W[i, j] for i, j in lay.xarcs], tau)
    wy = np.tile([cfg.beta * W[i, j] for i, j in lay.yarcs], tau)
    jd = Affine.constant([0.0])
    if lay.nx:
        jd = jd + X.dot(wx)
    if lay.ny:
        jd = jd + Y.dot(wy)

    # Z on the full step-major coordinate vector (zero where there is no station)
    n = N * tau
    if lay.ns:
        rows = [k * N + i for k in range(tau) for i in lay.stations]
        E = np.zeros((n, tau * lay.ns))
        E[rows, np.arange(len(rows))] = 1.0
        Zfull = E @ Z
    else:
        Zfull = Affine.constant(np.zeros(n))
    handles = {"layout": lay, "jd": jd, "Zfull": Zfull, "arrivals": arrivals}
    return prog, handles


def assemble_nonrobust(inst: ProblemInstance, epigraph="power") -> ConicProgram:
    """Point-forecast program: J_D + theta * c_hat^T Z."""
    if inst.mode != Mode.NONROBUST:
        inst = inst.with_mode(Mode.NONROBUST)
    prog, hd = _assemble_primal(inst, epigraph)
    theta = inst.config.theta
    je = (theta * inst.supply_set.center) @ hd["Zfull"]
    prog.set_objective(hd["jd"] + je)
    prog.reports = {"jd": hd["jd"], "je": je}
    return prog


def assemble_robust(inst: ProblemInstance, epigraph="power") -> ConicProgram:
    """Worst-case substitution in the constraints plus the moment dual block on the objective."""
    if inst.mode != Mode.ROBUST:
        inst = inst.with_mode(Mode.ROBUST)
    prog, hd = _assemble_primal(inst, epigraph)
    theta = inst.config.theta
    sset = inst.supply_set
    je = _moment_block(prog, "c", sset.center, sset, theta * hd["Zfull"])
    prog.set_objective(hd["jd"] + je)
    prog.reports = {"jd": hd["jd"], "je": je}
    return prog


def _padded(vec, n, offset_steps, N):
    out = np.zeros(n)
    vec = np.asarray(vec, dtype=float)
    out[offset_steps * N: offset_steps * N + vec.size] = vec
    return out


def first_pass_multipliers(res: SolveResult, tau: int):
    """Collect the named constraint duals of a Robust solve, keyed by group and step."""
    if not res.optimal:
        raise SolverError(f"first pass did not solve to optimality: {res.status}")
    out = {}
    for name, val in res.duals.items():
        group = name.split("[")[0]
        if group in MULTIPLIER_GROUPS:
            out[name] = np.asarray(val, dtype=float)
    return out


def assemble_full_theorem1(inst: ProblemInstance, multipliers, epigraph="power") -> ConicProgram:
    """Lagrangian program with multipliers frozen at a first-pass solve.

    Objective: ``J_D - sum_g lambda_g^T g(x)`` over the deterministic parts of
    the multiplier-carrying constraints, plus the demand-side block for
    ``sup E[h_r^T r]`` with ``h_r = lambda_high - lambda_low`` and the
    supply-side block for ``sup E[(theta Z - lambda_V)^T c]``.  The primal
    constraints stay in place, so every point remains a valid plan.
    """
    if multipliers is None:
        raise ValueError("FullTheorem1 assembly needs first-pass multipliers")
    inst = inst.with_mode(Mode.FULL)
    prog, hd = _assemble_primal(inst, epigraph)
    N, tau = inst.config.N, inst.config.tau
    n = N * tau
    theta = inst.config.theta
    r_low, r_up, c_sub = inst.uncertainty_values()
    names = {c.name: c for c in prog.constraints if c.name}

    lag = Affine.constant([0.0])
    lam_low = np.zeros(n)
    lam_high = np.zeros(n)
    lam_V = np.zeros(n)
    for name, lam in multipliers.items():
        if name not in names:
            raise KeyError(f"multiplier {name!r} has no matching constraint")
        con = names[name]
        lam = np.asarray(lam, dtype=float)
        if lam.size != con.expr.size:
            raise DimensionError(f"multiplier {name!r} has length {lam.size}, constraint has {con.expr.size}")
        group = name.split("[")[0]
        k = int(name.split("[")[1].rstrip("]")) if "[" in name else tau - 1
        expr = con.expr
        # strip the substituted uncertain constant; it moves into the moment blocks
        if group == "ratio_low":
            expr = expr - r_low[k * N:(k + 1) * N]
            lam_low[k * N:(k + 1) * N] = lam
        elif group == "ratio_high":
            expr = expr + r_up[k * N:(k + 1) * N]
            lam_high[k * N:(k + 1) * N] = lam
        elif group == "dyn_V":
            expr = expr - c_sub[k * N:(k + 1) * N]
            lam_V[k * N:(k + 1) * N] = lam
        lag = lag - expr.dot(lam)

    h_r = Affine.constant(lam_high - lam_low)
    r_block = _moment_block(prog, "r", inst.demand_set.center, inst.demand_set, h_r)
    c_block = _moment_block(prog, "c", inst.supply_set.center, inst.supply_set, theta * hd["Zfull"] - lam_V)
    prog.set_objective(hd["jd"] + lag + r_block + c_block)
    prog.parameters.update({"lambda_low": lam_low, "lambda_high": lam_high, "lambda_V": lam_V})
    prog.reports = {"jd": hd["jd"], "lagrangian": lag, "r_block": r_block, "je": c_block}
    return prog


def assemble(inst: ProblemInstance, multipliers=None, epigraph="power") -> ConicProgram:
    if inst.mode == Mode.ROBUST:
        return assemble_robust(inst, epigraph)
    if inst.mode == Mode.NONROBUST:
        return assemble_nonrobust(inst, epigraph)
    return assemble_full_theorem1(inst, multipliers, epigraph)


# -- extraction -------------------------------------------------------------

def _clip(arr, name):
    # interior-point solutions sit up to the solver residual outside the cone
    arr = np.asarray(arr, dtype=float)
    if arr.size and arr.min() < -RESIDUAL_TOL * (1 + np.abs(arr).max()):
        raise SolverError(f"solver returned {name} with entry {arr.min():.3g}; residual too large")
    return np.maximum(arr, 0.0)


def objective_parts(prog: ConicProgram, res: SolveResult):
    values = prog.flat_values(res.primal)
    return {k: float(expr.value(values)[0]) for k, expr in prog.reports.items()}


def extract_plan(res: SolveResult, inst: ProblemInstance, prog: ConicProgram) -> DecisionPlan:
    """Read a DecisionPlan out of an optimal solution of ``prog``."""
    if not res.optimal:
        raise SolverError(f"cannot extract a plan from status {res.status}")
    cfg = inst.config
    N, tau = cfg.N, cfg.tau
    lay = layout(inst)
    p = res.primal
    X = np.zeros((tau, N, N))
    Y = np.zeros((tau, N, N))
    xv = _clip(p["X"], "X").reshape(tau, lay.nx)
    yv = _clip(p["Y"], "Y").reshape(tau, lay.ny)
    for k in range(tau):
        if lay.nx:
            X[k, lay.xarcs[:, 0], lay.xarcs[:, 1]] = xv[k]
        if lay.ny:
            Y[k, lay.yarcs[:, 0], lay.yarcs[:, 1]] = yv[k]

    def traj(name, init):
        rest = p[name].reshape(tau - 1, N) if tau > 1 else np.zeros((0, N))
        return np.vstack([init[None], _clip(rest, name)])

    S = np.asarray(p["S"]).reshape(tau, N)
    if S.min() < EPS_S - RESIDUAL_TOL:
        raise SolverError(f"supply S fell below its floor: {S.min():.3g}")
    r_low, r_up, _ = inst.uncertainty_values()
    low = np.maximum(r_low.reshape(tau, N) - inst.bounds.l * S, 0.0)
    high = np.maximum(inst.bounds.h * S - r_up.reshape(tau, N), 0.0)
    Z = np.zeros((tau, N))
    if lay.ns:
        Z[:, lay.stations] = np.asarray(p["Z"]).reshape(tau, lay.ns)
    parts = objective_parts(prog, res)
    jd = balancing_cost(X, Y, inst.costs, cfg.beta)
    parts["jd_recomputed"] = jd
    parts["objective"] = res.objective
    return DecisionPlan(X=X, Y=Y, S=S, D=np.sqrt(low), U=np.sqrt(high),
                        Vtraj=traj("Vtraj", inst.initial.V), Otraj=traj("Otraj", inst.initial.O),
                        Ltraj=traj("Ltraj", inst.initial.L), Z=Z, objective_parts=parts)


def schur_certificates(prog: ConicProgram, res: SolveResult, tol=1e-8):
    """verify_schur on every moment block of a solved program."""
    out = {}
    values = prog.flat_values(res.primal)
    for con in prog.constraints:
        if con.cone != "psd":
            continue
        M = con.expr.value(values).reshape(con.dim, con.dim)
        out[con.name] = verify_schur(M[0, 0], 2.0 * M[0, 1:], M[1:, 1:], tol=tol)
    return out


# -- driver -----------------------------------------------------------------

@dataclass
class PlanOutcome:
    plan: DecisionPlan | None
    result: SolveResult
    program: ConicProgram
    retries: int
    bounds: ServiceBounds


def _default_epigraph(backend):
    return "power" if backend == "clarabel" else "tangent"


def solve_instance(inst: ProblemInstance, backend="clarabel", tol=None, epigraph=None, multipliers=None):
    """Assemble and solve one instance.  FullTheorem1 runs its own first pass if needed."""
    epigraph = epigraph or _default_epigraph(backend)
    if inst.mode == Mode.FULL and multipliers is None:
        first = solve_instance(inst.with_mode(Mode.ROBUST), backend, tol, epigraph)
        multipliers = first_pass_multipliers(first.result, inst.config.tau)
    prog = assemble(inst, multipliers, epigraph)
    res = solve(prog, backend=backend, tol=tol)
    plan = extract_plan(res, inst, prog) if res.optimal else None
    return PlanOutcome(plan, res, prog, 0, inst.bounds)


def solve_with_retries(inst: ProblemInstance, backend="clarabel", tol=None, epigraph=None,
                       max_retries=MAX_RETRIES, factor=WIDEN_FACTOR):
    """Solve, widening the service bounds by ``factor`` after each infeasible attempt."""
    bounds = inst.bounds
    for attempt in range(max_retries + 1):
        out = solve_instance(inst.with_bounds(bounds), backend, tol, epigraph)
        if out.result.status != "Infeasible":
            out.retries = attempt
            return out
        if attempt < max_retries:
            log.warning("%s program infeasible; widening service bounds by %.0f%% (retry %d/%d)",
                        inst.mode.value, 100 * factor, attempt + 1, max_retries)
            bounds = bounds.widened(factor)
    out.retries = max_retries
    return out


def closed_form_je(inst: ProblemInstance, Z):
    """Worst-case expected utilization term for a fixed Z (full step-major vector)."""
    return worst_case_linear(inst.supply_set, inst.config.theta * np.asarray(Z, dtype=float).ravel())
