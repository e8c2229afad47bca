"""A small conic modeling layer and solver contract.

Programs are built from named variable blocks and affine expressions.  Each
constraint states that an affine expression lies in a cone:

* ``zero``      expr == 0
* ``nonneg``    expr >= 0
* ``soc``       expr[0] >= ||expr[1:]||_2
* ``psd``       expr, read as a row-major n x n symmetric matrix, is PSD
* ``power``     expr = (x, y, z) with x**alpha * y**(1 - alpha) >= |z|

The objective is linear.  Programs serialize to a JSON conic standard form
(objective vector, constraint triplets, cone list) and are solved by a
backend (Clarabel natively; CVXOPT without power cones).
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, SolverError

CONES = ("zero", "nonneg", "soc", "psd", "power")
DEFAULT_TOL = 1e-8
RESIDUAL_TOL = 1e-6


def solver_tolerance():
    """Default feasibility/gap tolerance, overridable with ``DRO_SOLVER_TOL``."""
    raw = os.environ.get("DRO_SOLVER_TOL")
    return float(raw) if raw else DEFAULT_TOL


@dataclass(frozen=True)
class Block:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self):
        return int(np.prod(self.shape)) if self.shape else 1


class Affine:
    """Vector-valued affine function ``sum_b A_b x_b + const`` of the block variables."""

    __slots__ = ("terms", "const")
    __array_ufunc__ = None  # make numpy defer to __rmatmul__ / __radd__

    def __init__(self, terms, const):
        self.terms = terms
        self.const = np.asarray(const, dtype=float).reshape(-1)

    @property
    def size(self):
        return self.const.size

    def __len__(self):
        return self.size

    @classmethod
    def constant(cls, value):
        return cls({}, np.asarray(value, dtype=float).reshape(-1))

    def _check(self, other):
        if other.size != self.size:
            raise DimensionError(f"affine size mismatch: {self.size} vs {other.size}")

    def __add__(self, other):
        if not isinstance(other, Affine):
            other = Affine.constant(np.broadcast_to(np.asarray(other, float), (self.size,)))
        self._check(other)
        terms = dict(self.terms)
        for k, m in other.terms.items():
            terms[k] = terms[k] + m if k in terms else m
        return Affine(terms, self.const + other.const)

    __radd__ = __add__

    def __neg__(self):
        return Affine({k: -m for k, m in self.terms.items()}, -self.const)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Affine) else -np.asarray(other, float))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, scalar):
        s = np.asarray(scalar, dtype=float)
        if s.ndim == 0:
            return Affine({k: m * float(s) for k, m in self.terms.items()}, self.const * float(s))
        s = s.reshape(-1)
        if s.size != self.size:
            raise DimensionError("elementwise scale has wrong length")
        D = sp.diags(s)
        return Affine({k: (D @ m).tocsr() for k, m in self.terms.items()}, self.const * s)

    __rmul__ = __mul__

    def __rmatmul__(self, M):
        M = sp.csr_matrix(M) if not sp.issparse(M) else M.tocsr()
        if M.shape[1] != self.size:
            raise DimensionError(f"cannot apply {M.shape} matrix to affine of size {self.size}")
        return Affine({k: (M @ m).tocsr() for k, m in self.terms.items()}, M @ self.const)

    def __getitem__(self, idx):
        rows = np.arange(self.size)[idx]
        rows = np.atleast_1d(rows)
        return Affine({k: m[rows] for k, m in self.terms.items()}, self.const[rows])

    def sum(self):
        return np.ones((1, self.size)) @ self

    def dot(self, w):
        w = np.asarray(w, dtype=float).reshape(1, -1)
        return w @ self

    @staticmethod
    def stack(items):
        items = [it if isinstance(it, Affine) else Affine.constant(it) for it in items]
        const = np.concatenate([it.const for it in items])
        keys = sorted({k for it in items for k in it.terms})
        terms = {}
        for k in keys:
            ncols = next(it.terms[k].shape[1] for it in items if k in it.terms)
            terms[k] = sp.vstack([it.terms.get(k, sp.csr_matrix((it.size, ncols))) for it in items]).tocsr()
        return Affine(terms, const)

    def value(self, values):
        out = self.const.copy()
        for k, m in self.terms.items():
            out += m @ np.asarray(values[k], dtype=float).reshape(-1)
        return out


@dataclass
class Constraint:
    name: str
    expr: Affine
    cone: str
    dim: int = 0
    alpha: float = 0.0


@dataclass
class ConicProgram:
    """Named variable blocks, a linear objective and cone-tagged affine constraints."""

    blocks: dict = field(default_factory=dict)
    constraints: list = field(default_factory=list)
    objective: Affine | None = None
    parameters: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)  # named scalar expressions evaluated after a solve
    n: int = 0

    def add_variable(self, name, shape):
        if name in self.blocks:
            raise ValueError(f"duplicate variable block {name!r}")
        shape = tuple(int(s) for s in np.atleast_1d(shape)) if shape != () else ()
        blk = Block(name, shape, self.n)
        self.blocks[name] = blk
        self.n += blk.size
        return self.var(name)

    def var(self, name):
        blk = self.blocks[name]
        return Affine({name: sp.identity(blk.size, format="csr")}, np.zeros(blk.size))

    def add_symmetric(self, name, n):
        """Symmetric n x n variable stored as its upper triangle.

        Returns the row-major n*n expression; ``unpack`` expands the block
        back to a full matrix.
        """
        m = n * (n + 1) // 2
        self.add_variable(name, (m,))
        self.metadata.setdefault("symmetric_blocks", {})[name] = n
        rows, cols = [], []
        k = 0
        for j in range(n):
            for i in range(j + 1):
                rows += [i * n + j] if i == j else [i * n + j, j * n + i]
                cols += [k] if i == j else [k, k]
                k += 1
        M = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n * n, m))
        return Affine({name: M}, np.zeros(n * n))

    def add_constraint(self, expr, cone, name="", alpha=None):
        if cone not in CONES:
            raise ValueError(f"unknown cone {cone!r}")
        if not isinstance(expr, Affine):
            expr = Affine.constant(expr)
        for k in expr.terms:
            if k not in self.blocks:
                raise KeyError(f"constraint {name!r} references unregistered block {k!r}")
        dim = expr.size
        if cone == "psd":
            n = math.isqrt(dim)
            if n * n != dim:
                raise DimensionError("psd constraint needs an n*n expression")
            dim = n
        if cone == "power":
            if dim != 3 or alpha is None or not 0 < alpha < 1:
                raise ValueError("power cone needs a 3-vector and alpha in (0, 1)")
        if cone == "soc" and dim < 1:
            raise DimensionError("empty second-order cone")
        self.constraints.append(Constraint(name, expr, cone, dim, float(alpha or 0.0)))

    def set_objective(self, expr):
        if expr.size != 1:
            raise DimensionError("objective must be scalar")
        self.objective = expr

    def cone_counts(self):
        counts = {}
        for c in self.constraints:
            counts[c.cone] = counts.get(c.cone, 0) + 1
        return counts

    def uses_cone(self, cone):
        return any(c.cone == cone for c in self.constraints)

    def psd_sizes(self):
        return [c.dim for c in self.constraints if c.cone == "psd"]

    def block_sizes(self):
        return {k: b.size for k, b in self.blocks.items()}

    def _dense_row(self, expr):
        """Global sparse coefficient matrix of ``expr``."""
        mats = []
        for k, m in expr.terms.items():
            blk = self.blocks[k]
            m = m.tocoo()
            mats.append((m.row, m.col + blk.offset, m.data))
        if not mats:
            return sp.csr_matrix((expr.size, self.n))
        rows = np.concatenate([r for r, _, _ in mats])
        cols = np.concatenate([c for _, c, _ in mats])
        vals = np.concatenate([v for _, _, v in mats])
        return sp.csr_matrix((vals, (rows, cols)), shape=(expr.size, self.n))

    def objective_vector(self):
        if self.objective is None:
            return np.zeros(self.n), 0.0
        return self._dense_row(self.objective).toarray().ravel(), float(self.objective.const[0])

    def to_json_dict(self):
        c, c0 = self.objective_vector()
        cons = []
        for con in self.constraints:
            G = self._dense_row(con.expr).tocoo()
            cons.append({
                "name": con.name,
                "cone": con.cone,
                "dim": con.dim,
                "alpha": con.alpha if con.cone == "power" else None,
                "rows": G.row.tolist(),
                "cols": G.col.tolist(),
                "vals": G.data.tolist(),
                "const": con.expr.const.tolist(),
            })
        return {
            "format": "evdro-conic/1",
            "sense": "minimize",
            "n": self.n,
            "objective": c.tolist(),
            "objective_const": c0,
            "blocks": [{"name": b.name, "shape": list(b.shape), "offset": b.offset} for b in self.blocks.values()],
            "constraints": cons,
            "parameters": {k: np.asarray(v).tolist() for k, v in self.parameters.items()},
            "metadata": self.metadata,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_json_dict(), **kw)

    def unpack(self, x):
        out = {k: np.asarray(x[b.offset:b.offset + b.size]).reshape(b.shape) for k, b in self.blocks.items()}
        for name, n in self.metadata.get("symmetric_blocks", {}).items():
            full = np.zeros((n, n))
            iu = [(i, j) for j in range(n) for i in range(j + 1)]
            for k, (i, j) in enumerate(iu):
                full[i, j] = full[j, i] = out[name][k]
            out[name] = full
        return out

    def flat_values(self, values):
        """Inverse of ``unpack`` for the raw block layout used by ``Affine.value``."""
        out = dict(values)
        for name, n in self.metadata.get("symmetric_blocks", {}).items():
            M = np.asarray(values[name])
            if M.ndim == 2:
                out[name] = np.array([M[i, j] for j in range(n) for i in range(j + 1)])
        return out


@dataclass
class SolveResult:
    status: str
    objective: float
    primal: dict
    iterations: int
    max_residual: float
    duals: dict = field(default_factory=dict)
    solve_seconds: float = 0.0
    backend: str = ""
    tolerances: dict = field(default_factory=dict)
    message: str = ""

    @property
    def optimal(self):
        return self.status == "Optimal"

    def to_dict(self):
        return {
            "status": self.status,
            "objective": self.objective,
            "primal": {k: np.asarray(v).tolist() for k, v in self.primal.items()},
            "iterations": self.iterations,
            "max_residual": self.max_residual,
            "solve_seconds": self.solve_seconds,
            "backend": self.backend,
            "tolerances": self.tolerances,
            "message": self.message,
        }


# -- cone residuals ---------------------------------------------------------

def cone_violation(v, cone, alpha=0.0):
    v = np.asarray(v, dtype=float)
    if cone == "zero":
        return float(np.max(np.abs(v))) if v.size else 0.0
    if cone == "nonneg":
        return float(max(0.0, -v.min())) if v.size else 0.0
    if cone == "soc":
        return float(max(0.0, np.linalg.norm(v[1:]) - v[0]))
    if cone == "psd":
        n = math.isqrt(v.size)
        M = v.reshape(n, n)
        return float(max(0.0, -np.linalg.eigvalsh(0.5 * (M + M.T))[0]))
    if cone == "power":
        x, y, z = v
        geo = max(x, 0.0) ** alpha * max(y, 0.0) ** (1 - alpha)
        return float(max(0.0, abs(z) - geo, -x, -y))
    raise ValueError(cone)


def max_cone_residual(prog, values):
    """Largest cone violation, each scaled by 1 + the constraint's constant magnitude."""
    values = prog.flat_values(values)
    worst = 0.0
    for con in prog.constraints:
        v = con.expr.value(values)
        scale = 1.0 + float(np.max(np.abs(con.expr.const))) if con.expr.size else 1.0
        worst = max(worst, cone_violation(v, con.cone, con.alpha) / scale)
    return worst


# -- backends ---------------------------------------------------------------

_SQRT2 = math.sqrt(2.0)


def _svec_map(n):
    """Rows of the full n*n row-major vector feeding Clarabel's scaled upper-triangle svec."""
    idx, scale = [], []
    for j in range(n):
        for i in range(j + 1):
            idx.append(i * n + j)
            scale.append(1.0 if i == j else _SQRT2)
    return np.array(idx), np.array(scale)


CLARABEL_RETRY_SETTINGS = ({}, {"max_step_fraction": 0.9}, {"equilibrate_enable": False})


def _clarabel_solve(prog, tol, max_iter, verbose):
    import clarabel

    order = {"zero": 0, "nonneg": 1, "soc": 2, "power": 3, "psd": 4}
    cons = sorted(enumerate(prog.constraints), key=lambda t: (order[t[1].cone], t[0]))
    # merge adjacent zero / nonneg rows into single cones
    A_parts, b_parts, cones, spans = [], [], [], []
    row = 0
    for _, con in cons:
        G = prog._dense_row(con.expr)
        g = con.expr.const
        if con.cone == "psd":
            idx, scale = _svec_map(con.dim)
            G = sp.diags(scale) @ G[idx]
            g = scale * g[idx]
        A_parts.append(-G)
        b_parts.append(g)
        m = g.size
        if con.cone == "zero":
            cone = ("zero", m)
        elif con.cone == "nonneg":
            cone = ("nonneg", m)
        elif con.cone == "soc":
            cone = ("soc", m)
        elif con.cone == "power":
            cone = ("power", con.alpha)
        else:
            cone = ("psd", con.dim)
        if cones and cone[0] in ("zero", "nonneg") and cones[-1][0] == cone[0]:
            cones[-1] = (cone[0], cones[-1][1] + m)
        else:
            cones.append(cone)
        spans.append((con, row, row + m))
        row += m
    A = sp.vstack(A_parts).tocsc() if A_parts else sp.csc_matrix((0, prog.n))
    b = np.concatenate(b_parts) if b_parts else np.zeros(0)
    cl_cones = []
    for kind, arg in cones:
        if kind == "zero":
            cl_cones.append(clarabel.ZeroConeT(arg))
        elif kind == "nonneg":
            cl_cones.append(clarabel.NonnegativeConeT(arg))
        elif kind == "soc":
            cl_cones.append(clarabel.SecondOrderConeT(arg))
        elif kind == "power":
            cl_cones.append(clarabel.PowerConeT(arg))
        else:
            cl_cones.append(clarabel.PSDTriangleConeT(arg))
    c, _ = prog.objective_vector()
    # interior-point steps occasionally stall on power cones; retry with damped settings
    for extra in CLARABEL_RETRY_SETTINGS:
        settings = clarabel.DefaultSettings()
        settings.verbose = verbose
        settings.tol_feas = tol
        settings.tol_gap_abs = tol
        settings.tol_gap_rel = tol
        settings.max_iter = max_iter
        for key, val in extra.items():
            setattr(settings, key, val)
        solver = clarabel.DefaultSolver(sp.csc_matrix((prog.n, prog.n)), c, A, b, cl_cones, settings)
        sol = solver.solve()
        status = str(sol.status)
        if status in ("Solved", "PrimalInfeasible", "DualInfeasible"):
            break
    mapped = {"Solved": "Optimal", "PrimalInfeasible": "Infeasible", "DualInfeasible": "Unbounded",
              "AlmostSolved": "NumericalTrouble"}.get(status, "NumericalTrouble")
    z = np.asarray(sol.z)
    duals = {}
    for con, lo, hi in spans:
        if con.cone in ("zero", "nonneg") and con.name:
            duals.setdefault(con.name, []).append(z[lo:hi])
    duals = {k: np.concatenate(v) for k, v in duals.items()}
    return mapped, np.asarray(sol.x), int(sol.iterations), duals, status


def _cvxopt_solve(prog, tol, max_iter, verbose):
    import cvxopt
    from cvxopt import solvers

    if prog.uses_cone("power"):
        raise SolverError("cvxopt backend has no power cone; assemble with epigraph='tangent'")
    eq = [con for con in prog.constraints if con.cone == "zero"]
    lin = [con for con in prog.constraints if con.cone == "nonneg"]
    soc = [con for con in prog.constraints if con.cone == "soc"]
    psd = [con for con in prog.constraints if con.cone == "psd"]

    def spm(M):
        M = M.tocoo()
        return cvxopt.spmatrix(M.data.tolist(), M.row.tolist(), M.col.tolist(), size=M.shape)

    G_parts, h_parts = [], []
    for con in lin + soc + psd:
        G_parts.append(-prog._dense_row(con.expr))
        h_parts.append(con.expr.const)
    G = sp.vstack(G_parts).tocsr() if G_parts else sp.csr_matrix((0, prog.n))
    h = np.concatenate(h_parts) if h_parts else np.zeros(0)
    dims = {"l": sum(c.expr.size for c in lin), "q": [c.expr.size for c in soc], "s": [c.dim for c in psd]}
    c, _ = prog.objective_vector()
    kwargs = {}
    if eq:
        A = sp.vstack([prog._dense_row(con.expr) for con in eq]).tocsr()
        b = -np.concatenate([con.expr.const for con in eq])
        kwargs = {"A": spm(A), "b": cvxopt.matrix(b)}
    opts = {"show_progress": verbose, "abstol": tol, "reltol": tol, "feastol": tol, "maxiters": max_iter}
    sol = solvers.conelp(cvxopt.matrix(c), spm(G), cvxopt.matrix(h), dims, options=opts, **kwargs)
    status = sol["status"]
    mapped = {"optimal": "Optimal", "primal infeasible": "Infeasible",
              "dual infeasible": "Unbounded"}.get(status, "NumericalTrouble")
    x = np.array(sol["x"]).ravel() if sol["x"] is not None else np.full(prog.n, np.nan)
    duals = {}
    if sol["z"] is not None:
        z = np.array(sol["z"]).ravel()
        pos = 0
        for con in lin:
            if con.name:
                duals.setdefault(con.name, []).append(z[pos:pos + con.expr.size])
            pos += con.expr.size
    if sol["y"] is not None:
        y = np.array(sol["y"]).ravel()
        pos = 0
        for con in eq:
            if con.name:
                # cvxopt's y multiplies (A x - b); sign-align with s = G x + g in the zero cone
                duals.setdefault(con.name, []).append(-y[pos:pos + con.expr.size])
            pos += con.expr.size
    duals = {k: np.concatenate(v) for k, v in duals.items()}
    return mapped, x, int(sol.get("iterations", 0)), duals, status


BACKENDS = {"clarabel": _clarabel_solve, "cvxopt": _cvxopt_solve}
POWER_CONE_BACKENDS = {"clarabel"}


def solve(prog: ConicProgram, backend="clarabel", tol=None, max_iter=200, verbose=False) -> SolveResult:
    """Solve ``prog``; failures come back as a status, never as an exception."""
    tol = solver_tolerance() if tol is None else tol
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; choose from {sorted(BACKENDS)}")
    started = time.perf_counter()
    try:
        status, x, iters, duals, raw = BACKENDS[backend](prog, tol, max_iter, verbose)
    except Exception as exc:  # backend failures are reported, not raised
        return SolveResult("NumericalTrouble", float("nan"), {}, 0, float("inf"), backend=backend,
                           solve_seconds=time.perf_counter() - started,
                           tolerances={"feas": tol, "gap": tol}, message=f"{type(exc).__name__}: {exc}")
    elapsed = time.perf_counter() - started
    values = prog.unpack(x)
    c, c0 = prog.objective_vector()
    objective = float(c @ x + c0) if np.all(np.isfinite(x)) else float("nan")
    residual = max_cone_residual(prog, values) if np.all(np.isfinite(x)) else float("inf")
    message = raw
    if status == "Optimal" and residual > RESIDUAL_TOL:
        status = "NumericalTrouble"
        message = f"{raw}; max cone residual {residual:.2e} exceeds {RESIDUAL_TOL:.0e}"
    return SolveResult(status, objective, values, iters, residual, duals, elapsed, backend,
                       {"feas": tol, "gap": tol}, message)


def verify_schur(v, qvec, Q, tol=1e-8) -> bool:
    """True iff [[v, q^T/2], [q/2, Q]] is PSD (minimum eigenvalue >= -tol)."""
    qvec = np.atleast_1d(np.asarray(qvec, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = qvec.size
    M = np.empty((n + 1, n + 1))
    M[0, 0] = v
    M[0, 1:] = M[1:, 0] = 0.5 * qvec
    M[1:, 1:] = 0.5 * (Q + Q.T)
    return bool(np.linalg.eigvalsh(M)[0] >= -tol)


def schur_quadratic_form(v, qvec, Q, tol=1e-8) -> bool:
    """The same condition via Q >= 0, q in range(Q) and v >= q^T Q^+ q / 4."""
    qvec = np.atleast_1d(np.asarray(qvec, dtype=float))
    Q = 0.5 * (np.atleast_2d(Q) + np.atleast_2d(Q).T)
    w, U = np.linalg.eigh(Q)
    if w[0] < -tol:
        return False
    proj = U.T @ qvec
    null = w <= tol
    if np.any(np.abs(proj[null]) > np.sqrt(tol)):
        return False
    quad = np.sum(proj[~null] ** 2 / w[~null])
    return bool(v >= 0.25 * quad - tol)


def psd_block(scalar, vec, mat):
    """Row-major affine expression of [[scalar, vec^T], [vec, mat]] for a PSD constraint.

    ``scalar`` is a size-1 Affine, ``vec`` a size-n Affine and ``mat`` a size n*n
    Affine holding a symmetric matrix in row-major order.
    """
    n = vec.size
    parts = [scalar, vec]
    for i in range(n):
        parts.append(vec[i])
        parts.append(mat[i * n:(i + 1) * n])
    return Affine.stack(parts)
