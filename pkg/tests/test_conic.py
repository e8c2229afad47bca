import json

import numpy as np
import pytest

from evdro.conic import (
    Affine,
    ConicProgram,
    cone_violation,
    psd_block,
    schur_quadratic_form,
    solve,
    verify_schur,
)
from evdro.errors import DimensionError

BACKENDS = ["clarabel", "cvxopt"]


@pytest.mark.parametrize("backend", BACKENDS)
def test_feasibility_smoke(backend):
    prog = ConicProgram()
    x = prog.add_variable("x", 1)
    prog.add_constraint(x, "nonneg")
    prog.add_constraint(x - 1.0, "zero")
    prog.set_objective(Affine.constant([0.0]) + 0.0 * x)
    res = solve(prog, backend=backend)
    assert res.status == "Optimal"
    assert res.primal["x"][0] == pytest.approx(1.0, abs=1e-7)


@pytest.mark.parametrize("backend", BACKENDS)
def test_soc_identity(backend):
    prog = ConicProgram()
    t = prog.add_variable("t", 1)
    prog.add_constraint(Affine.stack([t, [3.0], [4.0]]), "soc")
    prog.set_objective(t)
    res = solve(prog, backend=backend)
    assert res.optimal and res.objective == pytest.approx(5.0, abs=1e-6)


@pytest.mark.parametrize("backend", BACKENDS)
def test_psd_boundary(backend):
    prog = ConicProgram()
    t = prog.add_variable("t", 1)
    prog.add_constraint(psd_block(t, Affine.constant([1.0]), Affine.constant([1.0])), "psd")
    prog.set_objective(t)
    res = solve(prog, backend=backend)
    assert res.optimal and res.objective == pytest.approx(1.0, abs=1e-6)


def test_power_cone_epigraph():
    # min z s.t. z >= y^-0.5, y = 4  ->  z = 0.5
    prog = ConicProgram()
    z = prog.add_variable("z", 1)
    y = prog.add_variable("y", 1)
    prog.add_constraint(Affine.stack([z, y, [1.0]]), "power", alpha=1 / 1.5)
    prog.add_constraint(y - 4.0, "zero")
    prog.set_objective(z)
    res = solve(prog)
    assert res.optimal and res.objective == pytest.approx(0.5, abs=1e-7)


def test_cvxopt_rejects_power_cone():
    prog = ConicProgram()
    z = prog.add_variable("z", 1)
    prog.add_constraint(Affine.stack([z, [1.0], [1.0]]), "power", alpha=0.5)
    prog.set_objective(z)
    res = solve(prog, backend="cvxopt")
    assert res.status == "NumericalTrouble" and "power cone" in res.message


@pytest.mark.parametrize("backend", BACKENDS)
def test_infeasible_and_unbounded(backend):
    prog = ConicProgram()
    x = prog.add_variable("x", 1)
    prog.add_constraint(x - 2.0, "nonneg")
    prog.add_constraint(1.0 - x, "nonneg")
    prog.set_objective(x)
    assert solve(prog, backend=backend).status == "Infeasible"
    prog = ConicProgram()
    x = prog.add_variable("x", 1)
    prog.add_constraint(1.0 - x, "nonneg")
    prog.set_objective(x)
    assert solve(prog, backend=backend).status == "Unbounded"


def test_symmetric_variable_round_trip():
    prog = ConicProgram()
    Q = prog.add_symmetric("Q", 3)
    target = np.array([[2.0, 0.5, 0.1], [0.5, 1.0, 0.2], [0.1, 0.2, 3.0]])
    prog.add_constraint(Q - target.ravel(), "zero")
    prog.set_objective(Affine.constant([0.0]) + 0.0 * Q.sum())
    res = solve(prog)
    assert np.allclose(res.primal["Q"], target, atol=1e-7)


def test_duals_sign_convention():
    # min x s.t. x - 3 >= 0: multiplier 1 on the active constraint
    prog = ConicProgram()
    x = prog.add_variable("x", 1)
    prog.add_constraint(x - 3.0, "nonneg", name="lb")
    prog.set_objective(x)
    for backend in BACKENDS:
        res = solve(prog, backend=backend)
        assert res.duals["lb"][0] == pytest.approx(1.0, abs=1e-6)


def test_json_export():
    prog = ConicProgram()
    x = prog.add_variable("x", (2, 2))
    prog.add_constraint(x, "nonneg", name="pos")
    prog.add_constraint(x.sum() - 1.0, "zero", name="total")
    prog.set_objective(x.dot([1, 2, 3, 4]))
    doc = json.loads(prog.to_json())
    assert doc["n"] == 4 and doc["objective"] == [1, 2, 3, 4]
    assert [c["cone"] for c in doc["constraints"]] == ["nonneg", "zero"]
    total = doc["constraints"][1]
    assert total["vals"] == [1.0] * 4 and total["const"] == [-1.0]


def test_unregistered_block():
    prog = ConicProgram()
    other = ConicProgram()
    y = other.add_variable("y", 1)
    with pytest.raises(KeyError):
        prog.add_constraint(y, "nonneg")


def test_bad_psd_size():
    prog = ConicProgram()
    x = prog.add_variable("x", 3)
    with pytest.raises(DimensionError):
        prog.add_constraint(x, "psd")


def test_backend_failure_reported():
    prog = ConicProgram()
    x = prog.add_variable("x", 1)
    prog.set_objective(x)
    with pytest.raises(ValueError):
        solve(prog, backend="nope")


def test_cone_violation():
    assert cone_violation([1.0, 3.0, 4.0], "soc") == pytest.approx(4.0)
    assert cone_violation([1.0, 0.0, 0.0, -1.0], "psd") == pytest.approx(1.0)
    assert cone_violation([4.0, 1.0, 3.0], "power", 0.5) == pytest.approx(1.0)


class TestSchur:
    def test_identity(self):
        assert verify_schur(1.0, np.zeros(2), np.eye(2))

    def test_needs_larger_v(self):
        assert not verify_schur(0.0, [2.0], [[1.0]])
        assert verify_schur(1.0, [2.0], [[1.0]])

    def test_criteria_agree_on_random_triples(self):
        rng = np.random.default_rng(0)
        agree = 0
        for _ in range(1000):
            n = int(rng.integers(1, 6))
            rank = int(rng.integers(0, n + 1))
            # nonzero eigenvalues kept in [0.1, 3] so no triple sits within 1e-8 of the boundary
            U, _ = np.linalg.qr(rng.normal(size=(n, n)))
            B = U[:, :rank] * np.sqrt(rng.uniform(0.1, 3.0, rank))
            Q = B @ B.T
            q = B @ rng.normal(size=rank) if rng.uniform() < 0.7 else rng.normal(size=n)
            base = 0.25 * q @ np.linalg.pinv(Q) @ q if rank else 0.0
            v = base + rng.choice([-1, 1]) * rng.uniform(1e-3, 1.0)
            agree += verify_schur(v, q, Q) == schur_quadratic_form(v, q, Q)
        assert agree == 1000
