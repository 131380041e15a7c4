import csv

import numpy as np
import pytest

from voxmg.discretization import LevelOperator, Scheme, WeightTensor
from voxmg.errors import ParameterError, SingularOperatorError
from voxmg.grid import GridDims, VoxelVolume
from voxmg.mgsolver import (CoarseSolver, ConvergenceReport, LevelKernels, SolverParams,
                            build_hierarchy,
                            level_operators, relax, relax_schedule, residual, solve,
                            solve_coarsest, v_cycle)
from voxmg.system import GradientLinks, LinkField, SystemSpec

from conftest import dense_solve, dense_system, forward_links, rel

SCHEMES = list(Scheme)


def _lin(scheme):
    return Scheme.parse(scheme) is Scheme.LINEAR


def _random_spec(rng, shape, alpha, beta=(1.0, 0.6, 0.3)):
    v = rng.standard_normal(shape)
    links = [rng.standard_normal(g.shape) for g in forward_links(v)]
    return SystemSpec(alpha, beta, value_target=v, gradient_target=LinkField(*links)), v, links


def _single_level(spec, scheme, dtype="binary64"):
    params = SolverParams(scheme, coarsest_max_voxels=1 << 30, precision=dtype)
    lev = build_hierarchy(spec, None, params)[0]
    lev.constraints[...] = spec.constraint_builder(scheme).volume()
    return lev


def test_params_validation():
    with pytest.raises(ParameterError):
        SolverParams(v_cycles=0)
    with pytest.raises(ParameterError):
        SolverParams(precision="binary16")
    with pytest.raises(ParameterError):
        SolverParams(order="random")
    p = SolverParams()
    assert (p.scheme, p.v_cycles, p.relax_passes, p.gs_iters) == (Scheme.HYBRID, 2, 3, 3)
    assert p.coarsest_max_voxels == 4096 and p.precision == "binary32"


def test_hierarchy_dims():
    spec = SystemSpec(0.0, (1, 1, 1), constraints=np.zeros((16, 16, 16)))
    ops = level_operators(spec, GridDims(16, 16, 16), SolverParams(coarsest_max_voxels=64))
    assert [o.dims for o in ops] == [GridDims(16, 16, 16), GridDims(8, 8, 8), GridDims(4, 4, 4)]
    spec = SystemSpec(0.0, (1, 1, 1), constraints=np.zeros((7, 13, 21)))
    ops = level_operators(spec, spec.dims, SolverParams(coarsest_max_voxels=8))
    assert [o.dims for o in ops][:4] == [GridDims(21, 13, 7), GridDims(11, 7, 4),
                                        GridDims(6, 4, 2), GridDims(3, 2, 1)]


def test_hybrid_hierarchy_support():
    spec = SystemSpec(0.0, (1, 1, 1), constraints=np.zeros((8, 8, 8)))
    ops = level_operators(spec, spec.dims, SolverParams("hybrid", coarsest_max_voxels=8))
    assert ops[0].support == 7 and ops[1].support == 27


def test_relax_fixed_point(rng):
    spec, v, links = _random_spec(rng, (4, 5, 6), 0.5)
    A, b = dense_system((4, 5, 6), 0.5, (1.0, 0.6, 0.3), v, links)
    x = np.linalg.solve(A, b).reshape(4, 5, 6)
    lev = _single_level(spec, "hybrid")
    lev.solution[...] = x
    relax(lev, 3, 2)
    assert rel(lev.solution, x) < 1e-13
    assert np.abs(residual(lev)).max() < 1e-12


@pytest.mark.parametrize("scheme", SCHEMES)
@pytest.mark.parametrize("order", ["multicolor", "lexicographic"])
def test_relax_energy_non_increasing(scheme, order, rng):
    spec, _, _ = _random_spec(rng, (5, 4, 6), 0.2)
    params = SolverParams(scheme, coarsest_max_voxels=1 << 30, precision="binary64",
                          order=order)
    lev = build_hierarchy(spec, None, params)[0]
    lev.constraints[...] = spec.constraint_builder(scheme).volume()
    a = lev.op.assemble()
    b = lev.constraints.ravel()

    def energy():
        x = lev.solution.ravel()
        return 0.5 * x @ (a @ x) - b @ x

    last = energy()
    for _ in range(6):
        relax(lev, 1)
        e = energy()
        assert e <= last + 1e-12 * abs(last)
        last = e


def test_relax_converges_on_poisson(rng):
    b = rng.standard_normal((4, 4, 4))
    b -= b.mean()
    spec = SystemSpec(0.0, (1, 1, 1), constraints=b)
    lev = _single_level(spec, "constant")
    relax(lev, 100)
    A, _ = dense_system((4, 4, 4), 0.0, (1, 1, 1))
    ref = dense_solve(A, b.ravel(), (4, 4, 4), 0.0)
    x = lev.solution - lev.solution.mean()
    assert rel(x, ref) < 1e-6


def test_relax_schedule_shape():
    blocks = list(relax_schedule(4, 3))
    assert blocks[0] == (0, [0]) and blocks[2] == (2, [2, 1, 0])
    assert blocks[-1] == (5, [3])
    counts = np.zeros(4, int)
    for _, blk in blocks:
        for z in blk:
            counts[z] += 1
    assert counts.tolist() == [3, 3, 3, 3]


def test_singular_diagonal():
    op = LevelOperator.finest("constant", WeightTensor(0, 0, 0), 0.0, GridDims(2, 2, 2))
    kern = LevelKernels(op, np.float64)
    x = np.zeros((2, 2, 2))
    with pytest.raises(SingularOperatorError):
        kern.relax(0, x[0], None, x[1], x[0])
    with pytest.raises(SingularOperatorError):
        CoarseSolver(op)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_residual_matches_dense(scheme, rng):
    spec, v, links = _random_spec(rng, (5, 5, 5), 0.3)
    lev = _single_level(spec, scheme)
    assert rel(residual(lev), lev.constraints) == 0.0
    x = rng.standard_normal((5, 5, 5))
    lev.solution[...] = x
    A, b = dense_system((5, 5, 5), 0.3, (1.0, 0.6, 0.3), v, links, _lin(scheme))
    assert rel(residual(lev).ravel(), b - A @ x.ravel()) < 1e-12


def test_coarse_solver_cases(rng):
    op = LevelOperator.finest("constant", WeightTensor(1, 1, 1), 0.0, GridDims(4, 4, 4))
    cs = CoarseSolver(op)
    assert cs.deflate
    np.testing.assert_array_equal(cs.solve(np.zeros((4, 4, 4))), 0.0)
    b = rng.standard_normal((4, 4, 4))
    x = cs.solve(b)
    assert abs(x.mean()) < 1e-14
    r = (b - b.mean()).ravel() - op.assemble() @ x.ravel()
    assert np.linalg.norm(r) / np.linalg.norm(b) < 1e-10
    op = LevelOperator.finest("linear", WeightTensor(1, 1, 1), 0.7, GridDims(4, 4, 4))
    cs = CoarseSolver(op)
    assert not cs.deflate
    c = 2.5
    bc = (op.assemble() @ np.full(64, c)).reshape(4, 4, 4)
    np.testing.assert_allclose(cs.solve(bc), c, rtol=1e-12)
    b = rng.standard_normal((4, 4, 4))
    x = cs.solve(b)
    assert np.linalg.norm(b.ravel() - op.assemble() @ x.ravel()) / np.linalg.norm(b) < 1e-10


def test_solve_coarsest_screened_constant():
    op = LevelOperator.finest("constant", WeightTensor(1, 1, 1), 2.0, GridDims(3, 3, 3))
    spec = SystemSpec(2.0, (1, 1, 1), constraints=np.full((3, 3, 3), 2.0 * 4.0))
    lev = build_hierarchy(spec, None, SolverParams("constant", precision="binary64"))[0]
    lev.constraints[...] = 8.0
    np.testing.assert_allclose(solve_coarsest(lev), 4.0)
    assert lev.op.dims == op.dims


@pytest.mark.parametrize("scheme", SCHEMES)
@pytest.mark.parametrize("alpha", [0.0, 0.01, 1.0])
def test_dense_oracle(scheme, alpha, rng):
    shape = (6, 7, 8)
    spec, v, links = _random_spec(rng, shape, alpha)
    x, report = solve(spec, params=SolverParams(scheme, 20, coarsest_max_voxels=8,
                                                precision="binary64"))
    A, b = dense_system(shape, alpha, (1.0, 0.6, 0.3), v, links, _lin(scheme))
    ref = dense_solve(A, b, shape, alpha, pin=v.mean())
    assert rel(x.values, ref) < 1e-8
    seq = [report.initial_ratio] + report.ratios
    assert all(b_ < a_ for a_, b_ in zip(seq, seq[1:]) if a_ > 1e-12)


def test_mean_pinned_exactly(rng):
    spec, v, _ = _random_spec(rng, (6, 5, 4), 0.0)
    x, _ = solve(spec, params=SolverParams("hybrid", 1, precision="binary64"))
    assert x.values.mean() == pytest.approx(v.mean(), abs=1e-12)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_diffusion_examples(scheme):
    const = np.full((6, 6, 6), 3.25)
    spec = SystemSpec(0.0, (1, 1, 0.1), value_target=const,
                      gradient_target=GradientLinks(const, mask=(1, 1, 0)))
    x, _ = solve(spec, params=SolverParams(scheme, 2, precision="binary64"), x0=const)
    np.testing.assert_allclose(x.values, 3.25, rtol=1e-12)
    rng = np.random.default_rng(5)
    plane = rng.standard_normal((1, 8, 8))
    zinv = np.repeat(plane, 8, axis=0)
    spec = SystemSpec(0.0, (1, 1, 0.1), value_target=zinv,
                      gradient_target=GradientLinks(zinv, mask=(1, 1, 0)))
    x, _ = solve(spec, params=SolverParams(scheme, 10, coarsest_max_voxels=8,
                                           precision="binary64"))
    assert rel(x.values, zinv) < 1e-6


@pytest.mark.parametrize("scheme", SCHEMES)
def test_step_in_z_diffusion_matches_dense(scheme):
    v = np.zeros((8, 8, 8))
    v[4:] = 10.0
    v += np.linspace(0, 1, 8)[None, None, :]
    spec = SystemSpec(0.0, (1, 1, 0.1), value_target=v,
                      gradient_target=GradientLinks(v, mask=(1, 1, 0)))
    x, _ = solve(spec, params=SolverParams(scheme, 20, coarsest_max_voxels=8,
                                           precision="binary64"))
    A, b = dense_system((8, 8, 8), 0.0, (1, 1, 0.1), v, forward_links(v, (1, 1, 0)),
                        _lin(scheme))
    assert rel(x.values, dense_solve(A, b, v.shape, 0.0, pin=v.mean())) < 1e-6


def test_v_cycle_from_exact_solution(rng):
    spec, v, links = _random_spec(rng, (8, 8, 8), 0.1)
    params = SolverParams("hybrid", precision="binary64", coarsest_max_voxels=8)
    levels = build_hierarchy(spec, None, params)
    levels[0].constraints[...] = spec.constraint_builder("hybrid").volume()
    A, b = dense_system((8, 8, 8), 0.1, (1.0, 0.6, 0.3), v, links)
    levels[0].solution[...] = np.linalg.solve(A, b).reshape(8, 8, 8)
    _, rr = v_cycle(levels, params)
    assert rr < 1e-13


@pytest.mark.parametrize("scheme", SCHEMES)
def test_exponential_decay(scheme):
    rng = np.random.default_rng(11)
    v = rng.standard_normal((32, 32, 32)).cumsum(axis=0)
    spec = SystemSpec(0.0, (1, 1, 0.1), value_target=v,
                      gradient_target=GradientLinks(v, mask=(1, 1, 0)))
    _, rep = solve(spec, params=SolverParams(scheme, 10, precision="binary64",
                                             coarsest_max_voxels=64))
    r = np.array(rep.ratios)
    keep = r > 1e-13      # stay above round-off
    idx = np.arange(len(r))[keep][1:]
    y = np.log(r[idx])
    slope, icpt = np.polyfit(idx, y, 1)
    ss_res = np.sum((y - (slope * idx + icpt)) ** 2)
    r2 = 1 - ss_res / np.sum((y - y.mean()) ** 2)
    assert len(idx) >= 4 and slope < 0 and r2 >= 0.95


def test_multicolor_and_lexicographic_agree(rng):
    spec, _, _ = _random_spec(rng, (10, 12, 9), 0.05)
    out = []
    for order in ("multicolor", "lexicographic"):
        x, rep = solve(spec, params=SolverParams("linear", 15, precision="binary64",
                                                 coarsest_max_voxels=27, order=order))
        assert rep.ratios[-1] < 1e-10
        out.append(x.values)
    assert rel(out[0], out[1]) < 1e-5


def test_binary32_working_precision(rng):
    spec, v, links = _random_spec(rng, (8, 8, 8), 0.1)
    x, rep = solve(spec, params=SolverParams("hybrid", 6, coarsest_max_voxels=8))
    assert x.values.dtype == np.float32
    A, b = dense_system((8, 8, 8), 0.1, (1.0, 0.6, 0.3), v, links)
    assert rel(x.values, np.linalg.solve(A, b).reshape(8, 8, 8)) < 1e-5


def test_report_csv(tmp_path, rng):
    spec, _, _ = _random_spec(rng, (4, 4, 4), 0.1)
    x, rep = solve(spec, params=SolverParams(v_cycles=3))
    assert isinstance(x, VoxelVolume) and isinstance(rep, ConvergenceReport)
    assert len(rep.ratios) == 3 and all(r >= 0 for r in rep.ratios)
    rep.to_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["cycle_index", "residual_ratio", "seconds"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
