import itertools

import numpy as np
import pytest

from voxmg.discretization import (CONSTANT_TRANSFER, IDENTITY_TRANSFER, LINEAR_TRANSFER,
                                  LevelOperator, Scheme, Stencil3D, TransferStencil,
                                  WeightTensor, galerkin_coarsen, laplacian_stencil,
                                  mass_1d, prolongation_1d, stiffness_1d, transfer_stencils)
from voxmg.errors import ParameterError, UnsupportedStencilError
from voxmg.grid import GridDims
from voxmg.mgsolver import Transfer

from conftest import dense_system

FACES = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def _brute_prolongation(n, linear):
    """Transfer matrix written out from the stencil definition."""
    nc = (n + 1) // 2
    p = np.zeros((n, nc))
    for j in range(nc):
        if linear:
            for u, w in ((-1, 0.5), (0, 1.0), (1, 0.5)):
                if 0 <= 2 * j + u < n:
                    p[2 * j + u, j] = w
        else:
            for u in (0, 1):
                if 2 * j + u < n:
                    p[2 * j + u, j] = 1.0
    if linear:
        p /= p.sum(axis=1, keepdims=True)
    return p


def test_scheme_parse_and_flags():
    assert Scheme.parse("Hybrid") is Scheme.HYBRID
    assert not Scheme.HYBRID.fine_mass and Scheme.HYBRID.linear_transfer
    assert Scheme.LINEAR.fine_mass and not Scheme.CONSTANT.linear_transfer
    with pytest.raises(ParameterError):
        Scheme.parse("cubic")


def test_weight_tensor_validation():
    with pytest.raises(ParameterError):
        WeightTensor(1.0, -1.0, 0.0)
    assert WeightTensor(1, 1, 0).as_tuple() == (1.0, 1.0, 0.0)


def test_constant_isotropic_stencil():
    s = laplacian_stencil("constant", WeightTensor(1, 1, 1), 0.0)
    assert s.center == 6.0
    for off in FACES:
        assert s[off] == -1.0
    assert s.support == 7
    assert s.row_sum == 0.0


def test_constant_projection_stencil_is_5_point():
    s = laplacian_stencil("constant", WeightTensor(1, 1, 0), 0.0)
    assert s.center == 4.0
    assert s[(0, 0, 1)] == 0.0 and s[(0, 0, -1)] == 0.0
    assert s[(1, 0, 0)] == s[(0, -1, 0)] == -1.0
    assert s.support == 5


def test_constant_anisotropic_stencil():
    s = laplacian_stencil("constant", WeightTensor(1, 1, 0.1), 0.0)
    assert s.center == pytest.approx(4.2)
    assert s[(0, 0, 1)] == pytest.approx(-0.1)
    assert s[(1, 0, 0)] == -1.0
    assert s.row_sum == pytest.approx(0.0, abs=1e-15)


def test_negative_alpha_rejected():
    with pytest.raises(ParameterError):
        laplacian_stencil("constant", WeightTensor(1, 1, 1), -1.0)
    with pytest.raises(ParameterError):
        laplacian_stencil("constant", WeightTensor(1, 1, 1), 0.0, level=-1)


@pytest.mark.parametrize("scheme", list(Scheme))
@pytest.mark.parametrize("level", [0, 1, 2])
def test_stencils_symmetric_zero_row_sum(scheme, level):
    s = laplacian_stencil(scheme, WeightTensor(1.0, 0.5, 0.25), 0.0, level)
    assert s.is_symmetric()
    assert abs(s.row_sum) < 1e-12


def test_hybrid_support_growth():
    w = WeightTensor(1, 1, 1)
    assert laplacian_stencil("hybrid", w, 0.0, 0).support == 7
    assert laplacian_stencil("hybrid", w, 0.0, 1).support == 27
    # isotropic trilinear stiffness has zero face entries; anisotropy fills them
    assert laplacian_stencil("linear", WeightTensor(1, 0.5, 0.25), 0.0, 0).support == 27
    assert laplacian_stencil("constant", w, 0.0, 3).support == 7


def test_transfer_stencils():
    assert transfer_stencils("constant") == (CONSTANT_TRANSFER, CONSTANT_TRANSFER)
    assert transfer_stencils("hybrid") == (LINEAR_TRANSFER, LINEAR_TRANSFER)
    assert CONSTANT_TRANSFER.restriction_scale == 8.0
    assert LINEAR_TRANSFER.restriction_scale == 8.0


def test_galerkin_1d_second_difference():
    fine = np.zeros((3, 3, 3))
    fine[1, 1, :] = [-1.0, 2.0, -1.0]
    p = TransferStencil(LINEAR_TRANSFER.weights)
    coarse = galerkin_coarsen(Stencil3D(fine), p)
    # y and z factors contribute (1/2,1,1/2) autocorrelation sums: 1.5 each at the centre
    line = coarse.coeffs[1, 1, :]
    assert line[0] == pytest.approx(-line[1] / 2) and line[2] == pytest.approx(line[0])
    assert coarse.row_sum == pytest.approx(0.0, abs=1e-14)


def test_galerkin_identity_transfer():
    rng = np.random.default_rng(3)
    c = rng.standard_normal((3, 3, 3))
    out = galerkin_coarsen(Stencil3D(c), IDENTITY_TRANSFER)
    np.testing.assert_allclose(out.coeffs, c, atol=1e-15)


def test_galerkin_support_overflow():
    wide = TransferStencil(((-2, 1.0), (0, 1.0), (2, 1.0)))
    with pytest.raises(UnsupportedStencilError):
        galerkin_coarsen(laplacian_stencil("constant", WeightTensor(1, 1, 1), 0.0), wide)


def test_galerkin_stencil_matches_brute_force_interior():
    """Interior row of P^T A P assembled densely on a periodic 1D-per-axis grid."""
    w = WeightTensor(1.0, 0.7, 0.3)
    for scheme in ("hybrid", "linear"):
        fine = laplacian_stencil(scheme, w, 0.05)
        coarse = galerkin_coarsen(fine, LINEAR_TRANSFER)
        n = 8
        op = LevelOperator.finest(scheme, w, 0.05, GridDims(n, n, n), periodic=True)
        a = op.assemble().toarray()
        p1 = np.zeros((n, n // 2))
        for j in range(n // 2):
            for u, wt in ((-1, 0.5), (0, 1.0), (1, 0.5)):
                p1[(2 * j + u) % n, j] = wt
        p = np.kron(p1, np.kron(p1, p1))
        ac = p.T @ a @ p
        nc = n // 2
        centre = (2 * nc + 2) * nc + 2
        for dz, dy, dx in itertools.product((-1, 0, 1), repeat=3):
            col = ((2 + dz) * nc + 2 + dy) * nc + 2 + dx
            assert abs(ac[centre, col] - coarse[(dx, dy, dz)]) < 1e-12


@pytest.mark.parametrize("n", [1, 2, 5, 8, 9])
@pytest.mark.parametrize("linear", [False, True])
def test_prolongation_matches_definition(n, linear):
    p = prolongation_1d(n, linear).toarray()
    np.testing.assert_allclose(p, _brute_prolongation(n, linear) if n > 1 else np.eye(1))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_constant_prolongation_copies_children():
    p = prolongation_1d(6, False).toarray()
    c = np.array([3.0, -1.0, 2.0])
    np.testing.assert_array_equal(p @ c, [3, 3, -1, -1, 2, 2])
    pc = np.kron(p, np.kron(p, p)) @ np.arange(27.0)
    assert pc.reshape(6, 6, 6)[0:2, 0:2, 0:2].ravel().tolist() == [0.0] * 8


def test_linear_prolongation_reproduces_ramp():
    for n in (9, 8):
        p = prolongation_1d(n, True).toarray()
        coarse_x = 2.0 * np.arange(p.shape[1])
        fine = p @ (0.5 * coarse_x + 1.0)
        interior = slice(0, n - 1) if n % 2 == 0 else slice(0, n)
        np.testing.assert_allclose(fine[interior], 0.5 * np.arange(n)[interior] + 1.0)


def test_in_cell_pair_restriction_pathology():
    n = 16
    r = np.zeros(n)
    r[6], r[7] = -1.0, 1.0          # inside coarse cell 3
    rc = prolongation_1d(n, False).T @ r
    assert np.all(rc == 0.0)
    rl = prolongation_1d(n, True).T @ r
    assert np.abs(rl).max() > 0.1
    r2 = np.zeros(n)
    r2[7], r2[8] = -1.0, 1.0        # straddling cells 3 and 4
    assert np.abs(prolongation_1d(n, True).T @ r2).max() > 0.1


@pytest.mark.parametrize("scheme", list(Scheme))
def test_transfer_adjointness(scheme, rng):
    """The slice-wise restriction used by the solver is the exact adjoint of prolongation."""
    dims = GridDims(7, 6, 5)
    op = LevelOperator.finest(scheme, WeightTensor(1, 1, 1), 0.0, dims)
    tr = Transfer(op, scheme)
    cd = dims.coarsened()
    f = rng.standard_normal(dims.shape)
    c = rng.standard_normal(cd.shape)
    rf = np.stack([tr.coarse_slice(j, f, np.float64) for j in range(cd.nz)])
    pc = np.zeros(dims.shape)
    for j in range(cd.nz):
        s = tr.prolong_slice(c[j])
        for i, w in tr.columns[j]:
            pc[i] += w * s
    assert np.vdot(pc, f) == pytest.approx(np.vdot(c, rf), rel=1e-12)
    lin = Scheme.parse(scheme).linear_transfer
    p3 = np.kron(_brute_prolongation(5, lin),
                 np.kron(_brute_prolongation(6, lin), _brute_prolongation(7, lin)))
    np.testing.assert_allclose(rf.ravel(), p3.T @ f.ravel(), atol=1e-12)


@pytest.mark.parametrize("scheme", ["hybrid", "linear"])
@pytest.mark.parametrize("shape", [(5, 6, 7), (9, 4, 8), (3, 9, 9)])
def test_galerkin_operator_matches_brute_force(scheme, shape, rng):
    w = WeightTensor(*rng.uniform(0.1, 1.0, 3))
    alpha = 0.3
    dims = GridDims.from_shape(shape)
    op = LevelOperator.finest(scheme, w, alpha, dims)
    A, _ = dense_system(shape, alpha, w.as_tuple(), linear=(scheme == "linear"))
    nz, ny, nx = shape
    p = np.kron(_brute_prolongation(nz, True),
                np.kron(_brute_prolongation(ny, True), _brute_prolongation(nx, True)))
    coarse = op.coarsen(scheme).assemble().toarray()
    np.testing.assert_allclose(coarse, p.T @ A @ p, atol=1e-12)


def test_constant_coarse_operator_is_rediscretized():
    w = WeightTensor(1.0, 0.5, 0.2)
    op = LevelOperator.finest("constant", w, 0.1, GridDims(8, 8, 8))
    coarse = op.coarsen("constant", w, 0.1)
    assert coarse.is_seven_point
    np.testing.assert_allclose(coarse.interior_stencil().coeffs,
                               laplacian_stencil("constant", w, 0.1, 1).coeffs)
    with pytest.raises(ParameterError):
        op.coarsen("constant")


@pytest.mark.parametrize("scheme", list(Scheme))
@pytest.mark.parametrize("alpha", [0.0, 0.5])
def test_assembled_operator_spd(scheme, alpha):
    op = LevelOperator.finest(scheme, WeightTensor(1.0, 0.3, 0.6), alpha, GridDims(4, 3, 5))
    ops = [op]
    for _ in range(2):
        ops.append(ops[-1].coarsen(scheme, WeightTensor(1.0, 0.3, 0.6), alpha))
    for o in ops:
        a = o.assemble().toarray()
        np.testing.assert_allclose(a, a.T, atol=1e-13)
        ev = np.linalg.eigvalsh(a)
        assert ev.min() >= -1e-10
        if alpha > 0:
            assert ev.min() > 0


def test_boundary_rows_drop_neighbors():
    op = LevelOperator.finest("constant", WeightTensor(1, 1, 1), 0.0, GridDims(3, 3, 3))
    a = op.assemble().toarray()
    assert a[0, 0] == 3.0           # corner: three neighbours
    assert a[13, 13] == 6.0         # centre voxel
    np.testing.assert_allclose(a.sum(axis=1), 0.0, atol=1e-14)


def test_mass_and_stiffness_1d():
    np.testing.assert_allclose(mass_1d(3).toarray(),
                               np.array([[2, 1, 0], [1, 4, 1], [0, 1, 2]]) / 6.0)
    np.testing.assert_array_equal(mass_1d(3, linear=False).toarray(), np.eye(3))
    np.testing.assert_array_equal(stiffness_1d(3).toarray(),
                                  [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
    per = stiffness_1d(4, periodic=True).toarray()
    assert per[0, 3] == -1 and per.sum() == 0
