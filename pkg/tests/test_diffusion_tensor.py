from __future__ import annotations

import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magdiff import (
    DiffusionTensor,
    ValidationError,
    assemble_D_eta,
    build_grid,
    build_kernel,
    compute_expansion,
    d_parallel,
    expansion_tensor,
    make_cross_section,
    relaxation_reference,
    solve_chi_eta,
)
from magdiff.diffusion_tensor import (
    ROTATION_BLOCK,
    SWEEP_COLUMNS,
    drift_vector,
    expansion_blocks,
    is_positive_definite,
    max_relative_error,
    richardson_limit,
    write_sweep_csv,
)


@pytest.fixture(scope="module")
def fine_relax():
    grid = build_grid(16, 32, 32)
    return build_kernel(grid, make_cross_section("constant", {"tau": 1.0}))


@pytest.fixture(scope="module")
def terms(kernels):
    return {name: compute_expansion(kernels[name]) for name in ("constant", "gauss_mix", "gauss_aniso")}


def _second_moment(grid, comp):
    return float(np.sum(grid.weights * comp**2 * grid.maxwellian))


# ---------------------------------------------------------------------------
# closed form


def test_relaxation_reference_unit_case():
    d = relaxation_reference(1.0, 1.0).d
    expected = np.array([[0.5, 0.5, 0.0], [-0.5, 0.5, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(d, expected, atol=1e-15)


def test_relaxation_reference_small_eta_limit():
    t = relaxation_reference(1.0, 1e-3)
    np.testing.assert_allclose(t.antisym[:2, :2], ROTATION_BLOCK[:2, :2], atol=1e-11)
    assert np.max(np.abs(t.sym[:2, :2])) < 2e-6


@given(tau=st.floats(0.05, 20.0), eta=st.floats(0.05, 5.0))
@settings(max_examples=50, deadline=None)
def test_relaxation_reference_structure(tau, eta):
    t = relaxation_reference(tau, eta)
    np.testing.assert_allclose(t.sym + t.antisym, t.d, atol=1e-15 * tau)
    expected = tau * eta**2 / (tau**2 + eta**4)
    np.testing.assert_allclose(t.sym[:2, :2], expected * np.eye(2), rtol=1e-12)
    assert t.d[2, 2] == pytest.approx(tau)
    assert is_positive_definite(t)


@pytest.mark.parametrize("tau,eta", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
def test_relaxation_reference_rejects_nonpositive(tau, eta):
    with pytest.raises(ValidationError):
        relaxation_reference(tau, eta)


@pytest.mark.parametrize("eta", [1.0, 0.5])
def test_relaxation_assembly_default_grid(kernels, eta):
    # default-grid error is dominated by the second-moment quadrature, about 3e-4
    d = assemble_D_eta(solve_chi_eta(kernels["constant"], eta))
    assert max_relative_error(d, relaxation_reference(1.0, eta)) <= 1e-3


@pytest.mark.parametrize("eta", [1.0, 0.5])
def test_relaxation_assembly_refined_grid(fine_relax, eta):
    d = assemble_D_eta(solve_chi_eta(fine_relax, eta))
    assert max_relative_error(d, relaxation_reference(1.0, eta)) <= 1e-6


def test_relaxation_assembly_matches_discrete_moments(kernels, grid):
    # with the discrete nu and second moments the match is exact to round-off
    k = kernels["constant"]
    eta = 0.5
    tau = 1.0 / k.nu[0]
    d = assemble_D_eta(solve_chi_eta(k, eta)).d
    ref = relaxation_reference(tau, eta).d
    scale = np.array([_second_moment(grid, grid.vx)] * 2 + [_second_moment(grid, grid.vz)])
    np.testing.assert_allclose(d, ref * scale[:, None], atol=1e-13)


# ---------------------------------------------------------------------------
# general kernels


@pytest.mark.parametrize("name", ["constant", "gauss_mix", "gauss_aniso"])
@pytest.mark.parametrize("eta", [0.25, 1.0])
def test_positive_definite(kernels, name, eta):
    t = assemble_D_eta(solve_chi_eta(kernels[name], eta))
    x = np.random.default_rng(7).normal(size=(100, 3))
    assert np.all(t.quadratic_form(x) > 0.0)
    assert is_positive_definite(t)


@pytest.mark.parametrize("name", ["gauss_mix", "gauss_aniso"])
@pytest.mark.parametrize("eta", [0.2, 0.7])
def test_adjoint_assembly_agrees(kernels, name, eta):
    direct = assemble_D_eta(solve_chi_eta(kernels[name], eta))
    adjoint = assemble_D_eta(solve_chi_eta(kernels[name], eta, adjoint=True))
    assert adjoint.provenance == "adjoint"
    np.testing.assert_allclose(adjoint.d, direct.d, atol=1e-12 * np.abs(direct.d).max())


def test_split_invariants(kernels):
    t = assemble_D_eta(solve_chi_eta(kernels["gauss_aniso"], 0.5))
    np.testing.assert_allclose(t.sym, t.sym.T, atol=0)
    np.testing.assert_allclose(t.antisym, -t.antisym.T, atol=0)
    np.testing.assert_allclose(t.sym + t.antisym, t.d, atol=1e-15)


def test_drift_vector_cross_product_identity(rng):
    a = rng.normal(size=(3, 3))
    a = 0.5 * (a - a.T)
    u = drift_vector(a)
    for z in rng.normal(size=(10, 3)):
        np.testing.assert_allclose(-a @ z, np.cross(u, z), atol=1e-13)


# ---------------------------------------------------------------------------
# D_z and the expansion


def test_d_parallel_relaxation(terms, grid, kernels):
    tau = 1.0 / kernels["constant"].nu[0]
    assert d_parallel(terms["constant"]) == pytest.approx(tau * _second_moment(grid, grid.vz), rel=1e-13)
    assert d_parallel(terms["constant"]) == pytest.approx(1.0, rel=1e-3)


@pytest.mark.parametrize("name", ["constant", "gauss_mix", "gauss_aniso"])
def test_d_parallel_positive(terms, name):
    assert d_parallel(terms[name]) > 0.0


@pytest.mark.parametrize("name", ["gauss_mix", "gauss_aniso"])
def test_d_parallel_matches_extrapolated_tensor(kernels, terms, name):
    etas = (0.4, 0.2, 0.1)
    d33 = [assemble_D_eta(solve_chi_eta(kernels[name], e)).d[2, 2] for e in etas]
    limit = richardson_limit(etas, d33, order=4)
    assert limit == pytest.approx(d_parallel(terms[name]), rel=1e-2)


def test_richardson_limit_exact_on_model():
    etas = np.array([0.4, 0.2, 0.1])
    assert richardson_limit(etas, 2.0 + 3.0 * etas**4) == pytest.approx(2.0, abs=1e-14)
    with pytest.raises(ValidationError):
        richardson_limit([0.1, 0.1], [1.0, 1.0])


@pytest.mark.parametrize("name", ["constant", "gauss_mix", "gauss_aniso"])
def test_expansion_leading_rotation_block(terms, grid, name):
    # the leading block is the rotation times the discrete second moment
    e = expansion_tensor(terms[name], 0.3)
    m2 = _second_moment(grid, grid.vx)
    np.testing.assert_allclose(e.antisym[:2, :2], m2 * ROTATION_BLOCK[:2, :2], atol=1e-12)
    assert e.diagnostics["rotation_block_error"] == pytest.approx(abs(1.0 - m2), abs=1e-12)


def test_expansion_drift_vector(terms):
    t = terms["gauss_aniso"]
    c0 = expansion_blocks(t)["c0"]
    eta = 0.3
    e = expansion_tensor(t, eta)
    np.testing.assert_allclose(e.u_drift, [-eta * c0[1], eta * c0[0], 1.0], atol=0)
    assert abs(c0[1]) > 1e-3  # the anisotropic kernel tilts the drift


def test_expansion_drift_matches_antisymmetric_part(terms, rng):
    # with the exact rotation block, -antisym Z = u x Z
    e = expansion_tensor(terms["gauss_aniso"], 0.3)
    anti = e.antisym.copy()
    anti[:2, :2] = ROTATION_BLOCK[:2, :2]
    for z in rng.normal(size=(10, 3)):
        np.testing.assert_allclose(-anti @ z, np.cross(e.u_drift, z), atol=1e-14)


def _remainder_ratio(kernel, t, part):
    errs = []
    for eta in (0.2, 0.1):
        d = assemble_D_eta(solve_chi_eta(kernel, eta))
        e = expansion_tensor(t, eta)
        errs.append(np.max(np.abs(getattr(d, part) - getattr(e, part))))
    return errs[0] / errs[1]


def test_expansion_antisymmetric_order(kernels, terms):
    assert 12.0 <= _remainder_ratio(kernels["gauss_aniso"], terms["gauss_aniso"], "antisym") <= 20.0


@pytest.mark.parametrize("name", ["gauss_mix", "gauss_aniso"])
def test_expansion_symmetric_order(kernels, terms, name):
    # the symmetric part is odd in eta^2 so its remainder is O(eta^6); at least O(eta^4) is required
    assert _remainder_ratio(kernels[name], terms[name], "sym") >= 12.0


def test_expansion_tensor_rejects_bad_eta(terms):
    with pytest.raises(ValidationError):
        expansion_tensor(terms["constant"], 0.0)


# ---------------------------------------------------------------------------
# data type and outputs


def test_tensor_validation():
    with pytest.raises(ValidationError):
        DiffusionTensor(np.eye(2), 1.0, "direct")
    with pytest.raises(ValidationError):
        DiffusionTensor(np.eye(3), 1.0, "guess")
    t = DiffusionTensor(np.eye(3), 1.0, "direct")
    with pytest.raises(ValueError):
        t.d[0, 0] = 2.0


def test_json_report(kernels, tmp_path):
    t = assemble_D_eta(solve_chi_eta(kernels["gauss_mix"], 0.5))
    payload = json.loads(t.save_json(tmp_path / "d.json").read_text())
    np.testing.assert_allclose(payload["matrix"], t.d)
    np.testing.assert_allclose(payload["u_drift"], t.u_drift)
    assert payload["provenance"] == "direct"
    assert payload["eta"] == 0.5
    assert "residual_norm" in payload["diagnostics"]


def test_sweep_csv(tmp_path):
    tensors = [relaxation_reference(1.0, e) for e in (0.5, 1.0)]
    path = write_sweep_csv(tensors, tmp_path / "sweep.csv")
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == SWEEP_COLUMNS
    assert len(rows) == 3
    assert float(rows[2][SWEEP_COLUMNS.index("d12")]) == pytest.approx(0.5)
