"""Linear collision operator, gyro-averaged variants and the characteristics inverse.

The gain part is ``Q+ f = M(v) int sigma(v, v') f(v') dv'`` and the loss part
``nu f`` with ``nu(v) = int sigma(v, v') M(v') dv'``.  On the discrete grid the
integrals are the grid quadrature, so mass conservation, self-adjointness in
``<.,.>_M`` and ``Q M = 0`` hold to round-off.

Three kernel storage modes are supported:

``constant``
    ``sigma`` is a single number; the gain is rank one (any grid size).
``dense``
    the full ``N x N`` matrix ``sigma(v_i, v_j)`` is stored.
``matrix_free``
    ``sigma`` is re-evaluated in row chunks at every apply.

Averaged kernels are exposed through ``level``: 0 is ``sigma``, 1 is the
average over rotations of the first argument and 2 the average over both.
Because grid rotations permute nodes, ``Qbar+ = A o Q+`` and
``Qbarbar+ = A o Q+ o A`` hold exactly and are used for the matrix-free path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ValidationError
from .grid import (
    Distribution,
    VelocityGrid,
    angular_irfft,
    angular_rfft,
    average_values,
    check_same_grid,
    derivative_wavenumbers,
    gyration_values,
)

Evaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]

# Maximum number of nodes for which the N x N kernel is stored.
DEFAULT_MAX_DENSE_NODES = 4096
# Pair evaluations per chunk in matrix-free mode.
_CHUNK_PAIRS = 2_000_000


# ---------------------------------------------------------------------------
# Cross sections

@dataclass(frozen=True, eq=False)
class CrossSection:
    """Symmetric bounded scattering kernel ``sigma(v, v')``.

    Exactly one of ``evaluator``, ``constant`` or ``table`` defines the kernel.
    ``evaluator`` maps broadcastable arrays of velocities (..., 3) to values.
    ``table`` holds node-indexed values for a specific grid size.
    """

    label: str
    alpha1: float
    alpha2: float
    evaluator: Evaluator | None = None
    constant: float | None = None
    table: np.ndarray | None = field(default=None, repr=False)
    params: dict = field(default_factory=dict)
    check_samples: int = 64
    seed: int = 12345

    def __post_init__(self):
        defined = sum(x is not None for x in (self.evaluator, self.constant, self.table))
        if defined != 1:
            raise ValidationError("define exactly one of evaluator/constant/table", field="cross_section")
        if not (0.0 < self.alpha1 <= self.alpha2 < math.inf):
            raise ValidationError(
                f"bounds must satisfy 0 < alpha1 <= alpha2, got ({self.alpha1}, {self.alpha2})",
                field="cross_section",
            )
        if self.table is not None:
            t = np.asarray(self.table, dtype=float)
            if t.ndim != 2 or t.shape[0] != t.shape[1]:
                raise ValidationError("table must be square", field="cross_section")
            if not np.allclose(t, t.T, rtol=1e-12, atol=1e-12 * np.max(np.abs(t))):
                raise ValidationError("tabulated kernel is not symmetric", field="cross_section")
            self._check_bounds(t)
            return
        if self.constant is not None:
            self._check_bounds(np.array([self.constant]))
            return
        rng = np.random.default_rng(self.seed)
        v = rng.uniform(-6.0, 6.0, size=(self.check_samples, 3))
        vp = rng.uniform(-6.0, 6.0, size=(self.check_samples, 3))
        s1 = np.asarray(self.evaluator(v, vp), dtype=float)
        s2 = np.asarray(self.evaluator(vp, v), dtype=float)
        if s1.shape != (self.check_samples,):
            raise ValidationError("evaluator must broadcast over leading axes", field="cross_section")
        scale = max(1.0, float(np.max(np.abs(s1))))
        if np.max(np.abs(s1 - s2)) > 1e-12 * scale:
            raise ValidationError("cross section is not symmetric on sampled pairs", field="cross_section")
        self._check_bounds(s1)

    def _check_bounds(self, values: np.ndarray):
        tol = 1e-12 * max(1.0, self.alpha2)
        if np.min(values) < self.alpha1 - tol or np.max(values) > self.alpha2 + tol:
            raise ValidationError(
                f"sampled values [{np.min(values):.4g}, {np.max(values):.4g}] violate "
                f"bounds [{self.alpha1:.4g}, {self.alpha2:.4g}]",
                field="cross_section",
            )

    def __call__(self, v: np.ndarray, vp: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        vp = np.asarray(vp, dtype=float)
        if self.constant is not None:
            return np.full(np.broadcast_shapes(v.shape[:-1], vp.shape[:-1]), self.constant)
        if self.evaluator is None:
            raise ValidationError("tabulated kernels are only defined on grid nodes", field="cross_section")
        return self.evaluator(v, vp)

    def describe(self) -> dict:
        return {"name": self.label, "params": dict(self.params),
                "alpha1": self.alpha1, "alpha2": self.alpha2}


def constant_cross_section(tau: float = 1.0) -> CrossSection:
    """Relaxation-time kernel ``sigma = 1 / tau``."""
    tau = float(tau)
    if not tau > 0.0:
        raise ValidationError(f"tau must be positive, got {tau}", field="tau")
    return CrossSection("constant", 1.0 / tau, 1.0 / tau, constant=1.0 / tau, params={"tau": tau})


def gauss_mix_cross_section(a: float = 1.0, b: float = 0.5) -> CrossSection:
    """``sigma = a + b exp(-|v - v'|^2)``; invariant under joint rotations."""
    a, b = float(a), float(b)
    if a <= 0.0 or b < 0.0:
        raise ValidationError("need a > 0 and b >= 0", field="cross_section_params")

    def sigma(v, vp):
        d = v - vp
        return a + b * np.exp(-np.sum(d * d, axis=-1))

    return CrossSection("gauss_mix", a, a + b, evaluator=sigma, params={"a": a, "b": b})


_PHI_MAX = 2.0 / math.e  # max of |x e^{-x^2/4}| * |y e^{-y^2/4}|


def gauss_aniso_cross_section(a: float = 1.0, b: float = 0.5, c: float = 0.3) -> CrossSection:
    """``gauss_mix`` plus a rank-two term that is not rotation invariant.

    ``sigma = a + b exp(-|v-v'|^2) + c (phi(v) psi(v') + psi(v) phi(v'))`` with
    ``phi = v_z exp(-|v|^2/4)`` and ``psi = v_x exp(-|v|^2/4)``.  The collision
    frequency stays gyro-invariant while ``Q`` couples ``v_z M`` to the first
    angular mode, so the order-``eta^2`` parallel corrections are nonzero.
    """
    a, b, c = float(a), float(b), float(c)
    lo = a - 2.0 * abs(c) * _PHI_MAX
    if lo <= 0.0 or b < 0.0:
        raise ValidationError("need a > 2|c|(2/e) and b >= 0", field="cross_section_params")

    def sigma(v, vp):
        d = v - vp
        gv = np.exp(-0.25 * np.sum(v * v, axis=-1))
        gp = np.exp(-0.25 * np.sum(vp * vp, axis=-1))
        cross = v[..., 2] * vp[..., 0] + v[..., 0] * vp[..., 2]
        return a + b * np.exp(-np.sum(d * d, axis=-1)) + c * cross * gv * gp

    return CrossSection("gauss_aniso", lo, a + b + 2.0 * abs(c) * _PHI_MAX,
                        evaluator=sigma, params={"a": a, "b": b, "c": c})


def load_tabulated_cross_section(path: str | Path, n_nodes: int | None = None) -> CrossSection:
    """Read a node-indexed kernel from CSV rows ``(i, j, value)``.

    Missing pairs are filled by symmetry; a pair absent in both orders is an error.
    """
    table = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    if table.shape[1] != 3:
        raise ValidationError("tabulated kernel CSV needs columns (i, j, value)", field="cross_section")
    i = table[:, 0].astype(int)
    j = table[:, 1].astype(int)
    n = int(max(i.max(), j.max()) + 1) if n_nodes is None else int(n_nodes)
    if i.min() < 0 or j.min() < 0 or max(i.max(), j.max()) >= n:
        raise ValidationError("node index out of range", field="cross_section")
    mat = np.full((n, n), np.nan)
    mat[i, j] = table[:, 2]
    missing = np.isnan(mat)
    mat[missing] = mat.T[missing]
    if np.isnan(mat).any():
        raise ValidationError("tabulated kernel does not cover every node pair", field="cross_section")
    return CrossSection("tabulated", float(mat.min()), float(mat.max()), table=mat,
                        params={"path": str(path)})


CROSS_SECTIONS: dict[str, Callable[..., CrossSection]] = {
    "constant": constant_cross_section,
    "gauss_mix": gauss_mix_cross_section,
    "gauss_aniso": gauss_aniso_cross_section,
}


def make_cross_section(name: str, params: dict | None = None) -> CrossSection:
    """Look up a cross section in the registry by name."""
    params = dict(params or {})
    if name == "tabulated":
        if "path" not in params:
            raise ValidationError("tabulated kernel needs a 'path' parameter", field="cross_section_params")
        return load_tabulated_cross_section(params["path"], params.get("n_nodes"))
    try:
        factory = CROSS_SECTIONS[name]
    except KeyError:
        raise ValidationError(
            f"unknown cross section {name!r}; known: {sorted(CROSS_SECTIONS) + ['tabulated']}",
            field="cross_section",
        ) from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ValidationError(str(exc), field="cross_section_params") from None


# ---------------------------------------------------------------------------
# Kernel

@dataclass(frozen=True, eq=False)
class CollisionKernel:
    """Cross section discretized on a grid, with ``nu`` and ``nu_bar`` precomputed."""

    grid: VelocityGrid
    cross_section: CrossSection
    storage: str
    sigma: np.ndarray | None = field(repr=False)
    nu: np.ndarray = field(repr=False)
    nu_bar: np.ndarray = field(repr=False)
    level: int = 0
    base: "CollisionKernel | None" = field(default=None, repr=False)

    @property
    def alpha1(self) -> float:
        return self.cross_section.alpha1

    @property
    def alpha2(self) -> float:
        return self.cross_section.alpha2

    @cached_property
    def nu_line_constant(self) -> bool:
        """True when ``nu`` is constant on every gyration orbit."""
        dev = np.max(np.abs(self.nu - self.nu_bar))
        return bool(dev <= 1e-13 * np.max(np.abs(self.nu_bar)))

    @cached_property
    def sigma_bar(self) -> np.ndarray | None:
        """Dense ``sigma_bar`` (rows averaged over rotations), if dense."""
        if self.sigma is None:
            return None
        return average_values(self.grid, self.sigma.T).T

    @cached_property
    def sigma_barbar(self) -> np.ndarray | None:
        if self.sigma is None:
            return None
        sb = self.sigma_bar
        out = average_values(self.grid, sb)
        return 0.5 * (out + out.T)

    def describe(self) -> dict:
        return {"cross_section": self.cross_section.describe(), "storage": self.storage,
                "level": self.level, "nu_line_constant": self.nu_line_constant}


def _sigma_rows(cs: CrossSection, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return np.asarray(cs(rows[:, None, :], cols[None, :, :]), dtype=float)


def _chunk_rows(n_rows: int, n_cols: int) -> int:
    return max(1, min(n_rows, _CHUNK_PAIRS // max(n_cols, 1)))


def build_kernel(
    grid: VelocityGrid,
    cross_section: CrossSection,
    max_dense_nodes: int = DEFAULT_MAX_DENSE_NODES,
    storage: str | None = None,
) -> CollisionKernel:
    """Discretize ``cross_section`` on ``grid``.

    ``storage`` forces a mode; by default constant kernels use the rank-one
    path, other kernels are dense up to ``max_dense_nodes`` nodes.
    """
    n = grid.size
    if storage is None:
        if cross_section.constant is not None:
            storage = "constant"
        elif cross_section.table is not None or n <= max_dense_nodes:
            storage = "dense"
        else:
            storage = "matrix_free"
    if storage not in ("constant", "dense", "matrix_free"):
        raise ValidationError(f"unknown storage {storage!r}", field="storage")
    wm = grid.weights * grid.maxwellian
    sigma = None
    if storage == "constant":
        if cross_section.constant is None:
            raise ValidationError("constant storage needs a constant cross section", field="storage")
        nu = np.full(n, cross_section.constant * float(np.sum(wm)))
    elif cross_section.table is not None:
        if storage != "dense":
            raise ValidationError("tabulated kernels are stored densely", field="storage")
        if cross_section.table.shape != (n, n):
            raise ValidationError(
                f"table is {cross_section.table.shape}, grid has {n} nodes", field="cross_section"
            )
        sigma = np.array(cross_section.table, dtype=float)
        sigma = 0.5 * (sigma + sigma.T)
        nu = sigma @ wm
    elif storage == "dense":
        sigma = np.empty((n, n))
        step = _chunk_rows(n, n)
        for s in range(0, n, step):
            sigma[s:s + step] = _sigma_rows(cross_section, grid.nodes[s:s + step], grid.nodes)
        sigma = 0.5 * (sigma + sigma.T)
        nu = sigma @ wm
    else:
        nu = np.empty(n)
        step = _chunk_rows(n, n)
        for s in range(0, n, step):
            nu[s:s + step] = _sigma_rows(cross_section, grid.nodes[s:s + step], grid.nodes) @ wm
    if sigma is not None:
        sigma.setflags(write=False)
    nu.setflags(write=False)
    nu_bar = average_values(grid, nu)
    nu_bar.setflags(write=False)
    return CollisionKernel(grid, cross_section, storage, sigma, nu, nu_bar)


def averaged_sigma(kernel: CollisionKernel) -> CollisionKernel:
    """Kernel with ``sigma_bar(v, v') = mean_k sigma(R_k v, v')``."""
    base = kernel.base or kernel
    return CollisionKernel(base.grid, base.cross_section, base.storage, base.sigma,
                           base.nu_bar, base.nu_bar, level=1, base=base)


def double_averaged_sigma(kernel: CollisionKernel) -> CollisionKernel:
    """Kernel with ``sigma`` averaged over rotations of both arguments."""
    base = kernel.base or kernel
    return CollisionKernel(base.grid, base.cross_section, base.storage, base.sigma,
                           base.nu_bar, base.nu_bar, level=2, base=base)


def kernel_matrix(kernel: CollisionKernel) -> np.ndarray:
    """Node-pair matrix of the (possibly averaged) kernel, built on demand."""
    base = kernel.base or kernel
    grid = kernel.grid
    if base.storage == "constant":
        return np.full((grid.size, grid.size), base.cross_section.constant)
    if base.sigma is not None:
        return {0: base.sigma, 1: base.sigma_bar, 2: base.sigma_barbar}[kernel.level]
    mat = np.empty((grid.size, grid.size))
    step = _chunk_rows(grid.size, grid.size)
    for s in range(0, grid.size, step):
        mat[s:s + step] = _sigma_rows(base.cross_section, grid.nodes[s:s + step], grid.nodes)
    mat = 0.5 * (mat + mat.T)
    if kernel.level >= 1:
        mat = average_values(grid, mat.T).T
    if kernel.level == 2:
        mat = average_values(grid, mat)
    return mat


# ---------------------------------------------------------------------------
# Raw applies on (..., N) arrays

def _gain_level0(base: CollisionKernel, a: np.ndarray) -> np.ndarray:
    grid = base.grid
    wa = a * grid.weights
    if base.storage == "constant":
        return base.cross_section.constant * np.sum(wa, axis=-1, keepdims=True) * grid.maxwellian
    if base.sigma is not None:
        return (wa @ base.sigma) * grid.maxwellian
    flat = wa.reshape(-1, grid.size).T  # (N, B)
    out = np.empty((grid.size, flat.shape[1]))
    step = _chunk_rows(grid.size, grid.size)
    for s in range(0, grid.size, step):
        out[s:s + step] = _sigma_rows(base.cross_section, grid.nodes[s:s + step], grid.nodes) @ flat
    return out.T.reshape(a.shape) * grid.maxwellian


def gain_values(kernel: CollisionKernel, a: np.ndarray) -> np.ndarray:
    """``Q+`` of the kernel's averaging level applied to a raw (..., N) array."""
    a = np.asarray(a, dtype=float)
    base = kernel.base or kernel
    grid = kernel.grid
    if kernel.level == 0:
        return _gain_level0(base, a)
    if base.sigma is not None:
        mat = base.sigma_bar if kernel.level == 1 else base.sigma_barbar
        return ((a * grid.weights) @ mat.T) * grid.maxwellian
    if kernel.level == 2:
        a = average_values(grid, a)
    return average_values(grid, _gain_level0(base, a))


def q_values(kernel: CollisionKernel, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return gain_values(kernel, a) - kernel.nu * a


def qeta_values(kernel: CollisionKernel, a: np.ndarray, eta: float, adjoint: bool = False) -> np.ndarray:
    sign = 1.0 if adjoint else -1.0
    return q_values(kernel, a) + sign / eta**2 * gyration_values(kernel.grid, a)


def s_eta_values(kernel: CollisionKernel, a: np.ndarray, eta: float) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return gyration_values(kernel.grid, a) / eta**2 + kernel.nu * a


def _line_filter(c: np.ndarray, rate: np.ndarray, e2: float, k: np.ndarray) -> np.ndarray:
    """Multiply angular modes ``c`` by ``e2 / (rate - i k)``; rate per line."""
    return c * (e2 / (rate - 1j * k[:, None]))


def l_eta_values(kernel: CollisionKernel, a: np.ndarray, eta: float, adjoint: bool = False,
                 oversample: int = 8) -> np.ndarray:
    """Characteristics inverse ``L_eta`` of ``S_eta = G / eta^2 + nu``.

    On each gyration orbit the integral along characteristics is evaluated
    mode by mode against the exponential weight ``exp(eta^2 nu_bar tau)``, so
    the normalization ``C_eta`` cancels analytically and nothing overflows.
    When ``nu`` varies along orbits the oscillating part of its antiderivative
    enters as an integrating factor evaluated on an oversampled angle grid.
    With ``adjoint`` the inverse of ``-G / eta^2 + nu`` is returned (``eta^2``
    replaced by ``-eta^2``).
    """
    grid = kernel.grid
    a = np.asarray(a, dtype=float)
    e2 = -eta**2 if adjoint else eta**2
    nbar = grid.cube(kernel.nu_bar)[..., :1, :]  # (n_r, 1, n_z)
    rate = e2 * nbar
    if kernel.nu_line_constant:
        k = derivative_wavenumbers(grid.n_angle)
        c = angular_rfft(grid, a)
        return angular_irfft(grid, _line_filter(c, rate, e2, k))
    n = grid.n_angle
    nf = oversample * n
    nf_modes = nf // 2 + 1
    # periodic antiderivative of nu - nu_bar along the orbit
    nu_c = np.fft.rfft(grid.cube(kernel.nu), axis=-2) / n
    h_c = np.fft.rfft(grid.cube(a), axis=-2) / n
    k = np.arange(nu_c.shape[-2], dtype=float)
    anti = np.zeros_like(nu_c)
    anti[..., 1:, :] = nu_c[..., 1:, :] / (1j * k[1:, None])
    theta_f = 2.0 * np.pi * np.arange(nf) / nf
    nyq_term = 0.0
    if n % 2 == 0:
        # real-convention Nyquist: c cos(K theta) integrates to c sin(K theta) / K
        kn = n // 2
        nyq_term = nu_c[..., -1:, :].real * (np.sin(kn * theta_f)[:, None] / kn)
        anti[..., -1, :] = 0.0
        h_c[..., -1, :] *= 0.5

    def upsample(coef):
        out = np.zeros(coef.shape[:-2] + (nf_modes, coef.shape[-1]), dtype=complex)
        out[..., : coef.shape[-2], :] = coef
        return np.fft.irfft(out * nf, n=nf, axis=-2)

    anti_f = upsample(anti) + nyq_term
    weight = np.exp(-e2 * anti_f)
    kf = derivative_wavenumbers(nf)
    cf = np.fft.rfft(upsample(h_c) * weight, axis=-2)
    u_f = np.fft.irfft(_line_filter(cf, rate, e2, kf), n=nf, axis=-2)
    return grid.flat((u_f / weight)[..., ::oversample, :])


# ---------------------------------------------------------------------------
# Public operators on distributions

def collision_frequency(kernel: CollisionKernel) -> Distribution:
    """``nu_i = sum_j w_j sigma_ij M_j``."""
    return Distribution(kernel.grid, kernel.nu)


def averaged_frequency(kernel: CollisionKernel) -> Distribution:
    return Distribution(kernel.grid, kernel.nu_bar)


def apply_gain(kernel: CollisionKernel, f: Distribution) -> Distribution:
    check_same_grid(f, Distribution(kernel.grid, kernel.nu))
    return Distribution(f.grid, gain_values(kernel, f.values))


def apply_Q(kernel: CollisionKernel, f: Distribution) -> Distribution:
    """``Q f = Q+ f - nu f``."""
    check_same_grid(f, Distribution(kernel.grid, kernel.nu))
    return Distribution(f.grid, q_values(kernel, f.values))


def apply_Qbar(kernel: CollisionKernel, f: Distribution) -> Distribution:
    return apply_Q(averaged_sigma(kernel), f)


def apply_Qbarbar(kernel: CollisionKernel, f: Distribution) -> Distribution:
    return apply_Q(double_averaged_sigma(kernel), f)


def _check_eta(eta: float) -> float:
    eta = float(eta)
    if not (eta > 0.0 and math.isfinite(eta)):
        raise ValidationError(f"eta must be positive, got {eta}", field="eta")
    return eta


def apply_Qeta(kernel: CollisionKernel, f: Distribution, eta: float) -> Distribution:
    """``Q^eta f = Q f - G f / eta^2``."""
    eta = _check_eta(eta)
    check_same_grid(f, Distribution(kernel.grid, kernel.nu))
    return Distribution(f.grid, qeta_values(kernel, f.values, eta))


def apply_Qeta_adjoint(kernel: CollisionKernel, f: Distribution, eta: float) -> Distribution:
    """Adjoint of ``Q^eta`` in ``<.,.>_M``: ``Q f + G f / eta^2``."""
    eta = _check_eta(eta)
    check_same_grid(f, Distribution(kernel.grid, kernel.nu))
    return Distribution(f.grid, qeta_values(kernel, f.values, eta, adjoint=True))


def apply_S_eta(kernel: CollisionKernel, f: Distribution, eta: float) -> Distribution:
    """``S^eta f = G f / eta^2 + nu f``."""
    eta = _check_eta(eta)
    return Distribution(f.grid, s_eta_values(kernel, f.values, eta))


def apply_L_eta(kernel: CollisionKernel, f: Distribution, eta: float,
                adjoint: bool = False) -> Distribution:
    """Inverse of ``S^eta`` by integration along gyration characteristics."""
    eta = _check_eta(eta)
    return Distribution(f.grid, l_eta_values(kernel, f.values, eta, adjoint=adjoint))


def l_eta_envelope(kernel: CollisionKernel, f: Distribution, eta: float, oversample: int = 64) -> Distribution:
    """Pointwise upper bound for ``|L_eta f|`` built from the kernel bounds.

    ``eta^2 / (exp(2 pi a1 eta^2) - 1) * int_0^{2pi} |f(R_tau v)| exp(a2 eta^2 tau) dtau``
    with ``a_i = alpha_i * massM`` the bounds of the discrete ``nu``.  The
    integral uses the trigonometric interpolant of ``f`` sampled on a fine
    angle grid and the trapezoidal rule.
    """
    eta = _check_eta(eta)
    grid = kernel.grid
    m = grid.mass_maxwellian
    a1, a2 = kernel.alpha1 * m, kernel.alpha2 * m
    n = grid.n_angle
    nf = oversample * n
    coef = np.fft.rfft(grid.cube(f.values), axis=-2)
    if n % 2 == 0:
        coef[..., -1, :] *= 0.5
    pad = np.zeros(coef.shape[:-2] + (nf // 2 + 1, coef.shape[-1]), dtype=complex)
    pad[..., : coef.shape[-2], :] = coef
    fine = np.abs(np.fft.irfft(pad * (nf / n), n=nf, axis=-2))  # |f| on fine angles
    tau = 2.0 * np.pi * np.arange(nf + 1) / nf
    expo = np.exp(a2 * eta**2 * tau)
    out = np.empty(grid.shape)
    for j in range(n):
        # f(R_tau v) at angle theta_j - tau
        idx = (j * oversample - np.arange(nf + 1)) % nf
        vals = fine[:, idx, :] * expo[None, :, None]
        out[:, j, :] = np.trapezoid(vals, tau, axis=1)
    pref = eta**2 / math.expm1(2.0 * np.pi * a1 * eta**2)
    return Distribution(grid, grid.flat(out) * pref)
