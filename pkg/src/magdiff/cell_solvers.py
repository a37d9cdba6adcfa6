"""Constrained cell problems and the Hilbert-expansion hierarchy.

All solutions are normalized to zero mass.  The full problem
``-Q^eta f = g`` is solved either directly (bordered linear system, exact up
to round-off) or by the fixed-point iteration ``f <- L_eta(Q+ f + g)``.  The
gyro-averaged problems for ``Qbarbar`` reduce to the (radius x parallel)
subgrid, since their solutions do not depend on the angle.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog
from scipy.sparse.linalg import LinearOperator, gmres

from .collision_ops import (
    CollisionKernel,
    averaged_sigma,
    gain_values,
    l_eta_values,
    q_values,
    qeta_values,
)
from .errors import ConvergenceError, PreconditionError, SolvabilityError, ValidationError
from .grid import (
    Distribution,
    VelocityGrid,
    average_values,
    derivative_wavenumbers,
    dump_distribution,
    load_distribution,
    norm_values,
)

# Relative tolerance for zero-mass / zero-average preconditions.
ZERO_TOL = 1e-8
FIXED_POINT_TOL = 1e-10
FIXED_POINT_MAX_ITER = 10_000
METHODS = ("direct", "fixed_point")


# ---------------------------------------------------------------------------
# helpers on raw arrays

def _mass(grid: VelocityGrid, a: np.ndarray) -> np.ndarray:
    return np.asarray(a) @ grid.weights


def _remove_mass(grid: VelocityGrid, a: np.ndarray) -> np.ndarray:
    m = _mass(grid, a) / grid.mass_maxwellian
    return a - np.multiply.outer(m, grid.maxwellian)


def mass_violation(grid: VelocityGrid, a: np.ndarray) -> np.ndarray:
    """``|mass(a)| / (||a||_M ||M||_M)``, a number in [0, 1]."""
    scale = norm_values(grid, a) * math.sqrt(grid.mass_maxwellian)
    m = np.abs(_mass(grid, a))
    return np.where(scale > 0, m / np.where(scale > 0, scale, 1.0), 0.0)


def _check_zero_mass(grid: VelocityGrid, a: np.ndarray, tol: float, what: str,
                     scale: float = 0.0):
    ref = np.maximum(norm_values(grid, a), scale) * math.sqrt(grid.mass_maxwellian)
    m = np.abs(_mass(grid, a))
    viol = float(np.max(np.where(ref > 0, m / np.where(ref > 0, ref, 1.0), 0.0)))
    if viol > tol:
        raise SolvabilityError(f"{what} must have zero mass", viol, tol)


def _check_zero_average(grid: VelocityGrid, a: np.ndarray, tol: float, what: str,
                        scale: float = 0.0):
    avg = norm_values(grid, average_values(grid, a))
    ref = np.maximum(norm_values(grid, a), scale)
    viol = float(np.max(np.where(ref > 0, avg / np.where(ref > 0, ref, 1.0), 0.0)))
    if viol > tol:
        raise PreconditionError(f"{what} must have zero cylindrical average "
                                f"(relative average {viol:.3e} > {tol:.1e})", field=what)


def _check_symmetric(grid: VelocityGrid, a: np.ndarray, tol: float, what: str,
                     scale: float = 0.0):
    dev = norm_values(grid, a - average_values(grid, a))
    ref = np.maximum(norm_values(grid, a), scale)
    viol = float(np.max(np.where(ref > 0, dev / np.where(ref > 0, ref, 1.0), 0.0)))
    if viol > tol:
        raise PreconditionError(f"{what} must be cylindrically symmetric "
                                f"(relative anisotropy {viol:.3e} > {tol:.1e})", field=what)


def _as_values(kernel: CollisionKernel, g) -> np.ndarray:
    if isinstance(g, Distribution):
        if not kernel.grid.same_as(g.grid):
            raise ValidationError("datum lives on a different grid", field="g")
        return g.values
    return np.asarray(g, dtype=float)


# ---------------------------------------------------------------------------
# A_1

def a1_values(kernel: CollisionKernel, g: np.ndarray) -> np.ndarray:
    """``A_1 g`` on raw arrays, assuming ``A g = 0``.

    On each orbit, with ``g = sum_m g_m e^{i m theta}``::

        A_1 g = sum_{m != 0} (i/m) g_m e^{i m theta}
                + (i / nu_bar) sum_{p != 0} g_{-p} nu_p / p

    The second term is constant along the orbit and makes ``A(nu A_1 g) = 0``.
    """
    grid = kernel.grid
    n = grid.n_angle
    g = np.asarray(g, dtype=float)
    k = derivative_wavenumbers(n)
    gc = np.fft.rfft(grid.cube(g), axis=-2)
    inv = np.zeros_like(k, dtype=complex)
    inv[k != 0] = 1j / k[k != 0]
    first = np.fft.irfft(gc * inv[:, None], n=n, axis=-2)
    # orbit-constant correction; Nyquist contributions cancel in +/- pairs
    nc = np.fft.rfft(grid.cube(kernel.nu), axis=-2)
    s = np.sum(np.conj(gc) * nc * inv[:, None], axis=-2)  # sum over p > 0
    corr = 2.0 * np.real(s) / n**2  # p > 0 plus conjugate p < 0 terms
    nbar = grid.cube(kernel.nu_bar)[..., 0, :]
    out = first + (corr / nbar)[..., None, :]
    return grid.flat(out)


def average_A1(kernel: CollisionKernel, g: Distribution, tol: float = ZERO_TOL) -> Distribution:
    """Inverse of the gyration operator on zero-average data, normalized by ``A(nu A_1 g) = 0``."""
    vals = _as_values(kernel, g)
    _check_zero_average(kernel.grid, vals, tol, "g")
    return Distribution(kernel.grid, a1_values(kernel, vals))


# ---------------------------------------------------------------------------
# Full cell problem -Q^eta f = g

def _theta_derivative_matrix(n: int) -> np.ndarray:
    """Matrix of ``G`` on a single orbit (spectral, Nyquist dropped)."""
    k = derivative_wavenumbers(n)
    eye = np.eye(n)
    return np.fft.irfft(np.fft.rfft(eye, axis=0) * (-1j * k)[:, None], n=n, axis=0)


def qeta_matrix(kernel: CollisionKernel, eta: float, adjoint: bool = False) -> np.ndarray:
    """Dense matrix of ``-Q^eta`` (or of ``-Q^{eta*}``)."""
    from .collision_ops import kernel_matrix

    grid = kernel.grid
    sig = kernel_matrix(kernel)
    mat = -(sig * grid.weights[None, :]) * grid.maxwellian[:, None]
    mat[np.diag_indices_from(mat)] += kernel.nu
    d = _theta_derivative_matrix(grid.n_angle)
    gmat = np.kron(np.eye(grid.n_radial), np.kron(d, np.eye(grid.n_parallel)))
    sign = -1.0 if adjoint else 1.0
    return mat + sign / eta**2 * gmat


class QetaSolver:
    """Reusable solver for ``-Q^eta f = g`` with ``mass(f) = 0``.

    ``direct`` factors the bordered system ``[[-Q^eta, M], [w^T, 0]]`` once
    (dense kernels), inverts the characteristics exactly (constant kernels,
    whose gain vanishes on zero-mass data) or runs GMRES on the second-kind
    equation ``f - L_eta Q+ f = L_eta g`` (matrix-free kernels).
    ``fixed_point`` iterates ``f <- P0 L_eta(Q+ f + g)``.
    """

    def __init__(self, kernel: CollisionKernel, eta: float, method: str = "direct",
                 adjoint: bool = False, tol: float = FIXED_POINT_TOL,
                 max_iter: int = FIXED_POINT_MAX_ITER):
        eta = float(eta)
        if not eta > 0.0:
            raise ValidationError(f"eta must be positive, got {eta}", field="eta")
        if method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {method!r}", field="method")
        self.kernel = kernel
        self.eta = eta
        self.method = method
        self.adjoint = adjoint
        self.tol = tol
        self.max_iter = max_iter
        self._lu = None
        self.last_info: dict = {}

    # --- direct -----------------------------------------------------------
    def _factor(self):
        if self._lu is None:
            grid = self.kernel.grid
            n = grid.size
            big = np.zeros((n + 1, n + 1))
            big[:n, :n] = qeta_matrix(self.kernel, self.eta, self.adjoint)
            big[:n, n] = grid.maxwellian
            big[n, :n] = grid.weights
            self._lu = sla.lu_factor(big, check_finite=False)
        return self._lu

    def _direct(self, g: np.ndarray) -> np.ndarray:
        grid = self.kernel.grid
        storage = (self.kernel.base or self.kernel).storage
        if storage == "constant":
            f = l_eta_values(self.kernel, g, self.eta, adjoint=self.adjoint)
            self.last_info = {"solver": "characteristics"}
            return _remove_mass(grid, f)
        if storage == "matrix_free":
            return self._krylov(g)
        lu = self._factor()
        rhs = np.concatenate([g, np.zeros(g.shape[:-1] + (1,))], axis=-1)
        sol = sla.lu_solve(lu, rhs.T, check_finite=False).T
        self.last_info = {"solver": "bordered_lu", "multiplier": sol[..., -1].tolist()}
        return sol[..., :-1]

    def _krylov(self, g: np.ndarray) -> np.ndarray:
        grid = self.kernel.grid
        n = grid.size

        def op(x):
            lq = l_eta_values(self.kernel, gain_values(self.kernel, x), self.eta, adjoint=self.adjoint)
            return x - _remove_mass(grid, lq)

        lin = LinearOperator((n, n), matvec=op, dtype=float)
        outs = []
        iters = []
        for row in np.atleast_2d(g):
            b = _remove_mass(grid, l_eta_values(self.kernel, row, self.eta, adjoint=self.adjoint))
            count = [0]

            def cb(_):
                count[0] += 1

            x, info = gmres(lin, b, rtol=1e-13, atol=0.0, restart=200, maxiter=self.max_iter,
                            callback=cb, callback_type="pr_norm")
            if info != 0:
                raise ConvergenceError("GMRES did not converge", count[0], float("nan"), float("nan"))
            outs.append(x)
            iters.append(count[0])
        self.last_info = {"solver": "gmres", "iterations": iters}
        out = np.array(outs)
        return out.reshape(g.shape)

    # --- fixed point ------------------------------------------------------
    def _fixed_point(self, g: np.ndarray) -> np.ndarray:
        grid = self.kernel.grid
        k, eta, adj = self.kernel, self.eta, self.adjoint
        f = _remove_mass(grid, l_eta_values(k, g, eta, adjoint=adj))
        prev_update = None
        ratios = []
        for it in range(1, self.max_iter + 1):
            f_new = _remove_mass(grid, l_eta_values(k, gain_values(k, f) + g, eta, adjoint=adj))
            upd = float(np.max(norm_values(grid, f_new - f)))
            size = float(np.max(norm_values(grid, f_new)))
            rel = upd / size if size > 0 else 0.0
            if prev_update is not None and prev_update > 0:
                ratios.append(upd / prev_update)
            prev_update = upd
            f = f_new
            if rel < self.tol:
                break
        else:
            raise ConvergenceError("fixed point did not converge", self.max_iter,
                                   ratios[-1] if ratios else float("nan"), rel)
        contraction = float(np.median(ratios[-5:])) if ratios else 0.0
        self.last_info = {"solver": "fixed_point", "iterations": it,
                          "contraction": contraction, "last_update": rel}
        return f

    def solve_values(self, g: np.ndarray, check: bool = True) -> np.ndarray:
        grid = self.kernel.grid
        g = np.asarray(g, dtype=float)
        if check:
            _check_zero_mass(grid, g, ZERO_TOL, "g")
        if self.method == "direct":
            f = self._direct(g)
        else:
            f = self._fixed_point(g)
        f = _remove_mass(grid, f)
        resid = qeta_values(self.kernel, f, self.eta, adjoint=self.adjoint) + g
        gn = norm_values(grid, g)
        rel = norm_values(grid, resid) / np.where(gn > 0, gn, 1.0)
        self.last_info["residual"] = float(np.max(rel))
        self.last_info["mass_defect"] = float(np.max(np.abs(_mass(grid, f))))
        return f

    def solve(self, g: Distribution) -> Distribution:
        return Distribution(self.kernel.grid, self.solve_values(_as_values(self.kernel, g)))


def solve_qeta_cell(kernel: CollisionKernel, g: Distribution, eta: float, method: str = "direct",
                    adjoint: bool = False, tol: float = FIXED_POINT_TOL,
                    max_iter: int = FIXED_POINT_MAX_ITER, info: dict | None = None) -> Distribution:
    """Zero-mass solution of ``-Q^eta f = g`` (``-Q^{eta*} f = g`` with ``adjoint``).

    Raises
    ------
    SolvabilityError
        If ``mass(g)`` is not zero within the relative tolerance.
    ConvergenceError
        If the fixed-point iteration does not converge in ``max_iter`` steps.
    """
    solver = QetaSolver(kernel, eta, method, adjoint, tol, max_iter)
    out = solver.solve(g)
    if info is not None:
        info.update(solver.last_info)
    return out


# ---------------------------------------------------------------------------
# Cell solution X^eta

@dataclass(frozen=True, eq=False)
class CellSolution:
    """Solution of the cell problem ``-Q^eta X = (v_perp / eta^2, v_z) M``."""

    x_perp: tuple[Distribution, Distribution]
    x_z: Distribution
    eta: float
    residual_norm: float
    mass_defect: float
    method: str
    adjoint: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def grid(self) -> VelocityGrid:
        return self.x_z.grid

    @property
    def components(self) -> tuple[Distribution, Distribution, Distribution]:
        return (self.x_perp[0], self.x_perp[1], self.x_z)

    def save(self, directory: str | Path, stem: str = "cell") -> Path:
        """Write one Distribution CSV per component plus a JSON sidecar."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = ("x_x", "x_y", "x_z")
        for name, comp in zip(names, self.components):
            dump_distribution(comp, directory / f"{stem}_{name}.csv")
        meta = {
            "eta": self.eta,
            "method": self.method,
            "adjoint": self.adjoint,
            "residual_norm": self.residual_norm,
            "mass_defect": self.mass_defect,
            "tolerances": {"zero_mass": ZERO_TOL, "fixed_point": FIXED_POINT_TOL},
            "grid": self.grid.describe(),
            "components": [f"{stem}_{n}.csv" for n in names],
            "diagnostics": self.diagnostics,
        }
        path = directory / f"{stem}.json"
        path.write_text(json.dumps(meta, indent=2, default=float))
        return path

    @classmethod
    def load(cls, sidecar: str | Path, grid: VelocityGrid) -> "CellSolution":
        sidecar = Path(sidecar)
        meta = json.loads(sidecar.read_text())
        comps = [load_distribution(sidecar.parent / name, grid) for name in meta["components"]]
        return cls((comps[0], comps[1]), comps[2], meta["eta"], meta["residual_norm"],
                   meta["mass_defect"], meta["method"], meta.get("adjoint", False),
                   meta.get("diagnostics", {}))


def cell_rhs_values(grid: VelocityGrid, eta: float) -> np.ndarray:
    """Stacked right-hand sides ``(v_x / eta^2, v_y / eta^2, v_z) M``, shape (3, N)."""
    scale = np.array([1.0 / eta**2, 1.0 / eta**2, 1.0])
    return (grid.nodes * scale).T * grid.maxwellian


def solve_chi_eta(kernel: CollisionKernel, eta: float, method: str = "direct",
                  adjoint: bool = False, tol: float = FIXED_POINT_TOL,
                  max_iter: int = FIXED_POINT_MAX_ITER) -> CellSolution:
    """Solve the three cell problems sharing one factorization.

    The a priori estimate is reported in ``diagnostics``: ``apriori_ratio`` is
    ``sqrt(||X_z||^2 + ||eta^2 X_perp||^2) / (||v M||_M / (alpha1 massM))``
    and must not exceed one.
    """
    grid = kernel.grid
    solver = QetaSolver(kernel, eta, method, adjoint, tol, max_iter)
    rhs = cell_rhs_values(grid, eta)
    sol = solver.solve_values(rhs)
    info = dict(solver.last_info)
    xs = [Distribution(grid, row) for row in sol]
    nz = float(norm_values(grid, sol[2]))
    nperp = float(np.sqrt(np.sum(norm_values(grid, eta**2 * sol[:2]) ** 2)))
    bound = float(np.sqrt(np.sum(norm_values(grid, (grid.nodes.T * grid.maxwellian)) ** 2)))
    bound /= kernel.alpha1 * grid.mass_maxwellian
    info.update({
        "apriori_lhs": math.hypot(nz, nperp),
        "apriori_lhs_sum": nz + nperp,
        "apriori_bound": bound,
        "apriori_ratio": math.hypot(nz, nperp) / bound,
    })
    return CellSolution((xs[0], xs[1]), xs[2], float(eta), info["residual"],
                        info["mass_defect"], method, adjoint, info)


# ---------------------------------------------------------------------------
# Gyro-averaged problems

def reduced_barbar_matrix(kernel: CollisionKernel) -> np.ndarray:
    """``sigma_barbar`` between orbits, shape (n_lines, n_lines)."""
    base = kernel.base or kernel
    grid = kernel.grid
    nl = grid.n_lines
    if base.storage == "constant":
        return np.full((nl, nl), base.cross_section.constant)
    if base.sigma is not None:
        sbb = base.sigma_barbar.reshape(grid.shape + grid.shape)
        return sbb[:, 0, :, :, 0, :].reshape(nl, nl)
    from .collision_ops import _chunk_rows, _sigma_rows

    out = np.zeros((grid.n_radial, grid.n_parallel, nl))
    step = _chunk_rows(grid.size, grid.size)
    idx = np.arange(grid.size)
    ir, _, iz = np.unravel_index(idx, grid.shape)
    for s in range(0, grid.size, step):
        rows = _sigma_rows(base.cross_section, grid.nodes[s:s + step], grid.nodes)
        red = rows.reshape(-1, *grid.shape).mean(axis=2).reshape(-1, nl)
        np.add.at(out, (ir[s:s + step], iz[s:s + step]), red)
    red = out.reshape(nl, nl) / grid.n_angle
    return 0.5 * (red + red.T)


def _line_values(grid: VelocityGrid, a: np.ndarray) -> np.ndarray:
    return grid.cube(a).mean(axis=-2).reshape(a.shape[:-1] + (grid.n_lines,))


def _expand_lines(grid: VelocityGrid, b: np.ndarray) -> np.ndarray:
    cube = b.reshape(b.shape[:-1] + (grid.n_radial, 1, grid.n_parallel))
    return grid.flat(np.broadcast_to(cube, b.shape[:-1] + grid.shape).copy())


def solve_qbarbar(kernel: CollisionKernel, g: Distribution, tol: float = ZERO_TOL,
                  info: dict | None = None, scale: float = 0.0) -> Distribution:
    """Zero-mass symmetric ``f`` with ``Qbarbar f = g`` (reduced orbit system)."""
    grid = kernel.grid
    g = _as_values(kernel, g)
    _check_symmetric(grid, g, tol, "g", scale)
    _check_zero_mass(grid, g, tol, "g", scale)
    nl = grid.n_lines
    mline = _line_values(grid, grid.maxwellian)
    wline = grid.line_weights.reshape(-1)
    nub = _line_values(grid, kernel.nu_bar)
    red = reduced_barbar_matrix(kernel) * wline[None, :] * mline[:, None]
    red[np.diag_indices(nl)] -= nub
    big = np.zeros((nl + 1, nl + 1))
    big[:nl, :nl] = red
    big[:nl, nl] = mline
    big[nl, :nl] = wline
    rhs = np.concatenate([_line_values(grid, g), np.zeros(g.shape[:-1] + (1,))], axis=-1)
    sol = np.linalg.solve(big, rhs.T).T
    f = _remove_mass(grid, _expand_lines(grid, sol[..., :nl]))
    if info is not None:
        resid = q_values(_double(kernel), f) - g
        info["residual"] = float(np.max(norm_values(grid, resid) / np.maximum(norm_values(grid, g), 1e-300)))
    return Distribution(grid, f)


def _double(kernel: CollisionKernel) -> CollisionKernel:
    from .collision_ops import double_averaged_sigma

    return double_averaged_sigma(kernel)


def qbar_solvability(kernel: CollisionKernel, g: Distribution) -> float:
    """``int nu g / nu_bar dv``, which must vanish for ``Qbar f = g`` to be solvable."""
    g = _as_values(kernel, g)
    return float(np.sum(kernel.grid.weights * kernel.nu * g / kernel.nu_bar))


def solve_qbar(kernel: CollisionKernel, g: Distribution, tol: float = ZERO_TOL,
               info: dict | None = None, scale: float = 0.0) -> Distribution:
    """Zero-mass ``f`` with ``Qbar f = g``.

    The anisotropic part is ``(A g - g) / nu_bar``; the symmetric part solves
    ``Qbarbar fbar = A g + Qbar+((g - A g) / nu_bar)``.

    Raises
    ------
    SolvabilityError
        When ``|int nu g / nu_bar| > tol ||g||_M``.
    """
    grid = kernel.grid
    gv = _as_values(kernel, g)
    gnorm = float(norm_values(grid, gv))
    sol = qbar_solvability(kernel, gv)
    limit = tol * max(gnorm, scale)
    if abs(sol) > limit:
        raise SolvabilityError("Qbar solvability condition violated", abs(sol), limit)
    gbar = average_values(grid, gv)
    ftil = (gbar - gv) / kernel.nu_bar
    rhs = gbar - gain_values(averaged_sigma(kernel), ftil)
    # the symmetric right-hand side inherits exactly the mass int nu g / nu_bar
    rhs = _remove_mass(grid, rhs)
    fbar = solve_qbarbar(kernel, Distribution(grid, rhs), tol=tol,
                         scale=max(gnorm, scale)).values
    f = _remove_mass(grid, fbar + ftil)
    if info is not None:
        resid = q_values(averaged_sigma(kernel), f) - gv
        info["residual"] = float(norm_values(grid, resid) / max(gnorm, 1e-300))
        info["stability_ratio"] = float(norm_values(grid, f) / max(gnorm, 1e-300))
    return Distribution(grid, f)


def solve_gyration_system(kernel: CollisionKernel, g: Distribution, h: Distribution,
                          tol: float = ZERO_TOL, info: dict | None = None,
                          scale: float = 0.0) -> Distribution:
    """Zero-mass ``f`` with ``G f = g`` and ``A(Q f) = h``.

    Requires ``A g = 0``, ``h`` symmetric and ``mass(h) = 0``.  The solution is
    ``Qbar^{-1}(h - nu_bar A_1 g)``.  Precondition checks are relative to
    ``max(||datum||_M, scale)``.
    """
    grid = kernel.grid
    gv = _as_values(kernel, g)
    hv = _as_values(kernel, h)
    _check_zero_average(grid, gv, tol, "g", scale)
    _check_symmetric(grid, hv, tol, "h", scale)
    _check_zero_mass(grid, hv, tol, "h", scale)
    a1 = a1_values(kernel, gv)
    return solve_qbar(kernel, Distribution(grid, hv - kernel.nu_bar * a1), tol=tol, info=info,
                      scale=scale)


# ---------------------------------------------------------------------------
# Hilbert expansion

@dataclass(frozen=True, eq=False)
class ExpansionTerms:
    """Orders 0 and 1 (in ``eta^2``) of the cell solutions."""

    xz0: Distribution
    xz1: Distribution
    xperp0: tuple[Distribution, Distribution]
    xperp1: tuple[Distribution, Distribution]
    diagnostics: dict = field(default_factory=dict)

    @property
    def grid(self) -> VelocityGrid:
        return self.xz0.grid

    def save(self, directory: str | Path, stem: str = "expansion") -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        pieces = {"xz0": self.xz0, "xz1": self.xz1, "xperp0_x": self.xperp0[0],
                  "xperp0_y": self.xperp0[1], "xperp1_x": self.xperp1[0], "xperp1_y": self.xperp1[1]}
        files = {}
        for name, d in pieces.items():
            files[name] = f"{stem}_{name}.csv"
            dump_distribution(d, directory / files[name])
        meta = {"grid": self.grid.describe(), "components": files,
                "tolerances": {"zero_mass": ZERO_TOL}, "diagnostics": self.diagnostics}
        path = directory / f"{stem}.json"
        path.write_text(json.dumps(meta, indent=2, default=float))
        return path

    @classmethod
    def load(cls, sidecar: str | Path, grid: VelocityGrid) -> "ExpansionTerms":
        sidecar = Path(sidecar)
        meta = json.loads(sidecar.read_text())
        d = {k: load_distribution(sidecar.parent / v, grid) for k, v in meta["components"].items()}
        return cls(d["xz0"], d["xz1"], (d["xperp0_x"], d["xperp0_y"]),
                   (d["xperp1_x"], d["xperp1_y"]), meta.get("diagnostics", {}))


def compute_expansion(kernel: CollisionKernel, tol: float = ZERO_TOL) -> ExpansionTerms:
    """Hilbert-expansion pieces ``X^(0)``, ``X^(1)`` for the parallel and perpendicular cells."""
    grid = kernel.grid
    zero = Distribution(grid, np.zeros(grid.size))
    vzm = grid.vz * grid.maxwellian
    diag: dict = {}

    i0: dict = {}
    xz0 = solve_qbarbar(kernel, Distribution(grid, -vzm), tol=tol, info=i0)
    gz = q_values(kernel, xz0.values) + vzm
    i1: dict = {}
    unit = float(norm_values(grid, vzm))
    xz1 = solve_gyration_system(kernel, Distribution(grid, gz), zero, tol=tol, info=i1, scale=unit)
    diag["xz0_residual"] = i0["residual"]
    diag["xz1_residual"] = i1["residual"]

    xp0, xp1 = [], []
    for comp, name in ((grid.vx, "x"), (grid.vy, "y")):
        ia: dict = {}
        x0 = solve_gyration_system(kernel, Distribution(grid, comp * grid.maxwellian), zero,
                                   tol=tol, info=ia, scale=unit)
        ib: dict = {}
        x1 = solve_gyration_system(kernel, Distribution(grid, q_values(kernel, x0.values)), zero,
                                   tol=tol, info=ib, scale=unit)
        diag[f"xperp0_{name}_residual"] = ia["residual"]
        diag[f"xperp1_{name}_residual"] = ib["residual"]
        xp0.append(x0)
        xp1.append(x1)
    # check of the leading anisotropic structure: X0_perp - A X0_perp = -I(v_perp M)
    target = (-(grid.vy * grid.maxwellian), grid.vx * grid.maxwellian)
    dev = max(float(norm_values(grid, x.values - average_values(grid, x.values) - t))
              for x, t in zip(xp0, target))
    diag["xperp0_anisotropy_error"] = dev
    return ExpansionTerms(xz0, xz1, (xp0[0], xp0[1]), (xp1[0], xp1[1]), diag)


def expansion_remainders(cell: CellSolution, terms: ExpansionTerms) -> tuple[float, float]:
    """``||X_z - xz0 - eta^2 xz1||_M`` and the perpendicular analogue."""
    grid = cell.grid
    e2 = cell.eta**2
    sign = -1.0 if cell.adjoint else 1.0
    rz = cell.x_z.values - terms.xz0.values - sign * e2 * terms.xz1.values
    rz_norm = float(norm_values(grid, rz))
    parts = []
    for x, x0, x1 in zip(cell.x_perp, terms.xperp0, terms.xperp1):
        parts.append(x.values - sign * x0.values - e2 * x1.values)
    rp_norm = float(np.sqrt(np.sum(norm_values(grid, np.array(parts)) ** 2)))
    return rz_norm, rp_norm


def polynomial_envelope(f: Distribution) -> dict:
    """Smallest line ``c0 + c1 |v|`` (c0, c1 >= 0) with ``|f| <= (c0 + c1 |v|) M`` at all nodes.

    The line minimizes its integral over ``[0, |v|_max]``.
    """
    grid = f.grid
    speed = np.linalg.norm(grid.nodes, axis=1)
    ratio = np.abs(f.values) / grid.maxwellian
    vmax = float(speed.max())
    res = linprog(c=[vmax, 0.5 * vmax**2], A_ub=-np.column_stack([np.ones_like(speed), speed]),
                  b_ub=-ratio, bounds=[(0, None), (0, None)], method="highs")
    c0, c1 = (float(x) for x in res.x)
    slack = float(np.max(ratio - (c0 + c1 * speed)))
    return {"c0": c0, "c1": c1, "max_violation": max(slack, 0.0), "success": bool(res.success)}
