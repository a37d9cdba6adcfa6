"""Time integration of the scaled kinetic equation in reduced geometries.

The equation is::

    d_t f + (1/eps) v_z d_z f + 1/(eps eta) v_perp . grad_perp f
          + (1/eps) E_z d_{v_z} f + 1/(eps eta) E_perp . grad_{v_perp} f
          + 1/(eps^2 eta^2) G f = Q f / eps^2

on a periodic box.  One step is the Strang composition
gyration(h/2) - collision(h/2) - transport(h) - collision(h/2) - gyration(h/2),
where transport is itself split as advection(h/2) - acceleration(h) -
advection(h/2).

* gyration: exact rotation of every orbit by ``-h / (eps^2 eta^2)``;
* collision: exact exponential of the (per-cell, space-independent) linear
  operator, from an eigen-decomposition of its ``<.,.>_M`` symmetrization;
* advection: exact Fourier shift of every velocity node (periodic box);
* acceleration: conservative upwind finite volumes on the cylindrical velocity
  cells, advanced with Heun's method and sub-cycled under its CFL bound.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .collision_ops import CollisionKernel, kernel_matrix, q_values
from .errors import ValidationError
from .grid import Distribution, VelocityGrid, gyration_values, rotate_values

GEOMETRIES = ("homogeneous", "slab_z", "perp_xy")
FIELD_KINDS = ("zero", "uniform", "cosine", "cosine2d", "cosine_time")


# ---------------------------------------------------------------------------
# Spatial grid and fields

@dataclass(frozen=True)
class SpatialGrid:
    """Periodic cell-centred grid on ``[-L/2, L/2)`` in each active direction."""

    geometry: str
    n_cells: tuple[int, ...] = ()
    lengths: tuple[float, ...] = ()

    def __post_init__(self):
        if self.geometry not in GEOMETRIES:
            raise ValidationError(f"unknown geometry {self.geometry!r}", field="geometry")
        want = {"homogeneous": 0, "slab_z": 1, "perp_xy": 2}[self.geometry]
        n = tuple(int(x) for x in self.n_cells)
        lengths = tuple(float(x) for x in self.lengths)
        if self.geometry == "homogeneous":
            # spatial flags are ignored in the homogeneous geometry
            n, lengths = (), ()
        if len(n) != want or len(lengths) != want:
            raise ValidationError(f"{self.geometry} needs {want} cell counts and lengths",
                                  field="n_cells")
        if any(x < 2 for x in n) or any(not (x > 0) for x in lengths):
            raise ValidationError("cell counts must be >= 2 and lengths > 0", field="n_cells")
        object.__setattr__(self, "n_cells", n)
        object.__setattr__(self, "lengths", lengths)

    @property
    def axes(self) -> tuple[str, ...]:
        return {"homogeneous": (), "slab_z": ("z",), "perp_xy": ("x", "y")}[self.geometry]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n_cells

    @property
    def size(self) -> int:
        return int(np.prod(self.n_cells)) if self.n_cells else 1

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.lengths, self.n_cells))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing)) if self.n_cells else 1.0

    def centers_1d(self, axis: int) -> np.ndarray:
        L, n = self.lengths[axis], self.n_cells[axis]
        return -0.5 * L + (np.arange(n) + 0.5) * L / n

    def coordinates(self) -> dict[str, np.ndarray]:
        """Cell-centre coordinates ``x, y, z`` broadcast to the spatial shape."""
        out = {a: np.zeros(self.shape) for a in ("x", "y", "z")}
        if self.geometry == "slab_z":
            out["z"] = self.centers_1d(0)
        elif self.geometry == "perp_xy":
            X, Y = np.meshgrid(self.centers_1d(0), self.centers_1d(1), indexing="ij")
            out["x"], out["y"] = X, Y
        return out

    def wavenumbers(self, axis: int) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n_cells[axis], d=self.spacing[axis])

    def describe(self) -> dict:
        return {"geometry": self.geometry, "n_cells": list(self.n_cells), "lengths": list(self.lengths)}


@dataclass(frozen=True)
class FieldSpec:
    """Electric potential ``V(t, r)`` from a named analytic family; ``E = -grad V``.

    Kinds
    -----
    zero
        ``V = 0``.
    uniform
        constant ``E = (ex, ey, ez)``; on a periodic box this field has no
        bounded potential, so ``V`` is reported as zero.
    cosine
        ``V = amp cos(2 pi mode s / L)`` along ``axis`` (``"x"``, ``"y"`` or ``"z"``).
    cosine2d
        ``V = amp cos(2 pi mx x / Lx) cos(2 pi my y / Ly)``.
    cosine_time
        ``cosine`` multiplied by ``cos(omega t)``.
    """

    kind: str = "zero"
    params: dict = field(default_factory=dict)
    lengths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise ValidationError(f"unknown potential kind {self.kind!r}; known {FIELD_KINDS}",
                                  field="potential")
        for key, val in self.params.items():
            if key != "axis" and not math.isfinite(float(val)):
                raise ValidationError(f"parameter {key} must be finite", field="potential_params")

    @classmethod
    def for_grid(cls, kind: str, params: dict | None, spatial: SpatialGrid) -> "FieldSpec":
        lengths = dict(zip(spatial.axes, spatial.lengths))
        return cls(kind, dict(params or {}), lengths)

    @property
    def static(self) -> bool:
        return self.kind != "cosine_time"

    def _len(self, axis: str) -> float:
        if axis not in self.lengths:
            raise ValidationError(f"potential varies along {axis!r}, which is not an active axis",
                                  field="potential_params")
        return self.lengths[axis]

    def potential(self, t: float, x, y, z) -> np.ndarray:
        x, y, z = np.broadcast_arrays(*(np.asarray(c, dtype=float) for c in (x, y, z)))
        p = self.params
        if self.kind in ("zero", "uniform"):
            return np.zeros(x.shape)
        amp = float(p.get("amp", 0.5))
        if self.kind == "cosine2d":
            kx = 2.0 * np.pi * float(p.get("mx", 1)) / self._len("x")
            ky = 2.0 * np.pi * float(p.get("my", 1)) / self._len("y")
            return amp * np.cos(kx * x) * np.cos(ky * y)
        axis = p.get("axis", "z")
        s = {"x": x, "y": y, "z": z}[axis]
        k = 2.0 * np.pi * float(p.get("mode", 1)) / self._len(axis)
        v = amp * np.cos(k * s)
        if self.kind == "cosine_time":
            v = v * math.cos(float(p.get("omega", 1.0)) * t)
        return v

    def efield(self, t: float, x, y, z) -> np.ndarray:
        """``E`` at the given points, shape (..., 3)."""
        x, y, z = np.broadcast_arrays(*(np.asarray(c, dtype=float) for c in (x, y, z)))
        p = self.params
        out = np.zeros(x.shape + (3,))
        if self.kind == "zero":
            return out
        if self.kind == "uniform":
            out[...] = [float(p.get("ex", 0.0)), float(p.get("ey", 0.0)), float(p.get("ez", 0.0))]
            return out
        amp = float(p.get("amp", 0.5))
        if self.kind == "cosine2d":
            kx = 2.0 * np.pi * float(p.get("mx", 1)) / self._len("x")
            ky = 2.0 * np.pi * float(p.get("my", 1)) / self._len("y")
            out[..., 0] = amp * kx * np.sin(kx * x) * np.cos(ky * y)
            out[..., 1] = amp * ky * np.cos(kx * x) * np.sin(ky * y)
            return out
        axis = p.get("axis", "z")
        idx = {"x": 0, "y": 1, "z": 2}[axis]
        s = (x, y, z)[idx]
        k = 2.0 * np.pi * float(p.get("mode", 1)) / self._len(axis)
        e = amp * k * np.sin(k * s)
        if self.kind == "cosine_time":
            e = e * math.cos(float(p.get("omega", 1.0)) * t)
        out[..., idx] = e
        return out

    def describe(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


def check_field_geometry(spec: FieldSpec, spatial: SpatialGrid):
    """Reject fields that vary along inactive axes."""
    if spec.kind in ("cosine", "cosine_time"):
        spec._len(spec.params.get("axis", "z"))
    elif spec.kind == "cosine2d":
        spec._len("x")
        spec._len("y")


# ---------------------------------------------------------------------------
# Phase-space field

@dataclass(frozen=True, eq=False)
class PhaseField:
    """One velocity distribution per spatial cell; ``values`` has shape (n_cells, N)."""

    spatial: SpatialGrid
    vgrid: VelocityGrid
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).reshape(self.spatial.size, self.vgrid.size)
        if not np.all(np.isfinite(vals)):
            raise ValidationError("phase-space values must be finite", field="values")
        object.__setattr__(self, "values", vals)

    def distribution(self, cell: int) -> Distribution:
        return Distribution(self.vgrid, self.values[cell])

    def total_mass(self) -> float:
        return float(np.sum(self.values @ self.vgrid.weights) * self.spatial.cell_volume)


def initial_density(spatial: SpatialGrid, kind: str = "gaussian", params: dict | None = None) -> np.ndarray:
    """Initial density per cell.

    ``gaussian``: ``background + amp exp(-|r - center|^2 / (2 width^2))``;
    ``uniform``: ``level``; ``cosine``: ``1 + amp cos(2 pi r_axis / L)``;
    ``zero``.
    """
    p = dict(params or {})
    coords = spatial.coordinates()
    if kind == "zero":
        return np.zeros(spatial.shape)
    if kind == "uniform":
        return np.full(spatial.shape, float(p.get("level", 1.0)))
    if spatial.geometry == "homogeneous":
        return np.full(spatial.shape, float(p.get("level", 1.0)))
    if kind == "gaussian":
        width = float(p.get("width", 0.3))
        r2 = np.zeros(spatial.shape)
        centers = p.get("center", [0.0] * len(spatial.axes))
        for ax, c, L in zip(spatial.axes, centers, spatial.lengths):
            d = coords[ax] - float(c)
            d = (d + 0.5 * L) % L - 0.5 * L  # periodic distance
            r2 = r2 + d**2
        return float(p.get("background", 0.0)) + float(p.get("amp", 1.0)) * np.exp(-0.5 * r2 / width**2)
    if kind == "cosine":
        ax = spatial.axes[0]
        L = spatial.lengths[0]
        return 1.0 + float(p.get("amp", 0.5)) * np.cos(2.0 * np.pi * coords[ax] / L)
    raise ValidationError(f"unknown initial density {kind!r}", field="initial_density")


def local_equilibrium(spatial: SpatialGrid, vgrid: VelocityGrid, rho: np.ndarray, time: float = 0.0) -> PhaseField:
    """``f = rho(r) M(v)``."""
    rho = np.asarray(rho, dtype=float).reshape(spatial.size)
    return PhaseField(spatial, vgrid, rho[:, None] * vgrid.maxwellian[None, :], time)


# ---------------------------------------------------------------------------
# Moments

@dataclass(frozen=True)
class Moments:
    rho: np.ndarray
    j_z: np.ndarray
    j_x: np.ndarray
    j_y: np.ndarray


def moments(field: PhaseField, eps: float, eta: float) -> Moments:
    """Per-cell ``rho``, ``J_z = (1/eps) int v_z f`` and ``J_perp = 1/(eps eta) int v_perp f``."""
    g = field.vgrid
    w = field.values * g.weights
    fl = w @ g.nodes
    shape = field.spatial.shape
    return Moments(
        rho=w.sum(axis=1).reshape(shape),
        j_z=(fl[:, 2] / eps).reshape(shape),
        j_x=(fl[:, 0] / (eps * eta)).reshape(shape),
        j_y=(fl[:, 1] / (eps * eta)).reshape(shape),
    )


def entropy(field: PhaseField, spec: FieldSpec | None = None) -> float:
    """``sum_cells dr sum_v w f^2 / (M exp(-V))``."""
    g = field.vgrid
    if spec is None:
        pot = np.zeros(field.spatial.size)
    else:
        c = field.spatial.coordinates()
        pot = spec.potential(field.time, c["x"], c["y"], c["z"]).reshape(-1)
    per_cell = (field.values**2 * (g.weights / g.maxwellian)).sum(axis=1)
    return float(np.sum(per_cell * np.exp(pot)) * field.spatial.cell_volume)


# ---------------------------------------------------------------------------
# Substeps

def collision_propagator(kernel: CollisionKernel, t: float) -> np.ndarray | None:
    """Matrix ``P`` with ``f(t) = f(0) @ P`` for ``df/dt = Q f`` (row-vector convention).

    Returns ``None`` for the constant kernel, which is handled in closed form.
    """
    base = kernel.base or kernel
    g = kernel.grid
    if base.storage == "constant":
        return None
    if base.storage != "dense":
        raise ValidationError("kinetic runs need a dense or constant kernel", field="storage")
    sig = kernel_matrix(kernel)
    sw = np.sqrt(g.weights * g.maxwellian)
    b = sig * sw[:, None] * sw[None, :]
    b[np.diag_indices_from(b)] -= kernel.nu
    b = 0.5 * (b + b.T)
    lam, u = np.linalg.eigh(b)
    lam = np.minimum(lam, 0.0)
    expo = (u * np.exp(t * lam)) @ u.T
    # Q = D^{-1/2} B D^{1/2} with D = diag(w / M); column-vector propagator
    d_half = np.sqrt(g.weights / g.maxwellian)
    p_col = expo * (1.0 / d_half)[:, None] * d_half[None, :]
    return p_col.T


def apply_collision(kernel: CollisionKernel, values: np.ndarray, t: float,
                    propagator: np.ndarray | None) -> np.ndarray:
    """Exact solution of ``df/dt = Q f`` after time ``t`` for every cell."""
    g = kernel.grid
    if propagator is not None:
        return values @ propagator
    c = kernel.cross_section.constant
    m = g.mass_maxwellian
    eq = np.outer(values @ g.weights / m, g.maxwellian)
    return eq + math.exp(-c * m * t) * (values - eq)


class VelocityAccelerator:
    """Conservative upwind divergence of ``a f`` on cylindrical velocity cells.

    Cell boundaries are chosen so that every cell volume equals the quadrature
    weight of its node: radial boundaries satisfy ``rho^2 / 2 = cumsum(w_r)``
    and parallel boundaries are ``-v_max_par + cumsum(w_par)``.  Face integrals
    of the normal component of a constant field are exact, so a uniform state
    is preserved and the divergence theorem holds cell by cell.  The outer
    boundary is closed (zero flux).
    """

    def __init__(self, vgrid: VelocityGrid):
        g = vgrid
        self.grid = g
        rb = np.sqrt(2.0 * np.concatenate([[0.0], np.cumsum(g.w_r)]))
        zb = -g.v_max_par + np.concatenate([[0.0], np.cumsum(g.w_par)])
        self.r_bounds = rb
        self.z_bounds = zb
        dth = g.d_theta
        th = g.theta
        # radial faces between i and i+1 (interior only): area factor rho * 2 sin(dth/2) * dz
        self.rad_area = (rb[1:-1][:, None] * 2.0 * math.sin(0.5 * dth)) * g.w_par[None, :]
        self.rad_cos = np.cos(th)
        self.rad_sin = np.sin(th)
        # angular faces at theta_k + dth/2 between k and k+1 (periodic)
        th_face = th + 0.5 * dth
        self.ang_area = (rb[1:] - rb[:-1])[:, None] * g.w_par[None, :]
        self.ang_cos = np.cos(th_face)
        self.ang_sin = np.sin(th_face)
        # parallel faces between iz and iz+1: area w_r * dth
        self.par_area = g.w_r * dth
        self.vol = g.cube(g.weights)

    def rate(self, values: np.ndarray, a: np.ndarray) -> np.ndarray:
        """``-div_v(a f)`` per cell; ``values`` (C, N), ``a`` (C, 3)."""
        g = self.grid
        f = g.cube(values)  # (C, nr, nt, nz)
        ax = a[:, 0][:, None, None, None]
        ay = a[:, 1][:, None, None, None]
        az = a[:, 2][:, None, None, None]
        flux_div = np.zeros_like(f)
        if g.n_radial > 1:
            s = ax * self.rad_cos[None, None, :, None] + ay * self.rad_sin[None, None, :, None]
            up = np.where(s > 0, f[:, :-1], f[:, 1:])
            fl = s * up * self.rad_area[None, :, None, :]
            flux_div[:, :-1] += fl
            flux_div[:, 1:] -= fl
        s = -ax * self.ang_sin[None, None, :, None] + ay * self.ang_cos[None, None, :, None]
        f_next = np.roll(f, -1, axis=2)
        up = np.where(s > 0, f, f_next)
        fl = s * up * self.ang_area[None, :, None, :]
        flux_div += fl
        flux_div -= np.roll(fl, 1, axis=2)
        if g.n_parallel > 1:
            up = np.where(az > 0, f[..., :-1], f[..., 1:])
            fl = az * up * self.par_area[None, :, None, None]
            flux_div[..., :-1] += fl
            flux_div[..., 1:] -= fl
        return g.flat(-flux_div / self.vol)

    def max_rate(self, a: np.ndarray) -> float:
        """Largest outflow rate ``sum(outgoing normal flux) / volume`` over cells."""
        g = self.grid
        amax = np.max(np.abs(a), axis=0) if a.size else np.zeros(3)
        aperp = math.hypot(amax[0], amax[1])
        out = np.zeros(g.shape)
        if g.n_radial > 1:
            out[:-1] += aperp * self.rad_area[:, None, :]
            out[1:] += aperp * self.rad_area[:, None, :]
        out += 2.0 * aperp * self.ang_area[:, None, :]
        if g.n_parallel > 1:
            out[..., :-1] += amax[2] * self.par_area[:, None, None]
            out[..., 1:] += amax[2] * self.par_area[:, None, None]
        return float(np.max(out / self.vol))

    def advance(self, values: np.ndarray, a: np.ndarray, t: float, cfl: float = 0.9) -> np.ndarray:
        """Heun (SSP-RK2) sub-cycled under the CFL bound."""
        if not np.any(a):
            return values
        r = self.max_rate(a)
        n_sub = max(1, math.ceil(t * r / cfl))
        h = t / n_sub
        f = values
        for _ in range(n_sub):
            k1 = f + h * self.rate(f, a)
            f = 0.5 * (f + k1 + h * self.rate(k1, a))
        return f


def kernel_commutes_with_gyration(kernel: CollisionKernel, seed: int = 0) -> bool:
    """Numerical test of ``Q G = G Q`` on a random vector (true for rotation-invariant kernels)."""
    g = kernel.grid
    x = np.random.default_rng(seed).normal(size=g.size) * g.maxwellian
    a = q_values(kernel, gyration_values(g, x))
    b = gyration_values(g, q_values(kernel, x))
    return bool(np.max(np.abs(a - b)) <= 1e-10 * max(np.max(np.abs(a)), 1e-300))


def default_dt(spatial: SpatialGrid, vgrid: VelocityGrid, eps: float, eta: float,
               max_gyration_angle: float | None = None) -> float:
    """``0.25 min(dr eps / v_max, dr eps eta / v_max)`` over active directions.

    With ``max_gyration_angle`` the step is additionally capped so that the
    gyration angle per step ``dt / (eps^2 eta^2)`` does not exceed it.
    """
    vmax = max(vgrid.v_max_perp, vgrid.v_max_par)
    cands = []
    if spatial.geometry == "slab_z":
        cands.append(spatial.spacing[0] * eps / vmax)
    elif spatial.geometry == "perp_xy":
        cands.append(min(spatial.spacing) * eps * eta / vmax)
    dt = 0.25 * min(cands) if cands else 0.25 * eps**2
    if max_gyration_angle is not None:
        dt = min(dt, max_gyration_angle * eps**2 * eta**2)
    return dt


class KineticStepper:
    """Strang-split stepper with propagators cached for a fixed ``dt``."""

    def __init__(self, kernel: CollisionKernel, spatial: SpatialGrid, spec: FieldSpec,
                 eps: float, eta: float, dt: float):
        for name, val in (("eps", eps), ("eta", eta), ("dt", dt)):
            if not (val > 0.0 and math.isfinite(val)):
                raise ValidationError(f"{name} must be positive, got {val}", field=name)
        check_field_geometry(spec, spatial)
        self.kernel = kernel
        self.vgrid = kernel.grid
        self.spatial = spatial
        self.spec = spec
        self.eps = float(eps)
        self.eta = float(eta)
        self.dt = float(dt)
        self.gyro_angle = -0.5 * self.dt / (self.eps**2 * self.eta**2)
        self.coll = collision_propagator(kernel, 0.5 * self.dt / self.eps**2)
        self.accel = VelocityAccelerator(self.vgrid)
        self._phase = self._advection_phase(0.5 * self.dt)
        coords = spatial.coordinates()
        self._coords = (coords["x"].reshape(-1), coords["y"].reshape(-1), coords["z"].reshape(-1))

    def _advection_phase(self, t: float):
        sp = self.spatial
        g = self.vgrid
        if sp.geometry == "homogeneous":
            return None
        if sp.geometry == "slab_z":
            k = sp.wavenumbers(0)
            c = g.vz / self.eps
            return np.exp(-1j * t * k[:, None] * c[None, :])
        kx = sp.wavenumbers(0)
        ky = sp.wavenumbers(1)
        cx = g.vx / (self.eps * self.eta)
        cy = g.vy / (self.eps * self.eta)
        return np.exp(-1j * t * (kx[:, None, None] * cx + ky[None, :, None] * cy))

    def advect(self, values: np.ndarray) -> np.ndarray:
        sp = self.spatial
        if self._phase is None:
            return values
        n = self.vgrid.size
        cube = values.reshape(sp.shape + (n,))
        axes = tuple(range(len(sp.shape)))
        fh = np.fft.fftn(cube, axes=axes) * self._phase
        return np.real(np.fft.ifftn(fh, axes=axes)).reshape(values.shape)

    def accelerate(self, values: np.ndarray, t_mid: float) -> np.ndarray:
        e = self.spec.efield(t_mid, *self._coords)
        a = e * np.array([1.0 / (self.eps * self.eta), 1.0 / (self.eps * self.eta), 1.0 / self.eps])
        return self.accel.advance(values, a, self.dt)

    def gyrate(self, values: np.ndarray) -> np.ndarray:
        return rotate_values(self.vgrid, values, self.gyro_angle)

    def collide(self, values: np.ndarray) -> np.ndarray:
        return apply_collision(self.kernel, values, 0.5 * self.dt / self.eps**2, self.coll)

    def step_values(self, values: np.ndarray, time: float) -> np.ndarray:
        f = self.gyrate(values)
        f = self.collide(f)
        f = self.advect(f)
        f = self.accelerate(f, time + 0.5 * self.dt)
        f = self.advect(f)
        f = self.collide(f)
        return self.gyrate(f)

    def step(self, field: PhaseField) -> PhaseField:
        if field.spatial != self.spatial:
            raise ValidationError("field geometry does not match the stepper", field="geometry")
        return PhaseField(self.spatial, self.vgrid, self.step_values(field.values, field.time),
                          field.time + self.dt)


def step(field: PhaseField, kernel: CollisionKernel, spec: FieldSpec, eps: float, eta: float,
         dt: float) -> PhaseField:
    """One Strang step (builds a fresh stepper; use :class:`KineticStepper` in loops)."""
    return KineticStepper(kernel, field.spatial, spec, eps, eta, dt).step(field)


def gyration_substep(values: np.ndarray, vgrid: VelocityGrid, shift: float) -> np.ndarray:
    """Rotate every orbit by ``shift``: ``f(v) -> f(R(shift) v)``."""
    return rotate_values(vgrid, values, shift)


# ---------------------------------------------------------------------------
# Runs and output

SNAPSHOT_COLUMNS = ("x", "y", "z", "rho", "J_z", "J_x", "J_y")


def write_snapshot(path: str | Path, spatial: SpatialGrid, mom: Moments) -> Path:
    """CSV with cell coordinates and moments."""
    path = Path(path)
    c = spatial.coordinates()
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SNAPSHOT_COLUMNS)
        cols = [c["x"], c["y"], c["z"], mom.rho, mom.j_z, mom.j_x, mom.j_y]
        for row in zip(*(np.asarray(x).reshape(-1) for x in cols)):
            w.writerow([repr(float(v)) for v in row])
    return path


def dump_field(field: PhaseField, path: str | Path) -> Path:
    """Raw row-major (cell x node) float64 dump plus a JSON header ``<path>.json``."""
    path = Path(path)
    np.ascontiguousarray(field.values, dtype="<f8").tofile(path)
    header = {"shape": list(field.values.shape), "dtype": "<f8", "order": "C",
              "time": field.time, "spatial": field.spatial.describe(),
              "velocity_grid": field.vgrid.describe()}
    Path(str(path) + ".json").write_text(json.dumps(header, indent=2))
    return path


def load_field(path: str | Path, vgrid: VelocityGrid) -> PhaseField:
    path = Path(path)
    header = json.loads(Path(str(path) + ".json").read_text())
    vals = np.fromfile(path, dtype=header["dtype"]).reshape(header["shape"])
    sp = header["spatial"]
    spatial = SpatialGrid(sp["geometry"], tuple(sp["n_cells"]), tuple(sp["lengths"]))
    return PhaseField(spatial, vgrid, vals, header["time"])


@dataclass
class KineticRun:
    """Time series produced by :func:`run`."""

    times: np.ndarray
    total_mass: np.ndarray
    total_current: np.ndarray  # (n_steps + 1, 3): volume integrals of (J_x, J_y, J_z)
    entropy: np.ndarray
    deviation: np.ndarray  # ||f - rho M||_M over the box at every step
    snapshot_times: list
    snapshots: list  # Moments at snapshot_times
    final: PhaseField
    dt: float
    n_steps: int
    files: list = field(default_factory=list)


def run(kernel: CollisionKernel, field0: PhaseField, spec: FieldSpec, eps: float, eta: float,
        t_final: float, dt: float | None = None, snapshot_times=(), out_dir: str | Path | None = None,
        max_gyration_angle: float | None = None, dump_final: bool = False) -> KineticRun:
    """Integrate to ``t_final`` recording totals every step and moments at snapshot times.

    The step is shortened so that ``t_final`` is hit exactly; each snapshot is
    taken at the nearest step.  Snapshot CSVs are written to ``out_dir`` when given.
    """
    if not t_final >= 0.0:
        raise ValidationError("t_final must be non-negative", field="t_final")
    if dt is None:
        if max_gyration_angle is None and (field0.spatial.geometry == "perp_xy"
                                           or not kernel_commutes_with_gyration(kernel)):
            max_gyration_angle = 0.3
        dt = default_dt(field0.spatial, field0.vgrid, eps, eta, max_gyration_angle)
    n_steps = max(1, math.ceil(t_final / dt - 1e-9)) if t_final > 0 else 0
    dt = t_final / n_steps if n_steps else dt
    stepper = KineticStepper(kernel, field0.spatial, spec, eps, eta, dt)
    snap_steps = {}
    for ts in snapshot_times:
        if not (0.0 <= ts <= t_final + 1e-12):
            raise ValidationError(f"snapshot time {ts} outside [0, t_final]", field="snapshot_times")
        snap_steps.setdefault(int(round(ts / dt)) if n_steps else 0, []).append(float(ts))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    vol = field0.spatial.cell_volume
    g = field0.vgrid
    vals = field0.values
    times = [field0.time]
    masses, currents, ents, devs = [], [], [], []
    snaps, snap_t, files = [], [], []

    def record(v, t, idx):
        w = v * g.weights
        masses.append(float(w.sum() * vol))
        fl = w.sum(axis=0) @ g.nodes * vol
        currents.append([fl[0] / (eps * eta), fl[1] / (eps * eta), fl[2] / eps])
        ents.append(entropy(PhaseField(field0.spatial, g, v, t), spec))
        rho = w.sum(axis=1)
        dev = v - rho[:, None] * (g.maxwellian / g.mass_maxwellian)
        devs.append(math.sqrt(float(np.sum(dev**2 * (g.weights / g.maxwellian))) * vol))
        for ts in snap_steps.get(idx, []):
            mom = moments(PhaseField(field0.spatial, g, v, t), eps, eta)
            snaps.append(mom)
            snap_t.append(ts)
            if out is not None:
                files.append(str(write_snapshot(out / f"snapshot_{len(snaps) - 1:04d}.csv",
                                                field0.spatial, mom)))

    record(vals, field0.time, 0)
    t = field0.time
    for i in range(1, n_steps + 1):
        vals = stepper.step_values(vals, t)
        t = field0.time + i * dt
        times.append(t)
        record(vals, t, i)
    final = PhaseField(field0.spatial, g, vals, t)
    if out is not None and dump_final:
        files.append(str(dump_field(final, out / "final_field.bin")))
    return KineticRun(np.array(times), np.array(masses), np.array(currents), np.array(ents),
                      np.array(devs), snap_t, snaps, final, dt, n_steps, files)
