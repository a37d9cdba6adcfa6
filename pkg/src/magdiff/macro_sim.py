"""Limiting macroscopic equations on periodic boxes.

* drift-diffusion: ``d_t rho = div(D^eta (grad rho - rho E))``.  The symmetric
  part of ``D^eta`` is discretized with central fluxes, the antisymmetric part
  as an upwinded drift ``rho D_as E``.
* guiding center: ``d_t rho + d_z J_z + div_perp(rho E x e_z) = 0`` with
  ``J_z = -D_z (d_z rho - E_z rho)``; the perpendicular drift uses upwind
  fluxes with face velocities taken from the potential at cell corners, which
  makes the discrete drift field exactly divergence free.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .errors import StabilityError, ValidationError
from .kinetic_sim import FieldSpec, SpatialGrid, check_field_geometry

EQUATIONS = ("drift_diffusion", "guiding_center")


@dataclass(frozen=True, eq=False)
class MacroField:
    spatial: SpatialGrid
    rho: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        if self.spatial.geometry == "homogeneous":
            raise ValidationError("macroscopic equations need slab_z or perp_xy geometry",
                                  field="geometry")
        rho = np.asarray(self.rho, dtype=float).reshape(self.spatial.shape)
        if not np.all(np.isfinite(rho)):
            raise ValidationError("density must be finite", field="rho")
        object.__setattr__(self, "rho", rho)

    def total_mass(self) -> float:
        return float(self.rho.sum() * self.spatial.cell_volume)


def _face_coords(spatial: SpatialGrid, axis: int) -> dict:
    """Coordinates of the faces at ``+1/2`` along ``axis`` for every cell."""
    c = spatial.coordinates()
    out = {k: np.array(v, dtype=float) for k, v in c.items()}
    name = spatial.axes[axis]
    out[name] = out[name] + 0.5 * spatial.spacing[axis]
    return out


def _check_tensor(d) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if d.shape != (3, 3) or not np.all(np.isfinite(d)):
        raise ValidationError("diffusion tensor must be a finite 3x3 matrix", field="D")
    if np.any(np.linalg.eigvalsh(0.5 * (d + d.T)) < 0):
        raise ValidationError("symmetric part of the diffusion tensor must be non-negative", field="D")
    return d


def _axis_index(spatial: SpatialGrid) -> list[int]:
    return [{"x": 0, "y": 1, "z": 2}[a] for a in spatial.axes]


class DriftDiffusionOperator:
    """Right-hand side of the drift-diffusion equation for a fixed tensor."""

    def __init__(self, spatial: SpatialGrid, d, spec: FieldSpec):
        check_field_geometry(spec, spatial)
        self.spatial = spatial
        self.d = _check_tensor(d)
        self.ds = 0.5 * (self.d + self.d.T)
        self.da = 0.5 * (self.d - self.d.T)
        self.spec = spec
        self.idx = _axis_index(spatial)
        self._faces = [_face_coords(spatial, a) for a in range(len(spatial.axes))]
        self._cache_t = None

    def face_fields(self, t: float) -> list[np.ndarray]:
        """``E`` at the +1/2 faces along each active axis, shape (*cells, 3)."""
        if self._cache_t is None or (not self.spec.static and self._cache_t[0] != t):
            self._cache_t = (t, [self.spec.efield(t, f["x"], f["y"], f["z"]) for f in self._faces])
        return self._cache_t[1]

    def fluxes(self, rho: np.ndarray, t: float) -> list[np.ndarray]:
        """Flux ``-D_s (grad rho - rho E) + rho D_as E`` on the +1/2 faces of each active axis."""
        sp = self.spatial
        h = sp.spacing
        nd = len(sp.axes)
        extra = (1,) * (rho.ndim - nd)
        out = []
        for a, e_f in enumerate(self.face_fields(t)):
            ia = self.idx[a]
            nxt = np.roll(rho, -1, axis=a)
            flux = np.zeros_like(rho)
            flux -= self.ds[ia, ia] * (nxt - rho) / h[a]
            for b in range(nd):
                if b == a:
                    continue
                # tangential derivative averaged onto the face
                cen = (np.roll(rho, -1, axis=b) - np.roll(rho, 1, axis=b)) / (2.0 * h[b])
                flux -= self.ds[ia, self.idx[b]] * 0.5 * (cen + np.roll(cen, -1, axis=a))
            drift_s = (e_f @ self.ds[ia]).reshape(sp.shape + extra)
            flux += drift_s * 0.5 * (rho + nxt)
            vel = (e_f @ self.da[ia]).reshape(sp.shape + extra)
            flux += vel * np.where(vel > 0, rho, nxt)
            out.append(flux)
        return out

    def rhs(self, rho: np.ndarray, t: float) -> np.ndarray:
        """``div(D_s (grad rho - rho E)) - div(rho D_as E)``; trailing batch axes allowed."""
        return _divergence(self.spatial, self.fluxes(rho, t))

    def stability_bound(self, t: float = 0.0) -> float:
        """Largest stable explicit step (diffusion and advection restrictions)."""
        h = self.spatial.spacing
        lim = math.inf
        diff = sum(2.0 * abs(self.ds[i, i]) / hh**2 for i, hh in zip(self.idx, h))
        diff += sum(abs(self.ds[i, j]) / (hi * hj) for i, hi in zip(self.idx, h)
                    for j, hj in zip(self.idx, h) if i != j)
        adv = 0.0
        for a, ef in enumerate(self.face_fields(t)):
            ia = self.idx[a]
            adv += np.max(np.abs(ef @ self.d[ia])) / h[a]
        rate = diff + adv
        if rate > 0:
            lim = 1.0 / rate
        return lim

    def matrix(self, t: float) -> sps.csr_matrix:
        """Sparse matrix of the operator (built column by column through ``rhs``)."""
        n = self.spatial.size
        eye = np.eye(n).reshape(self.spatial.shape + (n,))
        cols = self.rhs(eye, t).reshape(n, n)
        return sps.csr_matrix(cols)


class GuidingCenterOperator:
    """Right-hand side of the guiding-center equation."""

    def __init__(self, spatial: SpatialGrid, d_z: float, spec: FieldSpec):
        check_field_geometry(spec, spatial)
        if not (d_z >= 0.0 and math.isfinite(d_z)):
            raise ValidationError("D_z must be finite and non-negative", field="D_z")
        self.spatial = spatial
        self.d_z = float(d_z)
        self.spec = spec
        if spatial.geometry == "slab_z":
            d = np.zeros((3, 3))
            d[2, 2] = self.d_z
            self._par = DriftDiffusionOperator(spatial, d, spec)
        else:
            self._par = None

    def face_velocities(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Normal drift velocities on +1/2 faces along x and y.

        ``E x e_z = (E_y, -E_x) = (-d_y V, d_x V)``; the face average of the
        normal component is the difference of ``V`` at the two face corners
        divided by the face length, unless the potential is unavailable
        (``uniform`` kind), in which case the face-centre field is used.
        """
        sp = self.spatial
        hx, hy = sp.spacing
        if self.spec.kind == "uniform":
            fx = _face_coords(sp, 0)
            fy = _face_coords(sp, 1)
            ex = self.spec.efield(t, fx["x"], fx["y"], fx["z"])
            ey = self.spec.efield(t, fy["x"], fy["y"], fy["z"])
            return ex[..., 1], -ey[..., 0]
        c = sp.coordinates()
        xc = c["x"] + 0.5 * hx
        yc = c["y"] + 0.5 * hy
        v_nn = self.spec.potential(t, xc, yc, 0.0)          # corner (i+1/2, j+1/2)
        v_ns = self.spec.potential(t, xc, yc - hy, 0.0)     # corner (i+1/2, j-1/2)
        v_wn = self.spec.potential(t, xc - hx, yc, 0.0)     # corner (i-1/2, j+1/2)
        ux = -(v_nn - v_ns) / hy        # x-face: -d_y V averaged over the face
        uy = (v_nn - v_wn) / hx         # y-face: d_x V averaged over the face
        return ux, uy

    def fluxes(self, rho: np.ndarray, t: float) -> list[np.ndarray]:
        if self._par is not None:
            return self._par.fluxes(rho, t)
        out = []
        for a, u in enumerate(self.face_velocities(t)):
            nxt = np.roll(rho, -1, axis=a)
            out.append(u * np.where(u > 0, rho, nxt))
        return out

    def rhs(self, rho: np.ndarray, t: float) -> np.ndarray:
        return _divergence(self.spatial, self.fluxes(rho, t))

    def stability_bound(self, t: float = 0.0) -> float:
        if self._par is not None:
            return self._par.stability_bound(t)
        hx, hy = self.spatial.spacing
        ux, uy = self.face_velocities(t)
        rate = np.max(np.abs(ux)) / hx + np.max(np.abs(uy)) / hy
        return 1.0 / rate if rate > 0 else math.inf


def _divergence(spatial: SpatialGrid, fluxes: list[np.ndarray]) -> np.ndarray:
    """Minus the discrete divergence of +1/2 face fluxes."""
    out = np.zeros_like(fluxes[0])
    for a, (flux, h) in enumerate(zip(fluxes, spatial.spacing)):
        out -= (flux - np.roll(flux, 1, axis=a)) / h
    return out


def _check_dt(dt: float, bound: float, safety: float = 1.0):
    if not (dt > 0 and math.isfinite(dt)):
        raise ValidationError(f"dt must be positive, got {dt}", field="dt")
    if dt > safety * bound * (1.0 + 1e-12):
        raise StabilityError(f"explicit step {dt:.3e} exceeds the stability bound {bound:.3e}",
                             dt=dt, dt_max=bound)


def step_drift_diffusion(field: MacroField, d, spec: FieldSpec, dt: float,
                         implicit: bool = False) -> MacroField:
    """One Heun step (or Crank-Nicolson with ``implicit=True``)."""
    op = DriftDiffusionOperator(field.spatial, d, spec)
    return MacroField(field.spatial, _advance(op, field.rho, field.time, dt, implicit), field.time + dt)


def step_guiding_center(field: MacroField, d_z: float, spec: FieldSpec, dt: float,
                        implicit: bool = False) -> MacroField:
    """One step of the guiding-center equation.

    The perpendicular drift uses forward Euler (monotone under its CFL bound);
    the parallel equation uses Heun or Crank-Nicolson.
    """
    op = GuidingCenterOperator(field.spatial, d_z, spec)
    return MacroField(field.spatial, _advance(op, field.rho, field.time, dt, implicit), field.time + dt)


def _advance(op, rho: np.ndarray, t: float, dt: float, implicit: bool) -> np.ndarray:
    return _advance_with_flux(op, rho, t, dt, implicit)[0]


def _advance_with_flux(op, rho: np.ndarray, t: float, dt: float,
                       implicit: bool) -> tuple[np.ndarray, np.ndarray]:
    """New density and the step-averaged total face flux per axis.

    The perpendicular guiding-center drift uses forward Euler, every other
    explicit operator Heun; ``implicit`` selects Crank-Nicolson (slab_z only).
    """

    def total(rho_a, t_a):
        return np.array([f.sum() for f in op.fluxes(rho_a, t_a)])

    if implicit:
        if op.spatial.geometry != "slab_z":
            raise ValidationError("implicit stepping is available in slab_z only", field="implicit")
        n = op.spatial.size
        base = op._par if isinstance(op, GuidingCenterOperator) else op
        a = base.matrix(t + 0.5 * dt)
        eye = sps.identity(n, format="csc")
        lhs = (eye - 0.5 * dt * a).tocsc()
        rhs = (eye + 0.5 * dt * a) @ rho.reshape(-1)
        new = spla.spsolve(lhs, rhs).reshape(rho.shape)
        # the flux is linear in rho, so the CN flux is the average of its end values
        return new, 0.5 * (total(rho, t + 0.5 * dt) + total(new, t + 0.5 * dt))
    _check_dt(dt, op.stability_bound(t))
    if isinstance(op, GuidingCenterOperator) and op.spatial.geometry == "perp_xy":
        return rho + dt * op.rhs(rho, t), total(rho, t)
    k1 = rho + dt * op.rhs(rho, t)
    return 0.5 * (rho + k1 + dt * op.rhs(k1, t + dt)), 0.5 * (total(rho, t) + total(k1, t + dt))


@dataclass
class MacroRun:
    times: np.ndarray
    mass: np.ndarray
    snapshot_times: list
    snapshots: list  # density arrays
    final: MacroField
    dt: float
    n_steps: int
    center_of_mass: np.ndarray  # (n_steps + 1, n_axes), unwrapped
    files: list = field(default_factory=list)


def write_density_csv(path: str | Path, spatial: SpatialGrid, rho: np.ndarray) -> Path:
    path = Path(path)
    c = spatial.coordinates()
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("x", "y", "z", "rho"))
        for row in zip(*(np.asarray(x).reshape(-1) for x in (c["x"], c["y"], c["z"], rho))):
            w.writerow([repr(float(v)) for v in row])
    return path


def run_macro(field0: MacroField, equation: str, spec: FieldSpec, t_final: float, *, d=None,
              d_z: float | None = None, dt: float | None = None, snapshot_times=(),
              implicit: bool = False, out_dir: str | Path | None = None, safety: float = 0.5) -> MacroRun:
    """Integrate a limiting equation; ``d`` for drift-diffusion, ``d_z`` for guiding center.

    The center of mass is tracked through the integrated net flux,
    ``d/dt int x rho = int F``, so that it is not affected by periodic
    wrap-around.
    """
    if equation not in EQUATIONS:
        raise ValidationError(f"unknown equation {equation!r}; known {EQUATIONS}", field="equation")
    sp = field0.spatial
    if equation == "drift_diffusion":
        if d is None:
            raise ValidationError("drift_diffusion needs a diffusion tensor", field="D")
        op = DriftDiffusionOperator(sp, d, spec)
    else:
        if d_z is None:
            if sp.geometry == "slab_z":
                raise ValidationError("guiding_center in slab_z needs D_z", field="D_z")
            d_z = 0.0
        op = GuidingCenterOperator(sp, d_z, spec)
    if not t_final >= 0.0:
        raise ValidationError("t_final must be non-negative", field="t_final")
    if dt is None:
        bound = op.stability_bound(field0.time)
        dt = safety * bound if math.isfinite(bound) else max(t_final, 1e-3)
    n_steps = max(1, math.ceil(t_final / dt - 1e-9)) if t_final > 0 else 0
    dt = t_final / n_steps if n_steps else dt
    snap_steps = {}
    for ts in snapshot_times:
        if not (0.0 <= ts <= t_final + 1e-12):
            raise ValidationError(f"snapshot time {ts} outside [0, t_final]", field="snapshot_times")
        snap_steps.setdefault(int(round(ts / dt)) if n_steps else 0, []).append(float(ts))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    vol = sp.cell_volume
    coords = sp.coordinates()
    com0 = np.array([np.sum(coords[a] * field0.rho) * vol for a in sp.axes]) / max(field0.total_mass(), 1e-300)
    rho = field0.rho
    times, masses, coms = [field0.time], [field0.total_mass()], [com0]
    snaps, snap_t, files = [], [], []

    def snap(r, idx):
        for ts in snap_steps.get(idx, []):
            snaps.append(r.copy())
            snap_t.append(ts)
            if out is not None:
                files.append(str(write_density_csv(out / f"macro_{len(snaps) - 1:04d}.csv", sp, r)))

    snap(rho, 0)
    t = field0.time
    for i in range(1, n_steps + 1):
        new, net_flux = _advance_with_flux(op, rho, t, dt, implicit)
        m = np.sum(rho) * vol
        shift = dt * vol * net_flux / m if m != 0 else np.zeros(len(sp.axes))
        coms.append(coms[-1] + shift)
        rho = new
        t = field0.time + i * dt
        times.append(t)
        masses.append(float(np.sum(rho) * vol))
        snap(rho, i)
    final = MacroField(sp, rho, t)
    return MacroRun(np.array(times), np.array(masses), snap_t, snaps, final, dt, n_steps,
                    np.array(coms), files)


def gaussian_variance_oracle(var0: float, d_eff: float, t: float) -> float:
    """Variance of a free Gaussian under ``d_t rho = D d_zz rho``: ``var0 + 2 D t``."""
    return var0 + 2.0 * d_eff * t


def periodic_variance(spatial: SpatialGrid, rho: np.ndarray, axis: int = 0) -> float:
    """Variance along ``axis`` about the circular mean (valid for well-localized data)."""
    L = spatial.lengths[axis]
    x = spatial.centers_1d(axis)
    marg = rho.sum(axis=tuple(b for b in range(rho.ndim) if b != axis))
    ang = np.angle(np.sum(marg * np.exp(2j * np.pi * x / L)))
    c = ang * L / (2.0 * np.pi)
    xr = (x - c + 0.5 * L) % L - 0.5 * L
    return float(np.sum(marg * xr**2) / np.sum(marg))
