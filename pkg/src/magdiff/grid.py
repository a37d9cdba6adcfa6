"""Cylindrical velocity grid, Maxwellian, rotations, averages and weighted norms.

Velocity space is discretized on a tensor grid in cylindrical coordinates
``(r, theta, v_z)``: Gauss-Legendre nodes in ``r`` on ``(0, v_max_perp]`` and
in ``v_z`` on ``[-v_max_par, v_max_par]``, uniform angles in ``theta``.  Node
index order is ``(i_r, i_theta, i_z)`` with ``i_z`` varying fastest, so any
value array of length ``N`` reshapes to a ``(n_radial, n_angle, n_parallel)``
cube.

Because angles are uniform, rotation about ``e_z`` by a multiple of the angle
spacing is an index permutation and the gyration operator is a spectral
derivative along the angle axis.  Every routine here accepts arrays with
arbitrary leading batch dimensions (``(..., N)``) in its ``*_values`` form, and
a :class:`Distribution` in its public form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GridMismatchError, ValidationError

MAXWELL_NORM = (2.0 * np.pi) ** -1.5
# Smallest Maxwellian value admitted at a node (guards 1/M in inner products).
M_FLOOR = 1e-300


def maxwellian_values(v: np.ndarray) -> np.ndarray:
    """Normalized Maxwellian ``(2 pi)^{-3/2} exp(-|v|^2 / 2)`` for ``v`` of shape (..., 3)."""
    v = np.asarray(v, dtype=float)
    return MAXWELL_NORM * np.exp(-0.5 * np.sum(v * v, axis=-1))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class VelocityGrid:
    """Cylindrical tensor velocity mesh with quadrature weights.

    Attributes
    ----------
    n_radial, n_angle, n_parallel : int
        Number of nodes per direction.
    v_max_perp, v_max_par : float
        Truncation of ``|v_perp|`` and ``|v_z|``.
    r, w_r : ndarray
        Radial nodes and weights; ``w_r`` includes the Jacobian ``r``.
    theta : ndarray
        Uniform angles ``2 pi k / n_angle``.
    v_par, w_par : ndarray
        Parallel nodes and weights.
    nodes : ndarray, shape (N, 3)
        Cartesian velocity of every node.
    weights : ndarray, shape (N,)
        ``w_r * (2 pi / n_angle) * w_par``, approximating ``dv``.
    maxwellian : ndarray, shape (N,)
        ``M`` sampled at the nodes.
    truncation_deficit : float
        Exact Maxwellian mass outside the truncated cylinder.
    deficit : float
        ``1 - sum(w M)`` on this grid (may be slightly negative when the
        quadrature overshoots).
    tol_mass : float
        Declared tolerance on ``|1 - sum(w M)|``.
    """

    n_radial: int
    n_angle: int
    n_parallel: int
    v_max_perp: float
    v_max_par: float
    r: np.ndarray = field(repr=False)
    w_r: np.ndarray = field(repr=False)
    theta: np.ndarray = field(repr=False)
    v_par: np.ndarray = field(repr=False)
    w_par: np.ndarray = field(repr=False)
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    maxwellian: np.ndarray = field(repr=False)
    truncation_deficit: float = 0.0
    deficit: float = 0.0
    tol_mass: float = 0.0

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_radial, self.n_angle, self.n_parallel)

    @property
    def size(self) -> int:
        return self.n_radial * self.n_angle * self.n_parallel

    @property
    def n_lines(self) -> int:
        """Number of gyration orbits (radius x parallel pairs)."""
        return self.n_radial * self.n_parallel

    @property
    def d_theta(self) -> float:
        return 2.0 * np.pi / self.n_angle

    @property
    def vx(self) -> np.ndarray:
        return self.nodes[:, 0]

    @property
    def vy(self) -> np.ndarray:
        return self.nodes[:, 1]

    @property
    def vz(self) -> np.ndarray:
        return self.nodes[:, 2]

    @property
    def mass_maxwellian(self) -> float:
        """Discrete ``sum(w M)``, written massM throughout."""
        return float(np.sum(self.weights * self.maxwellian))

    @property
    def line_weights(self) -> np.ndarray:
        """Weight of each gyration orbit, shape (n_radial, n_parallel)."""
        return np.outer(self.w_r, self.w_par) * 2.0 * np.pi

    def cube(self, values: np.ndarray) -> np.ndarray:
        """Reshape (..., N) to (..., n_radial, n_angle, n_parallel)."""
        values = np.asarray(values)
        return values.reshape(values.shape[:-1] + self.shape)

    def flat(self, cube: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`cube`."""
        cube = np.asarray(cube)
        return cube.reshape(cube.shape[:-3] + (self.size,))

    def same_as(self, other: "VelocityGrid") -> bool:
        if other is self:
            return True
        return (
            self.shape == other.shape
            and self.v_max_perp == other.v_max_perp
            and self.v_max_par == other.v_max_par
        )

    def describe(self) -> dict:
        return {
            "n_radial": self.n_radial,
            "n_angle": self.n_angle,
            "n_parallel": self.n_parallel,
            "v_max_perp": self.v_max_perp,
            "v_max_par": self.v_max_par,
            "n_nodes": self.size,
            "mass_maxwellian": self.mass_maxwellian,
            "deficit": self.deficit,
            "truncation_deficit": self.truncation_deficit,
            "tol_mass": self.tol_mass,
        }


def _check_count(name: str, value) -> int:
    if isinstance(value, bool) or int(value) != value or int(value) < 2:
        raise ValidationError(f"must be an integer >= 2, got {value!r}", field=name)
    return int(value)


def _check_positive(name: str, value) -> float:
    value = float(value)
    if not math.isfinite(value) or value <= 0.0:
        raise ValidationError(f"must be a positive finite number, got {value!r}", field=name)
    return value


def build_grid(
    n_radial: int = 8,
    n_angle: int = 16,
    n_parallel: int = 16,
    v_max_perp: float = 6.0,
    v_max_par: float = 6.0,
) -> VelocityGrid:
    """Build the cylindrical Gauss-Legendre / uniform-angle velocity grid.

    Raises
    ------
    ValidationError
        For non-positive sizes or truncations large enough that ``M`` would
        underflow at a node.
    """
    n_radial = _check_count("n_radial", n_radial)
    n_angle = _check_count("n_angle", n_angle)
    n_parallel = _check_count("n_parallel", n_parallel)
    v_max_perp = _check_positive("v_max_perp", v_max_perp)
    v_max_par = _check_positive("v_max_par", v_max_par)
    if 0.5 * (v_max_perp**2 + v_max_par**2) > -math.log(M_FLOOR / MAXWELL_NORM):
        raise ValidationError("Maxwellian underflows at the truncation boundary", field="v_max_perp")

    x, w = np.polynomial.legendre.leggauss(n_radial)
    r = 0.5 * v_max_perp * (x + 1.0)
    w_r = 0.5 * v_max_perp * w * r
    theta = 2.0 * np.pi * np.arange(n_angle) / n_angle
    x, w = np.polynomial.legendre.leggauss(n_parallel)
    v_par = v_max_par * x
    w_par = v_max_par * w

    R, T, Z = np.meshgrid(r, theta, v_par, indexing="ij")
    nodes = np.stack([R * np.cos(T), R * np.sin(T), Z], axis=-1).reshape(-1, 3)
    weights = (w_r[:, None, None] * (2.0 * np.pi / n_angle) * w_par[None, None, :]
               * np.ones((1, n_angle, 1))).reshape(-1)
    maxw = maxwellian_values(nodes)

    mass_m = float(np.sum(weights * maxw))
    inside = (1.0 - math.exp(-0.5 * v_max_perp**2)) * math.erf(v_max_par / math.sqrt(2.0))
    truncation = 1.0 - inside
    quad_err = abs(mass_m - inside)
    return VelocityGrid(
        n_radial=n_radial,
        n_angle=n_angle,
        n_parallel=n_parallel,
        v_max_perp=v_max_perp,
        v_max_par=v_max_par,
        r=_readonly(r),
        w_r=_readonly(w_r),
        theta=_readonly(theta),
        v_par=_readonly(v_par),
        w_par=_readonly(w_par),
        nodes=_readonly(nodes),
        weights=_readonly(weights),
        maxwellian=_readonly(maxw),
        truncation_deficit=float(truncation),
        deficit=1.0 - mass_m,
        tol_mass=float(truncation + 2.0 * quad_err + 1e-14),
    )


@dataclass(frozen=True, eq=False)
class Distribution:
    """Scalar field on a velocity grid (stores ``f`` itself, not ``f / M``)."""

    grid: VelocityGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float, copy=True).reshape(-1)
        if vals.size != self.grid.size:
            raise ValidationError(
                f"expected {self.grid.size} values, got {vals.size}", field="values"
            )
        if not np.all(np.isfinite(vals)):
            raise ValidationError("values must be finite", field="values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def _other(self, other):
        if isinstance(other, Distribution):
            check_same_grid(self, other)
            return other.values
        return other

    def __add__(self, other):
        return Distribution(self.grid, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Distribution(self.grid, self.values - self._other(other))

    def __rsub__(self, other):
        return Distribution(self.grid, self._other(other) - self.values)

    def __mul__(self, other):
        return Distribution(self.grid, self.values * self._other(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Distribution(self.grid, self.values / self._other(other))

    def __neg__(self):
        return Distribution(self.grid, -self.values)

    @property
    def cube(self) -> np.ndarray:
        return self.grid.cube(self.values)


def check_same_grid(*dists: Distribution) -> VelocityGrid:
    grid = dists[0].grid
    for d in dists[1:]:
        if not grid.same_as(d.grid):
            raise GridMismatchError("distributions live on different grids")
    return grid


def zeros(grid: VelocityGrid) -> Distribution:
    return Distribution(grid, np.zeros(grid.size))


def maxwellian(grid: VelocityGrid) -> Distribution:
    """The normalized Maxwellian sampled on the grid."""
    return Distribution(grid, grid.maxwellian)


def from_function(grid: VelocityGrid, func) -> Distribution:
    """Sample ``func(vx, vy, vz)`` at the grid nodes."""
    return Distribution(grid, func(grid.vx, grid.vy, grid.vz))


# ---------------------------------------------------------------------------
# Angular Fourier machinery on raw (..., N) arrays

def angular_wavenumbers(n_angle: int) -> np.ndarray:
    """rfft wavenumbers ``0..n//2``; the Nyquist entry (even n) is kept."""
    return np.arange(n_angle // 2 + 1, dtype=float)


def derivative_wavenumbers(n_angle: int) -> np.ndarray:
    """rfft wavenumbers with the Nyquist mode zeroed (no resolvable oscillation)."""
    k = angular_wavenumbers(n_angle)
    if n_angle % 2 == 0:
        k[-1] = 0.0
    return k


def angular_rfft(grid: VelocityGrid, a: np.ndarray) -> np.ndarray:
    return np.fft.rfft(grid.cube(a), axis=-2)


def angular_irfft(grid: VelocityGrid, c: np.ndarray) -> np.ndarray:
    return grid.flat(np.fft.irfft(c, n=grid.n_angle, axis=-2))


def _mode_shape(k: np.ndarray) -> np.ndarray:
    # broadcast a per-mode factor against (..., n_modes, n_parallel)
    return k[:, None]


def rotate_values(grid: VelocityGrid, a: np.ndarray, tau: float) -> np.ndarray:
    """Sample ``f(R(tau) v)``; equals ``f`` at angle ``theta - tau``."""
    a = np.asarray(a, dtype=float)
    q = tau / grid.d_theta
    qi = round(q)
    if abs(q - qi) <= 1e-12 * max(1.0, abs(q)):
        return grid.flat(np.roll(grid.cube(a), qi % grid.n_angle, axis=-2))
    k = angular_wavenumbers(grid.n_angle)
    phase = np.exp(-1j * k * tau)
    if grid.n_angle % 2 == 0:
        phase[-1] = math.cos(k[-1] * tau)
    c = angular_rfft(grid, a) * _mode_shape(phase)
    return angular_irfft(grid, c)


def average_values(grid: VelocityGrid, a: np.ndarray) -> np.ndarray:
    """Mean over the grid angles, broadcast back to every angle."""
    c = grid.cube(np.asarray(a, dtype=float))
    return grid.flat(np.broadcast_to(c.mean(axis=-2, keepdims=True), c.shape).copy())


def gyration_values(grid: VelocityGrid, a: np.ndarray) -> np.ndarray:
    """``G f = d/dtau f(R(tau) v)|_0 = -d f / d theta`` (spectral, Nyquist dropped)."""
    k = derivative_wavenumbers(grid.n_angle)
    c = angular_rfft(grid, np.asarray(a, dtype=float)) * _mode_shape(-1j * k)
    return angular_irfft(grid, c)


def partial_average_values(grid: VelocityGrid, a: np.ndarray, tau: float) -> np.ndarray:
    """``(1/2pi) int_0^tau f(R(s) v) ds`` integrated mode by mode."""
    if tau == 2.0 * np.pi:
        return average_values(grid, a)
    k = angular_wavenumbers(grid.n_angle)
    fac = np.empty(k.size, dtype=complex)
    fac[0] = tau
    kk = k[1:]
    fac[1:] = (1.0 - np.exp(-1j * kk * tau)) / (1j * kk)
    if grid.n_angle % 2 == 0:
        fac[-1] = math.sin(k[-1] * tau) / k[-1]
    c = angular_rfft(grid, np.asarray(a, dtype=float)) * _mode_shape(fac)
    return angular_irfft(grid, c) / (2.0 * np.pi)


# ---------------------------------------------------------------------------
# Public operators on distributions

def rotate(f: Distribution, tau: float) -> Distribution:
    """Rotation ``f(R(tau) v)`` about ``e_z``."""
    return Distribution(f.grid, rotate_values(f.grid, f.values, float(tau)))


def cyl_average(f: Distribution) -> Distribution:
    """Cylindrical average ``A f`` (orthogonal projector onto gyro-symmetric data)."""
    return Distribution(f.grid, average_values(f.grid, f.values))


def partial_average(f: Distribution, tau: float) -> Distribution:
    """Partial average ``A_tau f`` for ``tau`` in ``[0, 2 pi]``."""
    tau = float(tau)
    if not (0.0 <= tau <= 2.0 * np.pi):
        raise ValidationError(f"tau must lie in [0, 2pi], got {tau}", field="tau")
    return Distribution(f.grid, partial_average_values(f.grid, f.values, tau))


def gyration(f: Distribution) -> Distribution:
    """Gyration operator ``G f = (v x e_z) . grad_v f``."""
    return Distribution(f.grid, gyration_values(f.grid, f.values))


def anisotropic_part(f: Distribution) -> Distribution:
    """``f - A f``."""
    return f - cyl_average(f)


def weighted_inner(f: Distribution, g: Distribution) -> float:
    """Discrete ``<f, g>_M = sum(w f g / M)``."""
    grid = check_same_grid(f, g)
    return float(np.sum(grid.weights * f.values * g.values / grid.maxwellian))


def weighted_norm(f: Distribution) -> float:
    return math.sqrt(max(weighted_inner(f, f), 0.0))


def mass(f: Distribution) -> float:
    """``sum(w f)``."""
    return float(np.dot(f.grid.weights, f.values))


def flux(f: Distribution) -> np.ndarray:
    """First velocity moment ``sum(w v f)`` as a 3-vector."""
    return (f.grid.weights * f.values) @ f.grid.nodes


def norm_values(grid: VelocityGrid, a: np.ndarray) -> np.ndarray:
    """``||a||_M`` over the last axis of a raw (..., N) array."""
    a = np.asarray(a, dtype=float)
    return np.sqrt(np.sum(grid.weights / grid.maxwellian * a * a, axis=-1))


def inner_values(grid: VelocityGrid, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(grid.weights / grid.maxwellian * np.asarray(a) * np.asarray(b), axis=-1)


def mass_projection(f: Distribution) -> Distribution:
    """Orthogonal projection onto span{M} in ``<.,.>_M``: ``(mass f / massM) M``."""
    grid = f.grid
    return Distribution(grid, mass(f) / grid.mass_maxwellian * grid.maxwellian)


def remove_mass(f: Distribution) -> Distribution:
    return f - mass_projection(f)


def random_distribution(grid: VelocityGrid, rng: np.random.Generator, *,
                        smooth: bool = False, zero_mass: bool = False) -> Distribution:
    """Random test datum ``phi M`` with ``phi`` of order one.

    With ``smooth`` the angular content is restricted to modes below Nyquist
    and ``phi`` is a low-order polynomial in ``v`` times random angular modes.
    """
    if smooth:
        n_modes = max(1, min(3, (grid.n_angle - 1) // 2))
        r = grid.cube(np.hypot(grid.vx, grid.vy))
        t = grid.theta[None, :, None]
        z = grid.cube(grid.vz)
        phi = np.zeros(grid.shape)
        for m in range(n_modes + 1):
            ca, cb = rng.normal(size=(2, 3))
            radial_a = ca[0] + ca[1] * r + ca[2] * z
            radial_b = cb[0] + cb[1] * r + cb[2] * z * r
            phi = phi + radial_a * np.cos(m * t) + (radial_b * np.sin(m * t) if m else 0.0)
        vals = grid.flat(phi) * grid.maxwellian
    else:
        vals = rng.normal(size=grid.size) * grid.maxwellian
    f = Distribution(grid, vals)
    return remove_mass(f) if zero_mass else f


# ---------------------------------------------------------------------------
# CSV interface

CSV_HEADER = "v_x,v_y,v_z,weight,value"


def dump_distribution(f: Distribution, path: str | Path) -> Path:
    """Write ``f`` as CSV with columns (v_x, v_y, v_z, weight, value)."""
    path = Path(path)
    table = np.column_stack([f.grid.nodes, f.grid.weights, f.values])
    np.savetxt(path, table, delimiter=",", header=CSV_HEADER, comments="", fmt="%.17g")
    return path


def load_distribution(path: str | Path, grid: VelocityGrid) -> Distribution:
    """Read a Distribution CSV and check it matches ``grid`` node by node."""
    table = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    if table.shape != (grid.size, 5):
        raise GridMismatchError(
            f"CSV has shape {table.shape}, grid expects ({grid.size}, 5)"
        )
    scale = max(grid.v_max_perp, grid.v_max_par)
    if not np.allclose(table[:, :3], grid.nodes, rtol=0.0, atol=1e-12 * scale):
        raise GridMismatchError("CSV nodes do not match the grid")
    if not np.allclose(table[:, 3], grid.weights, rtol=1e-12, atol=0.0):
        raise GridMismatchError("CSV weights do not match the grid")
    return Distribution(grid, table[:, 4])
