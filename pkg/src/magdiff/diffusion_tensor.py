"""Diffusion tensor D^eta, its symmetric/antisymmetric split and its eta-expansion."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cell_solvers import CellSolution, ExpansionTerms
from .errors import ValidationError
from .grid import flux

PROVENANCES = ("direct", "adjoint", "expansion", "closed_form")
# leading antisymmetric block
ROTATION_BLOCK = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


def drift_vector(antisym: np.ndarray) -> np.ndarray:
    """Vector ``u`` with ``-antisym @ z = u x z`` for every ``z``."""
    return np.array([antisym[1, 2], -antisym[0, 2], antisym[0, 1]])


@dataclass(frozen=True, eq=False)
class DiffusionTensor:
    """3x3 diffusion matrix with its split and drift vector."""

    d: np.ndarray
    eta: float
    provenance: str
    u_drift: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        d = np.array(self.d, dtype=float)
        if d.shape != (3, 3):
            raise ValidationError(f"tensor must be 3x3, got {d.shape}", field="d")
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance {self.provenance!r}", field="provenance")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)
        if self.u_drift is None:
            object.__setattr__(self, "u_drift", drift_vector(self.antisym))
        else:
            object.__setattr__(self, "u_drift", np.asarray(self.u_drift, dtype=float))

    @property
    def sym(self) -> np.ndarray:
        return 0.5 * (self.d + self.d.T)

    @property
    def antisym(self) -> np.ndarray:
        return 0.5 * (self.d - self.d.T)

    def quadratic_form(self, x: np.ndarray) -> np.ndarray:
        """``x . D x`` for one vector or a stack of vectors (..., 3)."""
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.d, x)

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "provenance": self.provenance,
            "matrix": self.d.tolist(),
            "sym": self.sym.tolist(),
            "antisym": self.antisym.tolist(),
            "u_drift": self.u_drift.tolist(),
            "diagnostics": self.diagnostics,
        }

    def save_json(self, path: str | Path, extra: dict | None = None) -> Path:
        path = Path(path)
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        path.write_text(json.dumps(payload, indent=2, default=float))
        return path


def _weights(eta: float) -> tuple[np.ndarray, np.ndarray]:
    # row scaling (1/eta, 1/eta, 1) for v, column scaling (eta, eta, 1) for X
    return np.array([1.0 / eta, 1.0 / eta, 1.0]), np.array([eta, eta, 1.0])


def moment_matrix(cell: CellSolution) -> np.ndarray:
    """``m[i, j] = sum(w v_i X_j)``."""
    return np.column_stack([flux(x) for x in cell.components])


def assemble_D_eta(cell: CellSolution) -> DiffusionTensor:
    """``D^eta = int (v_perp / eta, v_z) (x) (eta X_perp, X_z) dv`` from primal cells.

    An adjoint cell solution (``cell.adjoint``) is converted through the
    moment identity ``s_i int v_i X_j = s_j int v_j X*_i`` with
    ``s = (1/eta^2, 1/eta^2, 1)``.
    """
    eta = cell.eta
    a, ap = _weights(eta)
    mom = moment_matrix(cell)
    if cell.adjoint:
        s = np.array([1.0 / eta**2, 1.0 / eta**2, 1.0])
        mom = mom.T * (s[None, :] / s[:, None])
    d = a[:, None] * mom * ap[None, :]
    diag = {"residual_norm": cell.residual_norm, "mass_defect": cell.mass_defect,
            "method": cell.method}
    return DiffusionTensor(d, eta, "adjoint" if cell.adjoint else "direct", diagnostics=diag)


def d_parallel(terms: ExpansionTerms) -> float:
    """Parallel diffusion constant ``D_z = int X_z^(0) v_z dv``."""
    return float(flux(terms.xz0)[2])


def expansion_blocks(terms: ExpansionTerms) -> dict:
    """Moments entering the expansion of ``D^eta``.

    ``d1_perp[i, j] = int v_i X1_j`` (perpendicular), ``c0[j] = int v_z X0_j``,
    ``c1[j] = int v_z X1_j`` for ``j`` in (x, y).
    """
    x0 = np.column_stack([flux(x) for x in terms.xperp0])  # (3, 2): rows v_x, v_y, v_z
    x1 = np.column_stack([flux(x) for x in terms.xperp1])
    return {"d0_perp": x0[:2, :], "d1_perp": x1[:2, :], "c0": x0[2, :], "c1": x1[2, :],
            "d_z": d_parallel(terms)}


def expansion_tensor(terms: ExpansionTerms, eta: float) -> DiffusionTensor:
    """Truncated expansion of ``D^eta``.

    ``sym = diag(eta^2 D1_perp, D_z) + eta^3 D1_zperp`` and
    ``antisym = D0_perp + eta D0_zperp``, where the ``zperp`` blocks couple the
    parallel row/column to the perpendicular ones through ``int v_z X_perp``.
    The leading block ``D0_perp = int v_perp (x) X0_perp`` equals
    ``((0,1),(-1,0))`` times the discrete second moment ``sum(w v_x^2 M)``;
    its distance to the exact rotation block is reported as
    ``rotation_block_error``.
    """
    eta = float(eta)
    if not eta > 0.0:
        raise ValidationError(f"eta must be positive, got {eta}", field="eta")
    b = expansion_blocks(terms)
    d0p = b["d0_perp"]
    d1p = b["d1_perp"]
    sym = np.zeros((3, 3))
    sym[:2, :2] = 0.5 * (d0p + d0p.T) + eta**2 * 0.5 * (d1p + d1p.T)
    sym[2, 2] = b["d_z"]
    # D1_zperp: symmetric coupling of v_z with X1_perp
    sym[2, :2] = sym[:2, 2] = eta**3 * b["c1"]
    anti = np.zeros((3, 3))
    anti[:2, :2] = 0.5 * (d0p - d0p.T)
    # D0_zperp: antisymmetric coupling of v_z with X0_perp
    anti[2, :2] = eta * b["c0"]
    anti[:2, 2] = -eta * b["c0"]
    u = np.array([-eta * b["c0"][1], eta * b["c0"][0], 1.0])
    diag = {"blocks": {k: np.asarray(v).tolist() for k, v in b.items()},
            "rotation_block_error": float(np.max(np.abs(anti[:2, :2] - ROTATION_BLOCK[:2, :2])))}
    return DiffusionTensor(sym + anti, eta, "expansion", u_drift=u, diagnostics=diag)


def relaxation_reference(tau: float, eta: float) -> DiffusionTensor:
    """Closed-form ``D^eta`` for the relaxation kernel ``sigma = 1 / tau``."""
    tau, eta = float(tau), float(eta)
    if not (tau > 0.0 and eta > 0.0):
        raise ValidationError("tau and eta must be positive", field="tau" if tau <= 0 else "eta")
    den = tau**2 + eta**4
    d = tau * np.array([
        [eta**2 / den, tau / den, 0.0],
        [-tau / den, eta**2 / den, 0.0],
        [0.0, 0.0, 1.0],
    ])
    return DiffusionTensor(d, eta, "closed_form")


def max_relative_error(computed: DiffusionTensor, reference: DiffusionTensor) -> float:
    """Entrywise relative error; zero reference entries are measured against ``max|ref|``."""
    ref = reference.d
    scale = np.where(np.abs(ref) > 0, np.abs(ref), np.max(np.abs(ref)))
    return float(np.max(np.abs(computed.d - ref) / scale))


def is_positive_definite(tensor: DiffusionTensor, n_samples: int = 100, seed: int = 0) -> bool:
    """``x . D x > 0`` on random directions plus the eigenvalues of the symmetric part."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_samples, 3))
    return bool(np.all(tensor.quadratic_form(x) > 0.0) and np.all(np.linalg.eigvalsh(tensor.sym) > 0.0))


SWEEP_COLUMNS = ("eta", "provenance") + tuple(f"d{i}{j}" for i in range(1, 4) for j in range(1, 4)) + (
    "u_x", "u_y", "u_z")


def write_sweep_csv(tensors: list[DiffusionTensor], path: str | Path) -> Path:
    """One row per tensor: eta, provenance, the nine entries and the drift vector."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for t in tensors:
            w.writerow([repr(t.eta), t.provenance] + [repr(float(x)) for x in t.d.reshape(-1)]
                       + [repr(float(x)) for x in t.u_drift])
    return path


def richardson_limit(etas, values, order: int = 4) -> float:
    """Extrapolate ``values(eta)`` to ``eta = 0`` assuming an error ``C eta^order``.

    Uses the two smallest ``eta``.
    """
    etas = np.asarray(etas, dtype=float)
    values = np.asarray(values, dtype=float)
    idx = np.argsort(etas)[:2]
    e1, e2 = etas[idx]
    v1, v2 = values[idx]
    r = (e2 / e1) ** order
    if not math.isfinite(r) or r == 1.0:
        raise ValidationError("need two distinct eta values", field="eta")
    return float((r * v1 - v2) / (r - 1.0))
