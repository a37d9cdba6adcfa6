"""Run configuration: a flat JSON object validated before any computation starts."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .cell_solvers import METHODS
from .collision_ops import CROSS_SECTIONS
from .errors import ValidationError
from .kinetic_sim import FIELD_KINDS, GEOMETRIES
from .macro_sim import EQUATIONS

INITIAL_KINDS = ("gaussian", "uniform", "cosine", "zero")


@dataclass
class RunConfig:
    """All parameters of a harness run.

    Grid keys configure the cell-problem velocity grid; the ``kinetic_*`` keys
    configure the (coarser) velocity grid used by kinetic runs and by the
    diffusion tensors those runs are compared against.
    """

    # velocity grid for cell problems
    n_radial: int = 8
    n_angle: int = 16
    n_parallel: int = 16
    v_max_perp: float = 6.0
    v_max_par: float = 6.0
    # velocity grid for kinetic runs
    kinetic_n_radial: int = 6
    kinetic_n_angle: int = 8
    kinetic_n_parallel: int = 12
    # collisions
    cross_section: str = "gauss_mix"
    cross_section_params: dict = field(default_factory=dict)
    storage: str | None = None
    # scalings
    eta: list = field(default_factory=lambda: [1.0])
    eps: list = field(default_factory=lambda: [0.1])
    method: str = "direct"
    check_adjoint: bool = True
    solver_tol: float = 1e-10
    zero_tol: float = 1e-8
    relaxation_tol: float = 1e-3
    # space and fields
    geometry: str = "slab_z"
    n_cells: list = field(default_factory=lambda: [64])
    domain_lengths: list = field(default_factory=lambda: [4.0])
    potential: str = "zero"
    potential_params: dict = field(default_factory=dict)
    initial_density: str = "gaussian"
    initial_params: dict = field(default_factory=lambda: {"width": 0.3})
    # time
    t_final: float = 0.5
    snapshot_times: list = field(default_factory=list)
    dt: float | None = None
    max_gyration_angle: float | None = None
    perp_horizon_eps2: float = 10.0
    # macro
    equation: str = "drift_diffusion"
    diffusion_matrix: list | None = None
    d_z: float | None = None
    implicit: bool = False
    macro_refine: int = 5
    # outputs
    dump_field: bool = False
    seed: int = 0
    workers: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ValidationError("configuration must be a JSON object", field="config")
        known = {f.name for f in fields(cls)}
        for key in raw:
            if key not in known:
                raise ValidationError("unknown configuration key", field=key)
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ValidationError(f"file not found: {path}", field="config") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"invalid JSON: {exc}", field="config") from exc
        if overrides:
            raw = {**raw, **overrides}
        return cls.from_dict(raw)

    # -- validation -----------------------------------------------------

    def validate(self) -> "RunConfig":
        for name in ("n_radial", "n_angle", "n_parallel", "kinetic_n_radial", "kinetic_n_angle",
                     "kinetic_n_parallel"):
            _int(self, name, minimum=2)
        for name in ("macro_refine", "workers"):
            _int(self, name, minimum=1)
        _int(self, "seed", minimum=0)
        if self.macro_refine % 2 == 0:
            raise ValidationError("must be odd so that coarse cell centres are fine cell centres",
                                  field="macro_refine")
        for name in ("v_max_perp", "v_max_par", "solver_tol", "zero_tol", "relaxation_tol",
                     "perp_horizon_eps2"):
            _pos(self, name)
        _pos(self, "t_final", allow_zero=True)
        for name in ("dt", "max_gyration_angle", "d_z"):
            if getattr(self, name) is not None:
                _pos(self, name, allow_zero=(name == "d_z"))
        _choice(self, "cross_section", tuple(CROSS_SECTIONS) + ("tabulated",))
        if self.cross_section == "tabulated" and "path" not in self.cross_section_params:
            raise ValidationError("tabulated cross section needs a 'path' entry",
                                  field="cross_section_params")
        if self.storage is not None:
            _choice(self, "storage", ("dense", "matrix_free", "constant"))
        _choice(self, "method", METHODS)
        _choice(self, "geometry", GEOMETRIES)
        _choice(self, "potential", FIELD_KINDS)
        _choice(self, "initial_density", INITIAL_KINDS)
        _choice(self, "equation", EQUATIONS)
        for name in ("cross_section_params", "potential_params", "initial_params"):
            if not isinstance(getattr(self, name), dict):
                raise ValidationError("must be a JSON object", field=name)
        for name in ("check_adjoint", "implicit", "dump_field"):
            if not isinstance(getattr(self, name), bool):
                raise ValidationError("must be true or false", field=name)
        self.eta = _pos_list(self, "eta")
        self.eps = _pos_list(self, "eps")
        self.snapshot_times = _num_list(self, "snapshot_times")
        for t in self.snapshot_times:
            if not 0.0 <= t <= self.t_final:
                raise ValidationError(f"snapshot time {t} outside [0, t_final]", field="snapshot_times")
        want = {"homogeneous": 0, "slab_z": 1, "perp_xy": 2}[self.geometry]
        if want:
            for name in ("n_cells", "domain_lengths"):
                if not isinstance(getattr(self, name), list):
                    raise ValidationError("must be a list", field=name)
            if len(self.n_cells) != want:
                raise ValidationError(f"{self.geometry} needs {want} entries", field="n_cells")
            if len(self.domain_lengths) != want:
                raise ValidationError(f"{self.geometry} needs {want} entries", field="domain_lengths")
            for n in self.n_cells:
                if not isinstance(n, int) or isinstance(n, bool) or n < 2:
                    raise ValidationError("cell counts must be integers >= 2", field="n_cells")
            self.domain_lengths = _pos_list(self, "domain_lengths")
        if self.diffusion_matrix is not None:
            try:
                rows = [[float(x) for x in row] for row in self.diffusion_matrix]
            except (TypeError, ValueError) as exc:
                raise ValidationError("must be a 3x3 list of numbers", field="diffusion_matrix") from exc
            if len(rows) != 3 or any(len(r) != 3 for r in rows):
                raise ValidationError("must be a 3x3 list of numbers", field="diffusion_matrix")
            self.diffusion_matrix = rows
        return self


def _int(cfg, name, minimum):
    v = getattr(cfg, name)
    if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
        raise ValidationError(f"must be an integer >= {minimum}, got {v!r}", field=name)


def _pos(cfg, name, allow_zero=False):
    v = getattr(cfg, name)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ValidationError(f"must be a finite number, got {v!r}", field=name)
    if v < 0 or (v == 0 and not allow_zero):
        raise ValidationError(f"must be {'non-negative' if allow_zero else 'positive'}, got {v!r}", field=name)
    setattr(cfg, name, float(v))


def _num_list(cfg, name) -> list:
    v = getattr(cfg, name)
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        v = [v]
    if not isinstance(v, list):
        raise ValidationError("must be a list of numbers", field=name)
    out = []
    for x in v:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise ValidationError(f"entries must be finite numbers, got {x!r}", field=name)
        out.append(float(x))
    return out


def _pos_list(cfg, name) -> list:
    out = _num_list(cfg, name)
    if not out:
        raise ValidationError("must not be empty", field=name)
    if any(x <= 0 for x in out):
        raise ValidationError("entries must be positive", field=name)
    return out


def _choice(cfg, name, options):
    v = getattr(cfg, name)
    if v not in options:
        raise ValidationError(f"must be one of {sorted(options)}, got {v!r}", field=name)
