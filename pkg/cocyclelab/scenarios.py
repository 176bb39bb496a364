"""
Scenario configuration: JSON files validated into pydantic models and built
into CocycleSystem instances
"""

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .configs import ATOM_DECADES, CONFIG_PROBABILITY_TOL, INPUT_DET_TOL, scenario_dir
from .errors import ConfigError, InvalidInputError
from .walk import Atom, CocycleSystem

EXPERIMENT_KINDS = (
    "exponents",
    "flags",
    "blocks",
    "conformality",
    "stationary",
    "regularity",
    "furstenberg",
    "tracking",
    "identities",
    "full-report",
)


class MatrixSpec(BaseModel):
    """One matrix, real or complex; complex matrices require a realified scenario"""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["matrix", "diagonal", "rotation", "product"] = Field(description="How the matrix is given")
    rows: Optional[List[List[float]]] = Field(default=None, description="Row-major entries (kind=matrix)")
    imag: Optional[List[List[float]]] = Field(default=None, description="Imaginary parts (kind=matrix)")
    entries: Optional[List[float]] = Field(default=None, description="Diagonal moduli (kind=diagonal)")
    phases: Optional[List[float]] = Field(default=None, description="Diagonal arguments in radians (kind=diagonal)")
    angle: Optional[float] = Field(default=None, description="Rotation angle in radians (kind=rotation)")
    plane: Tuple[int, int] = Field(default=(0, 1), description="Coordinate plane of the rotation")
    factors: Optional[List["MatrixSpec"]] = Field(default=None, description="Product factors, multiplied in order")

    @model_validator(mode="after")
    def _check_kind(self):
        needed = {"matrix": "rows", "diagonal": "entries", "rotation": "angle", "product": "factors"}[self.kind]
        if getattr(self, needed) is None:
            raise ValueError(f"matrix kind {self.kind!r} needs field {needed!r}")
        return self

    def evaluate(self, size: int) -> np.ndarray:
        if self.kind == "matrix":
            m = np.array(self.rows, dtype=complex if self.imag is not None else float)
            if self.imag is not None:
                m = m + 1j * np.array(self.imag, dtype=float)
        elif self.kind == "diagonal":
            entries = np.array(self.entries, dtype=float)
            if self.phases is None:
                m = np.diag(entries)
            else:
                m = np.diag(entries * np.exp(1j * np.array(self.phases, dtype=float)))
        elif self.kind == "rotation":
            i, j = self.plane
            if not (0 <= i < size and 0 <= j < size and i != j):
                raise ValueError(f"rotation plane {self.plane} outside dimension {size}")
            m = np.eye(size)
            c, s = np.cos(self.angle), np.sin(self.angle)
            m[i, i], m[i, j], m[j, i], m[j, j] = c, -s, s, c
        else:
            m = np.eye(size)
            for factor in self.factors:
                m = m @ factor.evaluate(size)
        if m.shape != (size, size):
            raise ValueError(f"matrix has shape {m.shape}, expected {(size, size)}")
        return m


class AtomConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    label: str = Field(description="Atom name used in logs and reports")
    probability: float = Field(description="mu-mass of the atom (and of its inverse when included)")
    base_map: Optional[List[int]] = Field(default=None, description="Permutation of the state indices, identity by default")
    matrix: Optional[MatrixSpec] = Field(default=None, description="Matrix used at every state")
    matrices: Optional[List[MatrixSpec]] = Field(default=None, description="One matrix per state")
    include_inverse: bool = Field(default=False, description="Also add the inverse atom with the same probability")

    @model_validator(mode="after")
    def _check_matrices(self):
        if (self.matrix is None) == (self.matrices is None):
            raise ValueError(f"atom {self.label!r} needs exactly one of 'matrix' or 'matrices'")
        return self


class ExperimentConfig(BaseModel):
    """One requested experiment; unused fields are ignored by the other kinds"""
    model_config = ConfigDict(extra="forbid")

    kind: Literal[EXPERIMENT_KINDS] = Field(description="Experiment kind")
    n_steps: int = Field(default=10_000, ge=1, description="Path length for exponent estimation")
    n_trials: int = Field(default=8, ge=1, description="Independent paths")
    horizons: List[int] = Field(default_factory=lambda: [100, 1_000, 10_000], description="Increasing horizons")
    flag_horizon: int = Field(default=500, ge=1, description="Path length used to estimate flags")
    n_paths: int = Field(default=20, ge=1, description="Two-sided paths for the transversality survey")
    burn_in: int = Field(default=1_000, ge=1, description="Chain burn-in for stationary clouds")
    n_samples: int = Field(default=2_000, ge=1, description="Stationary cloud size")
    init: Literal["dispersed", "standard", "point"] = Field(default="dispersed",
                                                           description="Initial flags of the stationary chains")
    n_mc: int = Field(default=100_000, ge=2, description="Cloud samples integrated by the Furstenberg check, capped at the cloud size")
    n_g: int = Field(default=32, ge=0, description="Random group elements in the regularity scan")
    eps: List[float] = Field(default_factory=lambda: [0.001 * 2 ** i for i in range(8)],
                             description="Geometric radius grid for regularity and atom scans")
    ball_eps: float = Field(default=0.05, gt=0, description="Ball radius for pullback concentration")
    angle_tol: float = Field(default=1e-3, gt=0, description="Principal-angle tolerance for block intersections")
    cluster_tol: float = Field(default=1e-2, gt=0, description="Relative exponent clustering tolerance")
    n_samples_identities: int = Field(default=10_000, ge=1, description="Random elements for the identity suite")

    @field_validator("horizons")
    @classmethod
    def _increasing(cls, horizons: List[int]) -> List[int]:
        if not horizons or horizons[0] < 1 or any(b <= a for a, b in zip(horizons, horizons[1:])):
            raise ValueError(f"horizon-order invariant violated: horizons must be positive and increasing, got {horizons}")
        return horizons

    @field_validator("eps")
    @classmethod
    def _positive(cls, eps: List[float]) -> List[float]:
        if not eps or min(eps) <= 0:
            raise ValueError("eps grid must be non-empty and positive")
        if max(eps) < min(eps) * 10.0 ** ATOM_DECADES * (1.0 - 1e-9):
            raise ValueError(f"eps grid must span {ATOM_DECADES} decades for the atom test")
        return sorted(eps)


class ScenarioConfig(BaseModel):
    """A cocycle system plus the experiments to run on it"""
    model_config = ConfigDict(extra="forbid")

    name: str = Field(description="Scenario name")
    description: str = Field(default="", description="One-line description for the catalog")
    n: int = Field(ge=2, description="Real dimension of the cocycle")
    states: List[str] = Field(default_factory=lambda: ["x0"], description="Base state labels")
    base_distribution: Optional[List[float]] = Field(default=None, description="Stationary law on the states")
    realify: bool = Field(default=False, description="Atoms are complex (n/2)x(n/2) matrices acting on R^n = C^(n/2)")
    allow_asymmetric: bool = Field(default=False, description="Skip the symmetry invariant")
    seed: int = Field(default=0, description="Run seed")
    workers: int = Field(default=1, ge=1, description="Worker processes")
    atoms: List[AtomConfig] = Field(description="Support of mu")
    experiments: List[ExperimentConfig] = Field(default_factory=list, description="Experiments in run order")

    @model_validator(mode="after")
    def _check_invariants(self):
        total = sum(a.probability * (2 if a.include_inverse else 1) for a in self.atoms)
        if any(a.probability <= 0 for a in self.atoms):
            raise ValueError("probability-sum invariant violated: atom probabilities must be positive")
        if abs(total - 1.0) > CONFIG_PROBABILITY_TOL:
            raise ValueError(f"probability-sum invariant violated: probabilities sum to {total:.12g}, expected 1")
        if self.realify and self.n % 2:
            raise ValueError("realified scenarios need an even dimension")
        return self


def _realify(m: np.ndarray) -> np.ndarray:
    """a + ib acting on C^k as the real 2k x 2k matrix [[a, -b], [b, a]]"""
    a, b = m.real, m.imag
    return np.block([[a, -b], [b, a]])


def _to_group(m: np.ndarray, label: str, n: int, realify: bool) -> np.ndarray:
    if realify:
        m = _realify(np.asarray(m, dtype=complex))
    elif np.iscomplexobj(m):
        raise ConfigError(f"atom {label!r} has complex entries; set realify to use complex matrices")
    m = np.asarray(m, dtype=float)
    if m.shape != (n, n) or not np.all(np.isfinite(m)):
        raise ConfigError(f"atom {label!r}: matrix is not a finite {n}x{n} array")
    det = np.linalg.det(m)
    if abs(det - 1.0) > INPUT_DET_TOL:
        raise ConfigError(f"determinant invariant violated: atom {label!r} has determinant {det:.9g}")
    return m / det ** (1.0 / n)


def build_system(config: ScenarioConfig) -> CocycleSystem:
    """Expand inverse atoms, realify if requested and validate into a CocycleSystem"""
    n_states = len(config.states)
    size = config.n // 2 if config.realify else config.n
    atoms = []
    try:
        for spec in config.atoms:
            base_map = tuple(spec.base_map) if spec.base_map is not None else tuple(range(n_states))
            specs = spec.matrices if spec.matrices is not None else [spec.matrix] * n_states
            if len(specs) != n_states or len(base_map) != n_states:
                raise ConfigError(f"atom {spec.label!r} needs one matrix and one base-map entry per state")
            mats = tuple(_to_group(s.evaluate(size), spec.label, config.n, config.realify) for s in specs)
            atoms.append(Atom(spec.probability, base_map, mats, spec.label))
            if spec.include_inverse:
                inverse_map = tuple(int(i) for i in np.argsort(base_map))
                inv_mats = tuple(np.linalg.inv(mats[inverse_map[y]]) for y in range(n_states))
                atoms.append(Atom(spec.probability, inverse_map, inv_mats, f"{spec.label}^-1"))
        total = sum(a.probability for a in atoms)
        atoms = [Atom(a.probability / total, a.base_map, a.matrices, a.label) for a in atoms]
        return CocycleSystem(config.n, config.states, atoms, config.base_distribution,
                             allow_asymmetric=config.allow_asymmetric, name=config.name)
    except (InvalidInputError, ValueError) as e:
        raise ConfigError(f"scenario {config.name!r}: {e}") from e


def parse_scenario(text: str, source: str = "<string>") -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate_json(text)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc']) or 'scenario'}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid scenario {source}: {problems}") from e


def normalized_json(config: ScenarioConfig) -> str:
    """Canonical text of a parsed config; parsing it again reproduces it exactly"""
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


def scenario_digest(config: ScenarioConfig) -> str:
    return hashlib.sha256(normalized_json(config).encode("utf-8")).hexdigest()


def resolve_scenario(ref: Union[str, Path], directory: Optional[Path] = None) -> Path:
    """A config path, or the name of a bundled scenario"""
    path = Path(ref)
    if path.is_file():
        return path
    candidate = Path(directory or scenario_dir()) / f"{ref}.json"
    if candidate.is_file():
        return candidate
    raise ConfigError(f"no scenario file or bundled scenario named {str(ref)!r}")


def load_scenario(ref: Union[str, Path], directory: Optional[Path] = None) -> ScenarioConfig:
    path = resolve_scenario(ref, directory)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read scenario {path}: {e}") from e
    config = parse_scenario(text, str(path))
    logger.debug(f"loaded scenario {config.name} from {path}")
    return config


def list_scenarios(directory: Optional[Path] = None) -> List[dict]:
    """
    Scenario catalog sorted by name.

    Returns:
        list of {"name", "description", "digest"}; an empty or missing
        directory gives an empty list
    """
    directory = Path(directory or scenario_dir())
    if not directory.is_dir():
        return []
    catalog = []
    for path in sorted(directory.glob("*.json")):
        try:
            config = load_scenario(path)
        except ConfigError as e:
            logger.warning(f"skipping {path.name}: {e}")
            continue
        catalog.append({"name": config.name, "description": config.description, "digest": scenario_digest(config)})
    return sorted(catalog, key=lambda entry: entry["name"])


def catalog_digest(catalog: List[dict]) -> str:
    text = "\n".join(f"{entry['name']}:{entry['digest']}" for entry in catalog)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
