"""
Stationary measures on the flag variety

Clouds are sampled by running many chains of the skew product
(x, z) -> (u x, A(u, x) z) in lockstep; every step is one batched QR.
Pullbacks and pushforwards along a word are done step by step as well, so
flags never pass through an overflowing product.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field

from .boundary import FullFlag, dist_to_complement_batch, flag_distance, flag_distance_batch, sigma_hat_batch
from .configs import (
    ATOM_DECADES,
    ATOM_PLATEAU,
    ATOM_THRESHOLD,
    BALL_CENTER_CANDIDATES,
    PROBABILITY_TOL,
    SE_FLOOR,
    STATIONARITY_Z,
)
from .errors import InvalidInputError, NotStationaryError
from .liegroup import random_element, random_orthogonal
from .oseledets import FlagEstimate, LyapunovReport
from .walk import CHAIN_STREAM, INITIAL_STREAM, MONTE_CARLO_STREAM, SCAN_STREAM, CocycleSystem, Word, state_path, trial_rng

INITIALIZATIONS = ("dispersed", "standard", "point")


@dataclass
class MeasureCloud:
    """
    Weighted flag samples over the base: a finite stand-in for the
    stationary measure. Row i is (weights[i], states[i], bases[i]).
    """
    n: int
    weights: np.ndarray
    states: np.ndarray
    bases: np.ndarray
    state_labels: Tuple[str, ...] = ("x0",)
    stationary: bool = True
    diagnostic: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.states = np.asarray(self.states, dtype=np.int64)
        self.bases = np.asarray(self.bases, dtype=float)
        if self.weights.size == 0:
            raise InvalidInputError("a cloud needs at least one sample")
        if self.bases.shape != (self.weights.size, self.n, self.n) or self.states.shape != self.weights.shape:
            raise InvalidInputError("cloud weights, states and bases disagree in shape")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > PROBABILITY_TOL:
            raise InvalidInputError("cloud weights must be positive and sum to 1")

    def __len__(self) -> int:
        return int(self.weights.size)

    def flag(self, i: int) -> FullFlag:
        return FullFlag(self.bases[i])

    def at_state(self, state: int) -> "MeasureCloud":
        """The cloud conditioned on one base state (weights renormalized)"""
        mask = self.states == state
        if not np.any(mask):
            raise InvalidInputError(f"cloud has no samples over state {state}")
        w = self.weights[mask]
        return MeasureCloud(self.n, w / w.sum(), self.states[mask], self.bases[mask], self.state_labels,
                            self.stationary, dict(self.diagnostic))

    @classmethod
    def point_mass(cls, flag, state: int = 0, state_labels: Tuple[str, ...] = ("x0",)) -> "MeasureCloud":
        basis = np.asarray(getattr(flag, "basis", flag), dtype=float)
        return cls(basis.shape[0], np.ones(1), np.array([state]), basis[None], state_labels)


def _act(mats: np.ndarray, bases: np.ndarray) -> np.ndarray:
    """Flags g . z for stacks, as orthonormal bases with positive R diagonal"""
    q, r = np.linalg.qr(np.matmul(mats, bases))
    signs = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    signs[signs == 0] = 1.0
    return q * signs[:, None, :]


def _battery(bases: np.ndarray, states: np.ndarray, n_states: int) -> np.ndarray:
    """
    Smooth test functions on X x flags: products v_i v_j of the level-1 line
    and w_i w_j of the normal to the hyperplane level, times a state indicator.
    Both are even in the vector, so they are functions of the flag.
    """
    n = bases.shape[-1]
    iu = np.triu_indices(n)
    line = bases[:, :, 0]
    normal = bases[:, :, -1]
    funcs = [(line[:, :, None] * line[:, None, :])[:, iu[0], iu[1]]]
    if n > 2:
        funcs.append((normal[:, :, None] * normal[:, None, :])[:, iu[0], iu[1]])
    values = np.concatenate(funcs, axis=1)
    if n_states == 1:
        return values
    indicator = (states[:, None] == np.arange(n_states)[None, :]).astype(float)
    return (values[:, None, :] * indicator[:, :, None]).reshape(values.shape[0], -1)


def _pushed_battery(system: CocycleSystem, bases: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Integral of the battery against mu * delta_(x, z), exact over the atoms"""
    total = 0.0
    for a, atom in enumerate(system.atoms):
        moved = _act(system.matrices[a, states], bases)
        total = total + atom.probability * _battery(moved, system.base_maps[a, states], system.n_states)
    return total


def stationarity_diagnostic(system: CocycleSystem, cloud: MeasureCloud, chains: Optional[np.ndarray] = None) -> dict:
    """
    Compare the test battery against mu * cloud and cloud; the z-score of
    each difference uses batch means over chains.
    """
    diff = _pushed_battery(system, cloud.bases, cloud.states) - _battery(cloud.bases, cloud.states, system.n_states)
    if chains is None:
        chains = np.arange(len(cloud))
    labels, inverse = np.unique(chains, return_inverse=True)
    if labels.size > 1:
        means = np.stack([diff[inverse == i].mean(axis=0) for i in range(labels.size)])
        se = means.std(axis=0, ddof=1) / np.sqrt(labels.size)
    else:
        se = np.zeros(diff.shape[1])
    gap = np.abs(cloud.weights @ diff)
    z = gap / np.maximum(se, SE_FLOOR)
    return {
        "functions": int(diff.shape[1]),
        "max_gap": float(gap.max()),
        "max_z": float(z.max()),
        "passed": bool(np.all(z <= STATIONARITY_Z)),
    }


def _initial_bases(system: CocycleSystem, init: str, n_chains: int, rng: np.random.Generator) -> np.ndarray:
    n = system.n
    if init == "standard":
        return np.broadcast_to(np.eye(n), (n_chains, n, n)).copy()
    if init == "point":
        return np.broadcast_to(random_orthogonal(rng, n), (n_chains, n, n)).copy()
    return np.stack([random_orthogonal(rng, n) for _ in range(n_chains)])


def simulate_stationary(system: CocycleSystem, burn_in: int, n_samples: int, seed: int,
                        n_chains: Optional[int] = None, thin: int = 1, init: str = "dispersed",
                        start: int = 0) -> MeasureCloud:
    """
    Sample the stationary measure of the skew-product action on X x flags.

    Args:
        system: the cocycle system
        burn_in: steps discarded per chain
        n_samples: cloud size
        seed: run seed
        n_chains: chains run in lockstep, defaults to n_samples (one sample each)
        thin: steps between recorded samples of one chain
        init: "dispersed" (Haar-random flag per chain), "standard" or "point"
            (one random flag shared by all chains)
        start: selects the initialization stream, for reruns from other starts

    Returns:
        MeasureCloud with uniform weights; stationary is False and a warning
        is logged when the convolution diagnostic fails
    """
    if burn_in < 1 or n_samples < 1:
        raise InvalidInputError("burn_in and n_samples must be >= 1")
    if init not in INITIALIZATIONS:
        raise InvalidInputError(f"unknown initialization {init!r}; expected one of {INITIALIZATIONS}")
    n_chains = n_samples if n_chains is None else min(n_chains, n_samples)
    per_chain = -(-n_samples // n_chains)
    init_rng = trial_rng(seed, start, INITIAL_STREAM)
    states = system.sample_states(init_rng, n_chains)
    bases = _initial_bases(system, init, n_chains, init_rng)
    rng = trial_rng(seed, start, CHAIN_STREAM)

    def step(states, bases):
        atoms = system.sample_atoms(rng, n_chains)
        return system.base_maps[atoms, states], _act(system.matrices[atoms, states], bases)

    for _ in range(burn_in):
        states, bases = step(states, bases)
    kept_states, kept_bases, chain_ids = [], [], []
    for i in range(per_chain):
        if i > 0:
            for _ in range(thin):
                states, bases = step(states, bases)
        kept_states.append(states.copy())
        kept_bases.append(bases.copy())
        chain_ids.append(np.arange(n_chains))
    states = np.concatenate(kept_states)[:n_samples]
    bases = np.concatenate(kept_bases)[:n_samples]
    chains = np.concatenate(chain_ids)[:n_samples]
    cloud = MeasureCloud(system.n, np.full(n_samples, 1.0 / n_samples), states, bases, tuple(system.states))
    cloud.diagnostic = stationarity_diagnostic(system, cloud, chains)
    cloud.stationary = cloud.diagnostic["passed"]
    if not cloud.stationary:
        logger.warning(f"cloud is NOT-STATIONARY: max z {cloud.diagnostic['max_z']:.2f} over {cloud.diagnostic['functions']} test functions")
    logger.info(f"sampled {n_samples} flags after {burn_in} burn-in steps ({n_chains} chains)")
    return cloud


def stationarity_spread(system: CocycleSystem, burn_in: int, n_samples: int, seed: int,
                        n_starts: int = 3) -> dict:
    """
    Rerun the chains from different point initializations and compare the
    test battery across runs. Disagreement beyond the combined standard
    error suggests more than one ergodic component.
    """
    if n_starts < 2:
        raise InvalidInputError("stationarity spread needs at least two starts")
    integrals, errors = [], []
    for start in range(n_starts):
        init = "dispersed" if start == 0 else "point"
        cloud = simulate_stationary(system, burn_in, n_samples, seed, init=init, start=start)
        values = _battery(cloud.bases, cloud.states, system.n_states)
        integrals.append(values.mean(axis=0))
        errors.append(values.std(axis=0, ddof=1) / np.sqrt(len(cloud)) if len(cloud) > 1 else np.zeros(values.shape[1]))
    worst = 0.0
    for i in range(n_starts):
        for j in range(i + 1, n_starts):
            se = np.maximum(np.sqrt(errors[i] ** 2 + errors[j] ** 2), SE_FLOOR)
            worst = max(worst, float(np.max(np.abs(integrals[i] - integrals[j]) / se)))
    return {
        "starts": n_starts,
        "integrals": [x.tolist() for x in integrals],
        "max_z": worst,
        "consistent": worst <= STATIONARITY_Z,
    }


def _levels(n: int, levels: Optional[Iterable[int]]) -> Tuple[int, ...]:
    return tuple(range(1, n)) if levels is None else tuple(levels)


def largest_ball_mass(cloud: MeasureCloud, radius: float, levels: Optional[Iterable[int]] = None,
                      candidates: int = BALL_CENTER_CANDIDATES) -> Tuple[float, int]:
    """
    Heaviest flag_distance ball of the given radius centred at a cloud sample.

    Returns:
        (mass, index of the centre sample)
    """
    levels = _levels(cloud.n, levels)
    count = min(candidates, len(cloud))
    centres = np.unique(np.linspace(0, len(cloud) - 1, count).astype(int))
    best, best_index = 0.0, int(centres[0])
    for c in centres:
        mass = float(cloud.weights[flag_distance_batch(cloud.bases[c], cloud.bases, levels) <= radius].sum())
        if mass > best:
            best, best_index = mass, int(c)
    return min(best, 1.0), best_index


def pullback_limit(system: CocycleSystem, cloud: MeasureCloud, word: Word, x0, horizons: Sequence[int],
                   eps: float = 0.05, levels: Optional[Iterable[int]] = None,
                   reference: Optional[FlagEstimate] = None) -> dict:
    """
    Pull the cloud over x_n back by A^n(u, x0)^{-1} and report its
    concentration on the partial flag variety given by `levels`.

    Returns:
        dict with horizons, masses (largest eps-ball mass), centers (bases),
        center_steps (flag_distance between consecutive centers) and, when a
        forward flag estimate is supplied, reference_distances
    """
    horizons = [int(h) for h in horizons]
    if any(b <= a for a, b in zip(horizons, horizons[1:])) or (horizons and horizons[0] < 0):
        raise InvalidInputError(f"horizons must be non-negative and increasing, got {horizons}")
    atoms = word.forward_atoms
    if horizons and horizons[-1] > len(atoms):
        raise InvalidInputError(f"horizon {horizons[-1]} exceeds word length {len(atoms)}")
    levels = _levels(cloud.n, levels if levels is not None else (reference.levels if reference else None))
    path = state_path(system, atoms[:horizons[-1]] if horizons else atoms[:0], x0)
    masses, centers, steps, ref = [], [], [], []
    for h in horizons:
        local = cloud.at_state(int(path[h]))
        bases = local.bases
        for t in range(h, 0, -1):
            a, x = atoms[t - 1], path[t - 1]
            bases = _act(np.broadcast_to(system.inverses[a, x], bases.shape), bases)
        pulled = MeasureCloud(cloud.n, local.weights, np.full(len(local), int(path[0])), bases, cloud.state_labels)
        mass, index = largest_ball_mass(pulled, eps, levels)
        center = bases[index]
        if centers:
            steps.append(flag_distance(centers[-1], center, levels))
        if reference is not None:
            ref.append(flag_distance(reference.flag, center, levels))
        masses.append(mass)
        centers.append(center)
        logger.debug(f"pullback n={h}: mass {mass:.3f}")
    result = {"horizons": horizons, "masses": masses, "centers": centers, "center_steps": steps,
              "levels": list(levels)}
    if reference is not None:
        result["reference_distances"] = ref
    return result


def contraction_profile(system: CocycleSystem, word: Word, x0, cloud: MeasureCloud, horizons: Sequence[int],
                        eps: float = 0.05, levels: Optional[Iterable[int]] = None) -> dict:
    """Push the cloud over x0 forward by A^n and track its largest eps-ball mass"""
    horizons = [int(h) for h in horizons]
    atoms = word.forward_atoms
    if horizons and horizons[-1] > len(atoms):
        raise InvalidInputError(f"horizon {horizons[-1]} exceeds word length {len(atoms)}")
    x = cloud.state_labels.index(x0) if isinstance(x0, str) else int(x0)
    local = cloud.at_state(x)
    bases = local.bases
    wanted = set(horizons)
    masses = []
    if 0 in wanted:
        masses.append(largest_ball_mass(local, eps, levels)[0])
    for t in range(horizons[-1] if horizons else 0):
        a = atoms[t]
        bases = _act(np.broadcast_to(system.matrices[a, x], bases.shape), bases)
        x = int(system.base_maps[a, x])
        if t + 1 in wanted:
            pushed = MeasureCloud(cloud.n, local.weights, np.full(len(local), x), bases, cloud.state_labels)
            masses.append(largest_ball_mass(pushed, eps, levels)[0])
    return {"horizons": horizons, "masses": masses, "eps": eps}


class RegularityReport(BaseModel):
    eps: List[float] = Field(description="Neighbourhood radii, increasing")
    masses: List[float] = Field(description="Worst mass of the eps-neighbourhood of gJ over sampled g")
    n_g: int = Field(description="Group elements sampled (random plus adversarial)")
    atom: str = Field(description="ATOM, NO-ATOM or INCONCLUSIVE")
    largest_ball_mass: float = Field(description="Heaviest ball at the smallest radius")


class AtomVerdict(BaseModel):
    verdict: str = Field(description="ATOM, NO-ATOM or INCONCLUSIVE")
    radii: List[float] = Field(description="Ball radii, increasing")
    masses: List[float] = Field(description="Largest ball mass per radius")


def atom_test(cloud: MeasureCloud, radii: Sequence[float], threshold: float = ATOM_THRESHOLD,
              levels: Optional[Iterable[int]] = None) -> AtomVerdict:
    """
    ATOM when the heaviest ball keeps mass >= threshold at the smallest
    radius and that mass fails to decrease across ATOM_DECADES decades of
    radius (it stays above ATOM_PLATEAU times the mass at the top of the
    window). With fewer samples than 1 / (smallest radius) the scan cannot
    resolve that radius and the verdict is INCONCLUSIVE.

    Raises:
        InvalidInputError: for non-positive radii or a grid narrower than ATOM_DECADES decades
        NotStationaryError: when the cloud failed its stationarity diagnostic
    """
    if not cloud.stationary:
        raise NotStationaryError(f"atom test on a cloud that failed the stationarity diagnostic: {cloud.diagnostic}")
    radii = sorted(float(r) for r in radii)
    if not radii or radii[0] <= 0:
        raise InvalidInputError("atom test needs positive radii")
    top = radii[0] * 10.0 ** ATOM_DECADES
    if radii[-1] < top * (1.0 - 1e-9):
        raise InvalidInputError(f"atom test radii must span {ATOM_DECADES} decades, got {radii[0]:g} to {radii[-1]:g}")
    masses = [largest_ball_mass(cloud, r, levels)[0] for r in radii]
    window = next(i for i, r in enumerate(radii) if r >= top * (1.0 - 1e-9))
    if len(cloud) < 1.0 / radii[0]:
        verdict = "INCONCLUSIVE"
    elif masses[0] >= threshold and masses[0] >= ATOM_PLATEAU * masses[window]:
        verdict = "ATOM"
    else:
        verdict = "NO-ATOM"
    return AtomVerdict(verdict=verdict, radii=radii, masses=masses)


def _adversarial(cloud: MeasureCloud, count: int, radius: float) -> List[np.ndarray]:
    """Rotations taking the standard flag to the heaviest cloud modes, so gJ passes through them"""
    levels = _levels(cloud.n, None)
    n_centres = min(BALL_CENTER_CANDIDATES, len(cloud))
    centres = np.unique(np.linspace(0, len(cloud) - 1, n_centres).astype(int))
    weights = [float(cloud.weights[flag_distance_batch(cloud.bases[c], cloud.bases, levels) <= radius].sum())
               for c in centres]
    order = np.argsort(weights, kind="stable")[::-1][:count]
    out = []
    for i in order:
        g = cloud.bases[centres[i]].copy()
        if np.linalg.det(g) < 0:
            g[:, -1] = -g[:, -1]
        out.append(g)
    return out


def regularity_scan(cloud: MeasureCloud, eps_grid: Sequence[float], n_g: int, seed: int,
                    scale: float = 1.0, n_adversarial: int = 8) -> RegularityReport:
    """
    Worst mass of {z : dist_to_complement(z, g) < eps} over random g and over
    g aimed at cloud modes.

    Raises:
        NotStationaryError: when the cloud failed its stationarity diagnostic
    """
    if not cloud.stationary:
        raise NotStationaryError(f"regularity scan on a cloud that failed the stationarity diagnostic: {cloud.diagnostic}")
    eps = sorted(float(e) for e in eps_grid)
    if not eps:
        raise InvalidInputError("empty eps grid")
    rng = trial_rng(seed, 0, SCAN_STREAM)
    elements = [random_element(rng, cloud.n, scale) for _ in range(n_g)]
    elements += _adversarial(cloud, n_adversarial, eps[len(eps) // 2])
    worst = np.zeros(len(eps))
    for g in elements:
        dist = dist_to_complement_batch(cloud.bases, g)
        for i, e in enumerate(eps):
            worst[i] = max(worst[i], float(cloud.weights[dist < e].sum()))
    atom = atom_test(cloud, eps)
    return RegularityReport(eps=eps, masses=np.minimum(worst, 1.0).tolist(), n_g=len(elements),
                            atom=atom.verdict, largest_ball_mass=atom.masses[0])


def _atom_averaged_sigma(system: CocycleSystem, states: np.ndarray, bases: np.ndarray) -> np.ndarray:
    """sum_g mu(g) sigma_hat(A(g, x), z) per sample, exact over the atoms"""
    total = 0.0
    for a, atom in enumerate(system.atoms):
        total = total + atom.probability * sigma_hat_batch(system.matrices[a, states], bases)
    return total


def furstenberg_check(system: CocycleSystem, cloud: MeasureCloud, report: LyapunovReport, n_mc: int, seed: int,
                      batch: int = 100_000) -> dict:
    """
    Integral of sigma_hat_alpha(A(g, x), z) over mu x cloud for every root,
    against the time-average root rates of the report.

    The mu part is summed exactly; the cloud part uses every sample when
    n_mc covers the cloud and n_mc weighted draws otherwise. The standard
    error is taken over cloud samples, since the cloud is the only source
    of sampling noise left.

    Raises:
        NotStationaryError: when the cloud failed its stationarity diagnostic
    """
    if not cloud.stationary:
        raise NotStationaryError(f"cloud failed the stationarity diagnostic: {cloud.diagnostic}")
    if report.n != system.n:
        raise InvalidInputError("report and system dimensions differ")
    if n_mc < 2:
        raise InvalidInputError("n_mc must be >= 2")
    if n_mc >= len(cloud):
        picks = np.arange(len(cloud))
        weights = cloud.weights
    else:
        rng = trial_rng(seed, 0, MONTE_CARLO_STREAM)
        picks = rng.choice(len(cloud), size=n_mc, p=cloud.weights)
        weights = np.full(n_mc, 1.0 / n_mc)
    values = np.concatenate([
        _atom_averaged_sigma(system, cloud.states[picks[i:i + batch]], cloud.bases[picks[i:i + batch]])
        for i in range(0, picks.size, batch)
    ])
    mean = weights @ values
    effective = 1.0 / float(np.sum(weights ** 2))
    spread = weights @ (values - mean) ** 2
    # a point mass carries no cloud noise
    se = np.sqrt(spread / (effective - 1.0)) if effective > 1.0 + 1e-12 else np.zeros_like(mean)
    lam_se = np.asarray(report.standard_errors)
    roots = []
    for k in range(system.n - 1):
        rate = report.root_rates[k]
        rate_se = float(np.hypot(lam_se[k], lam_se[k + 1]))
        combined = max(float(np.hypot(se[k], rate_se)), SE_FLOOR)
        roots.append({
            "root": k + 1,
            "integral": float(mean[k]),
            "integral_se": float(se[k]),
            "time_average": float(rate),
            "time_average_se": rate_se,
            "z": float(abs(mean[k] - rate) / combined),
        })
    max_z = max(r["z"] for r in roots)
    logger.info(f"furstenberg check over {picks.size} cloud samples: max z {max_z:.2f}")
    return {"roots": roots, "max_z": max_z, "n_mc": int(picks.size), "consistent": max_z <= STATIONARITY_Z}
