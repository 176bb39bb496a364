"""
Cocycle systems and log-scale accumulation of forward, backward and
two-sided products A^n(u, x).
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from .configs import (
    GROUP_DET_TOL,
    ORTHO_TOL,
    PROBABILITY_TOL,
    RENORMALIZE_EVERY,
    STATIONARY_BASE_TOL,
    SYMMETRY_TOL,
)
from .errors import InvalidInputError
from .liegroup import log_singular_values

# RNG streams split off one (seed, trial) pair
WORD_STREAM = 0
CHAIN_STREAM = 1
SCAN_STREAM = 2
MONTE_CARLO_STREAM = 3
INITIAL_STREAM = 4

# exp() argument bound for the strictly upper triangular rescaling
MAX_LOG_RATIO = 700.0

ORIENTATIONS = ("forward", "backward", "two-sided")


def trial_rng(seed: int, trial: int, stream: int = WORD_STREAM) -> np.random.Generator:
    """Counter-based generator keyed by (seed, trial, stream); independent of call order"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(trial), int(stream)])))


@dataclass(frozen=True)
class Atom:
    """One point g of supp(mu): probability, base permutation and per-state matrices"""
    probability: float
    base_map: Tuple[int, ...]
    matrices: Tuple[np.ndarray, ...]
    label: str = ""


class CocycleSystem:
    """
    Finitely supported measure mu acting on a finite base X through
    permutations, with a matrix A(g, x) in SL(n, R) per atom and state.

    The constructor validates every invariant and normalizes each matrix to
    determinant exactly one. Instances are treated as immutable.
    """

    def __init__(self, n: int, states: Sequence[str], atoms: Sequence[Atom],
                 base_distribution: Optional[Sequence[float]] = None,
                 allow_asymmetric: bool = False, name: str = "system"):
        if n < 2:
            raise InvalidInputError(f"dimension must be >= 2, got {n}")
        if len(states) < 1:
            raise InvalidInputError("at least one base state is required")
        if len(atoms) < 1:
            raise InvalidInputError("at least one atom is required")
        self.n = int(n)
        self.name = name
        self.states = tuple(str(s) for s in states)
        self.atoms = tuple(atoms)
        self.allow_asymmetric = allow_asymmetric
        n_states = len(self.states)

        probs = np.array([a.probability for a in self.atoms], dtype=float)
        if np.any(~np.isfinite(probs)) or np.any(probs <= 0):
            raise InvalidInputError("atom probabilities must be positive")
        if abs(probs.sum() - 1.0) > PROBABILITY_TOL:
            raise InvalidInputError(f"probability-sum invariant violated: probabilities sum to {probs.sum()!r}")
        self.probabilities = probs

        maps = np.array([a.base_map for a in self.atoms], dtype=np.int64).reshape(len(self.atoms), -1)
        if maps.shape[1] != n_states:
            raise InvalidInputError(f"base maps must have one entry per state ({n_states})")
        for i, row in enumerate(maps):
            if sorted(row.tolist()) != list(range(n_states)):
                raise InvalidInputError(f"base map of atom {i} is not a permutation of the states")
        self.base_maps = maps
        self.inverse_maps = np.argsort(maps, axis=1)

        mats = np.zeros((len(self.atoms), n_states, self.n, self.n))
        for i, atom in enumerate(self.atoms):
            if len(atom.matrices) != n_states:
                raise InvalidInputError(f"atom {i} needs one matrix per state")
            for x, m in enumerate(atom.matrices):
                mats[i, x] = self._checked_matrix(m, i, x)
        self.matrices = mats
        self.inverses = np.linalg.inv(mats)

        self.symmetric_partner = self._find_partners()
        if not allow_asymmetric and any(p < 0 for p in self.symmetric_partner):
            missing = [i for i, p in enumerate(self.symmetric_partner) if p < 0]
            raise InvalidInputError(f"symmetry invariant violated: atoms {missing} have no inverse partner")

        if base_distribution is None:
            base = np.full(n_states, 1.0 / n_states)
        else:
            base = np.asarray(base_distribution, dtype=float)
            if base.shape != (n_states,) or np.any(base < 0) or abs(base.sum() - 1.0) > PROBABILITY_TOL:
                raise InvalidInputError("base distribution must be a probability vector over the states")
        drift = np.max(np.abs(self.base_transition().T @ base - base))
        if drift > STATIONARY_BASE_TOL:
            raise InvalidInputError(f"base distribution is not stationary (drift {drift:.3e})")
        self.base_distribution = base
        logger.debug(f"CocycleSystem {name}: n={self.n}, {len(self.atoms)} atoms, {n_states} states")

    def _checked_matrix(self, m, atom: int, state: int) -> np.ndarray:
        m = np.array(m, dtype=float)
        if m.shape != (self.n, self.n) or not np.all(np.isfinite(m)):
            raise InvalidInputError(f"matrix of atom {atom} at state {state} is not a finite {self.n}x{self.n} array")
        det = np.linalg.det(m)
        if abs(det - 1.0) > GROUP_DET_TOL:
            raise InvalidInputError(f"matrix of atom {atom} at state {state} has determinant {det!r}")
        return m / det ** (1.0 / self.n)

    def _find_partners(self) -> List[int]:
        partners = []
        n_states = len(self.states)
        for i in range(len(self.atoms)):
            found = -1
            for j in range(len(self.atoms)):
                if abs(self.probabilities[i] - self.probabilities[j]) > SYMMETRY_TOL:
                    continue
                if not np.array_equal(self.base_maps[j], self.inverse_maps[i]):
                    continue
                # A(j, g_i x) A(i, x) = Id along the inverted base map
                ok = all(
                    np.max(np.abs(self.matrices[j, self.base_maps[i, x]] @ self.matrices[i, x] - np.eye(self.n)))
                    <= SYMMETRY_TOL * max(1.0, np.linalg.norm(self.matrices[i, x]) ** 2)
                    for x in range(n_states)
                )
                if ok:
                    found = j
                    break
            partners.append(found)
        return partners

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_states(self) -> int:
        return len(self.states)

    def state_index(self, state) -> int:
        if isinstance(state, (int, np.integer)):
            if not 0 <= state < self.n_states:
                raise InvalidInputError(f"state index {state} out of range")
            return int(state)
        try:
            return self.states.index(str(state))
        except ValueError:
            raise InvalidInputError(f"unknown state {state!r}")

    def base_transition(self) -> np.ndarray:
        """Induced Markov matrix on X: P[x, y] = mu{g : g x = y}"""
        P = np.zeros((self.n_states, self.n_states))
        for i, p in enumerate(self.probabilities):
            P[np.arange(self.n_states), self.base_maps[i]] += p
        return P

    def matrix(self, atom: int, state: int) -> np.ndarray:
        return self.matrices[atom, state]

    def sample_atoms(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(self.n_atoms, size=size, p=self.probabilities)

    def sample_states(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(self.n_states, size=size, p=self.base_distribution)


@dataclass(frozen=True)
class Word:
    """
    Atom indices of a sampled path.

    Forward words list u_1, u_2, ... in application order; backward words list
    v_0, v_1, ... in the order the backward walk applies them; two-sided words
    are chronological with atoms[:origin] the past and atoms[origin:] the future.
    """
    atoms: np.ndarray
    orientation: str = "forward"
    origin: int = 0

    def __post_init__(self):
        if self.orientation not in ORIENTATIONS:
            raise InvalidInputError(f"unknown orientation {self.orientation!r}")
        atoms = np.asarray(self.atoms, dtype=np.int64).reshape(-1)
        if not 0 <= self.origin <= atoms.size:
            raise InvalidInputError(f"origin {self.origin} outside word of length {atoms.size}")
        object.__setattr__(self, "atoms", atoms)

    def __len__(self) -> int:
        return int(self.atoms.size)

    @property
    def forward_atoms(self) -> np.ndarray:
        if self.orientation == "backward":
            raise InvalidInputError("a backward word has no future")
        return self.atoms[self.origin:] if self.orientation == "two-sided" else self.atoms

    @property
    def backward_atoms(self) -> np.ndarray:
        if self.orientation == "forward":
            raise InvalidInputError("a forward word has no past")
        return self.atoms[:self.origin][::-1] if self.orientation == "two-sided" else self.atoms

    def shifted(self, t: int) -> "Word":
        """The two-sided word seen from time t (the shift applied t times)"""
        if self.orientation != "two-sided":
            raise InvalidInputError("only two-sided words can be shifted")
        return Word(self.atoms, "two-sided", self.origin + t)


def sample_word(system: CocycleSystem, seed: int, trial: int, length: int,
                orientation: str = "forward", past: Optional[int] = None) -> Word:
    """
    Draw a word from mu^N, deterministic in (seed, trial).

    Args:
        system: the cocycle system supplying the atom probabilities
        seed: run seed
        trial: trial index, selects an independent stream
        length: number of atoms (the future part for two-sided words)
        orientation: "forward", "backward" or "two-sided"
        past: length of the past part of a two-sided word, defaults to length
    """
    if length < 0:
        raise InvalidInputError(f"word length must be >= 0, got {length}")
    rng = trial_rng(seed, trial, WORD_STREAM)
    if orientation == "two-sided":
        past = length if past is None else past
        return Word(system.sample_atoms(rng, past + length), "two-sided", past)
    return Word(system.sample_atoms(rng, length), orientation)


def state_path(system: CocycleSystem, atoms: Sequence[int], x0, backward: bool = False) -> np.ndarray:
    """Base points visited: x_0, u_1 x_0, u_2 u_1 x_0, ... (inverse maps when backward)"""
    maps = system.inverse_maps if backward else system.base_maps
    x = system.state_index(x0)
    path = np.empty(len(atoms) + 1, dtype=np.int64)
    path[0] = x
    for t, a in enumerate(atoms):
        x = maps[a, x]
        path[t + 1] = x
    return path


class ProductAccumulator:
    """
    A^t . Q0 = Q . diag(exp(log_d)) . N with Q orthogonal, N unit upper
    triangular and log_d the accumulated Benettin diagonal logs.

    Q0 is an orthonormal seed basis (identity by default). Products are
    re-triangularized every `renormalize_every` steps; in between the steps
    are multiplied directly.
    """

    def __init__(self, n: int, basis: Optional[np.ndarray] = None,
                 renormalize_every: int = RENORMALIZE_EVERY, track_upper: bool = True):
        if renormalize_every < 1:
            raise InvalidInputError("renormalize_every must be >= 1")
        self.n = n
        if basis is None:
            basis = np.eye(n)
        basis = np.array(basis, dtype=float)
        if basis.shape != (n, n) or np.max(np.abs(basis.T @ basis - np.eye(n))) > ORTHO_TOL:
            raise InvalidInputError("seed basis must be an orthonormal n x n matrix")
        self.q0 = basis
        self.q = basis.copy()
        self.log_d = np.zeros(n)
        self.upper = np.eye(n)
        self.steps = 0
        self.renormalize_every = renormalize_every
        self.track_upper = track_upper
        self._pending: Optional[np.ndarray] = None
        self._pending_steps = 0

    def copy(self) -> "ProductAccumulator":
        self.flush()
        other = ProductAccumulator.__new__(ProductAccumulator)
        other.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()})
        return other

    def advance(self, g: np.ndarray) -> "ProductAccumulator":
        """Left-multiply the represented product by g"""
        self._pending = g if self._pending is None else g @ self._pending
        self._pending_steps += 1
        self.steps += 1
        if self._pending_steps >= self.renormalize_every:
            self.flush()
        return self

    def flush(self):
        if self._pending is None:
            return
        q, r = np.linalg.qr(self._pending @ self.q)
        diag = np.diag(r).copy()
        signs = np.sign(diag)
        signs[signs == 0] = 1.0
        q = q * signs
        r = r * signs[:, None]
        log_r = np.log(np.abs(diag))
        if self.track_upper:
            unit = r / np.abs(diag)[:, None]
            ratio = np.clip(self.log_d[None, :] - self.log_d[:, None], -MAX_LOG_RATIO, MAX_LOG_RATIO)
            scaled = np.triu(unit * np.exp(ratio), 1) + np.eye(self.n)
            self.upper = scaled @ self.upper
        self.q = q
        self.log_d = self.log_d + log_r
        self._pending = None
        self._pending_steps = 0

    def state(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        self.flush()
        return self.q, self.log_d, self.upper

    def matrix(self) -> np.ndarray:
        """The represented product; overflows for long words, meant for short ones"""
        q, log_d, upper = self.state()
        return (q * np.exp(log_d)) @ upper @ self.q0.T

    def a_log(self) -> np.ndarray:
        """Log singular values of the product, stable at any length"""
        if not self.track_upper:
            raise InvalidInputError("a_log needs an accumulator that tracks the triangular factor")
        _, log_d, upper = self.state()
        return log_singular_values(upper, row_log=log_d)


def advance(accumulator: ProductAccumulator, system: CocycleSystem, atom: int, state: int,
            inverse: bool = False) -> ProductAccumulator:
    """One step of the skew product: multiply by A(atom, state) (or its inverse)"""
    mats = system.inverses if inverse else system.matrices
    return accumulator.advance(mats[atom, state])


@dataclass
class Snapshot:
    horizon: int
    state: int
    accumulator: ProductAccumulator


@dataclass
class ProductPath:
    """Accumulator snapshots at requested horizons along one word"""
    orientation: str
    snapshots: List[Snapshot] = field(default_factory=list)

    def at(self, horizon: int) -> Snapshot:
        for snap in self.snapshots:
            if snap.horizon == horizon:
                return snap
        raise KeyError(horizon)


def _check_horizons(horizons: Sequence[int], available: int) -> List[int]:
    horizons = [int(h) for h in horizons]
    if any(h < 0 for h in horizons) or any(b <= a for a, b in zip(horizons, horizons[1:])):
        raise InvalidInputError(f"horizons must be non-negative and increasing, got {horizons}")
    if horizons and horizons[-1] > available:
        raise InvalidInputError(f"horizon {horizons[-1]} exceeds word length {available}")
    return horizons


def product_path(system: CocycleSystem, word: Word, start, horizons: Sequence[int],
                 orientation: str = "forward", basis: Optional[np.ndarray] = None,
                 renormalize_every: int = RENORMALIZE_EVERY, track_upper: bool = True) -> ProductPath:
    """
    Accumulate A^t (forward) or A^{-t} (backward) along the word and keep
    copies at each horizon.

    Backward step with atom v at the current point y: y <- v^{-1} y, then
    multiply by A(v, y)^{-1}.
    """
    atoms = word.backward_atoms if orientation == "backward" else word.forward_atoms
    horizons = _check_horizons(horizons, len(atoms))
    acc = ProductAccumulator(system.n, basis=basis, renormalize_every=renormalize_every, track_upper=track_upper)
    x = system.state_index(start)
    path = ProductPath(orientation)
    wanted = set(horizons)
    if 0 in wanted:
        path.snapshots.append(Snapshot(0, x, acc.copy()))
    last = horizons[-1] if horizons else 0
    for t in range(last):
        a = atoms[t]
        if orientation == "backward":
            x = system.inverse_maps[a, x]
            acc.advance(system.inverses[a, x])
        else:
            acc.advance(system.matrices[a, x])
            x = system.base_maps[a, x]
        if t + 1 in wanted:
            path.snapshots.append(Snapshot(t + 1, int(x), acc.copy()))
    return path


def forward_product(system: CocycleSystem, word: Word, x0, basis: Optional[np.ndarray] = None,
                    length: Optional[int] = None,
                    renormalize_every: int = RENORMALIZE_EVERY) -> ProductAccumulator:
    """Accumulator representing A^n(u, x0) for the forward part of the word"""
    n_steps = len(word.forward_atoms) if length is None else length
    path = product_path(system, word, x0, [n_steps], "forward", basis, renormalize_every)
    return path.snapshots[-1].accumulator


def backward_product(system: CocycleSystem, word: Word, y0, basis: Optional[np.ndarray] = None,
                     length: Optional[int] = None,
                     renormalize_every: int = RENORMALIZE_EVERY) -> ProductAccumulator:
    """Accumulator representing A^{-n}(v, y0) for the backward part of the word"""
    n_steps = len(word.backward_atoms) if length is None else length
    path = product_path(system, word, y0, [n_steps], "backward", basis, renormalize_every)
    return path.snapshots[-1].accumulator


def naive_product(system: CocycleSystem, atoms: Sequence[int], x0) -> np.ndarray:
    """Direct left-to-right multiplication in extended precision (short words only)"""
    x = system.state_index(x0)
    h = np.eye(system.n, dtype=np.longdouble)
    for a in atoms:
        h = system.matrices[a, x].astype(np.longdouble) @ h
        x = system.base_maps[a, x]
    return h.astype(float)


def diagonal_log_path(system: CocycleSystem, atoms: Sequence[int], x0,
                      renormalize_every: int = RENORMALIZE_EVERY, inverse: bool = False,
                      checkpoints: int = 0) -> Dict[str, np.ndarray]:
    """
    Benettin diagonal logs only (no triangular factor), the cheap path used
    for exponent estimation.

    Args:
        checkpoints: when > 0, the diagonal logs are also returned at that many
            equally spaced segment ends (used for batch-means errors)
    """
    acc = ProductAccumulator(system.n, renormalize_every=renormalize_every, track_upper=False)
    x = system.state_index(x0)
    n_steps = len(atoms)
    marks = set()
    if checkpoints > 0 and n_steps >= checkpoints:
        marks = {n_steps * (i + 1) // checkpoints for i in range(checkpoints)}
    recorded = []
    for t, a in enumerate(atoms):
        if inverse:
            x = system.inverse_maps[a, x]
            acc.advance(system.inverses[a, x])
        else:
            acc.advance(system.matrices[a, x])
            x = system.base_maps[a, x]
        if t + 1 in marks:
            acc.flush()
            recorded.append(acc.log_d.copy())
    acc.flush()
    return {"log_d": acc.log_d.copy(), "checkpoints": np.array(recorded)}
