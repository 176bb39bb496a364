"""
Flag-variety geometry and the boundary functionals xi and sigma_hat

A full flag is stored as one orthonormal basis; level i is the span of its
first i columns. xi_k(g, z) is the log growth of the k-volume of the level-k
frame of z under g, sigma_hat_k combines neighbouring xi's through the
Cartan pairing and matches the Iwasawa A-part of g applied to the flag.
"""

from dataclasses import dataclass
from itertools import combinations
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg as la
from loguru import logger
from scipy.special import logsumexp

from .configs import DEFICIT_SLACK, DEGENERATE_VOLUME, ORTHO_TOL
from .errors import DegenerateSampleError, InvalidInputError
from .liegroup import (
    GroupElement,
    ParabolicSpec,
    as_matrix,
    cartan_pairing,
    kak,
    log_wedge_volume,
    longest_weyl,
    random_orthogonal,
)


def _check_orthonormal(basis: np.ndarray, what: str):
    gram = basis.T @ basis
    err = np.max(np.abs(gram - np.eye(basis.shape[1])))
    if not np.isfinite(err) or err > ORTHO_TOL:
        raise InvalidInputError(f"{what} is not orthonormal (error {err:.3e})")


def orthonormal_columns(m: np.ndarray) -> np.ndarray:
    """Gram-Schmidt via QR with positive R diagonal; column spans are nested-preserved"""
    q, r = np.linalg.qr(m)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


@dataclass(frozen=True)
class Frame:
    """k orthonormal vectors in R^n, stored as the columns of an n x k array"""
    vectors: np.ndarray

    def __post_init__(self):
        v = np.array(self.vectors, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        _check_orthonormal(v, "frame")
        object.__setattr__(self, "vectors", v)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def spanning(cls, m: np.ndarray) -> "Frame":
        return cls(orthonormal_columns(np.asarray(m, dtype=float)))


def as_frame(frame) -> Frame:
    return frame if isinstance(frame, Frame) else Frame(frame)


@dataclass(frozen=True)
class FullFlag:
    """Point of H/B: one orthonormal basis, level i = span of the first i columns"""
    basis: np.ndarray

    def __post_init__(self):
        b = np.array(self.basis, dtype=float)
        if b.ndim != 2 or b.shape[0] != b.shape[1] or b.shape[0] < 2:
            raise InvalidInputError(f"flag basis must be square of size >= 2, got {b.shape}")
        _check_orthonormal(b, "flag basis")
        object.__setattr__(self, "basis", b)

    @property
    def n(self) -> int:
        return self.basis.shape[0]

    def level(self, k: int) -> np.ndarray:
        return self.basis[:, :k]

    @classmethod
    def std(cls, n: int) -> "FullFlag":
        return cls(np.eye(n))

    @classmethod
    def reversed(cls, n: int) -> "FullFlag":
        return cls(np.eye(n)[:, ::-1])

    @classmethod
    def random(cls, rng: np.random.Generator, n: int) -> "FullFlag":
        return cls(random_orthogonal(rng, n))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "FullFlag":
        """Flag whose level i is spanned by the first i columns of m"""
        return cls(orthonormal_columns(np.asarray(m, dtype=float)))

    def act(self, g: Union[GroupElement, np.ndarray]) -> "FullFlag":
        m = g.matrix if isinstance(g, GroupElement) else np.asarray(g, dtype=float)
        return FullFlag.from_matrix(m @ self.basis)


@dataclass(frozen=True)
class PartialFlagPoint:
    """Point of H/P_I: a full basis of which only the retained levels carry meaning"""
    spec: ParabolicSpec
    basis: np.ndarray

    def __post_init__(self):
        b = np.array(self.basis, dtype=float)
        if b.shape != (self.spec.n, self.spec.n):
            raise InvalidInputError(f"basis shape {b.shape} does not match n={self.spec.n}")
        _check_orthonormal(b, "partial flag basis")
        object.__setattr__(self, "basis", b)

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def levels(self) -> Tuple[int, ...]:
        return self.spec.retained_levels()

    def frames(self) -> Dict[int, np.ndarray]:
        return {k: self.basis[:, :k] for k in self.levels}

    @classmethod
    def from_full(cls, flag: FullFlag, spec: ParabolicSpec) -> "PartialFlagPoint":
        return cls(spec=spec, basis=flag.basis)


FlagLike = Union[FullFlag, PartialFlagPoint, np.ndarray]


def flag_basis(flag: FlagLike) -> np.ndarray:
    return np.asarray(getattr(flag, "basis", flag), dtype=float)


def _levels_of(flag: FlagLike, n: int) -> Tuple[int, ...]:
    if isinstance(flag, PartialFlagPoint):
        return flag.levels
    return tuple(range(1, n))


def principal_angles(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Principal angles between column spans, descending"""
    return la.subspace_angles(A, B)


def min_angle_sine(A: np.ndarray, B: np.ndarray) -> float:
    """Sine of the smallest principal angle; 0 when the spans intersect"""
    return float(np.sin(principal_angles(A, B)[-1]))


def intersection_dimension(A: np.ndarray, B: np.ndarray, angle_tol: float) -> int:
    return int(np.sum(principal_angles(A, B) < angle_tol))


def _check_level(n: int, k: int):
    if not 1 <= k <= n - 1:
        raise InvalidInputError(f"root index {k} outside 1..{n - 1}")


def xi(g: Union[GroupElement, np.ndarray], z: FullFlag, k: int) -> float:
    """
    xi_k(g, z) = log vol(g . frame_k(z)) - log vol(frame_k(z)).

    Args:
        g: element of SL(n, R)
        z: full flag
        k: root index, 1 <= k <= n-1

    Returns:
        the log growth of the k-th fundamental representation on z, in nats
    """
    m = as_matrix(g)
    basis = flag_basis(z)
    _check_level(m.shape[0], k)
    frame = basis[:, :k]
    before = log_wedge_volume(frame)
    after = log_wedge_volume(m @ frame)
    if not np.isfinite(after) or before < np.log(DEGENERATE_VOLUME):
        raise DegenerateSampleError(f"level-{k} frame of z is degenerate (log volume {before})")
    return after - before


def iwasawa_log_diagonal(g: Union[GroupElement, np.ndarray], z: FlagLike) -> np.ndarray:
    """log |diag R| for QR(g . basis(z)): the Iwasawa A-part of g at z"""
    m = as_matrix(g)
    r = np.linalg.qr(m @ flag_basis(z), mode="r")
    return np.log(np.abs(np.diag(r)))


def sigma_hat(g: Union[GroupElement, np.ndarray], z: FullFlag, k: int) -> float:
    """sigma_hat_k(g, z) = sum_gamma <alpha_k, gamma> xi_gamma(g, z)"""
    m = as_matrix(g)
    n = m.shape[0]
    _check_level(n, k)
    pairing = cartan_pairing(n)[k - 1]
    return float(sum(pairing[j - 1] * xi(m, z, j) for j in range(1, n) if pairing[j - 1] != 0))


def sigma_hat_iwasawa(g: Union[GroupElement, np.ndarray], z: FullFlag, k: int) -> float:
    d = iwasawa_log_diagonal(g, z)
    _check_level(d.size, k)
    return float(d[k - 1] - d[k])


def sigma_hat_batch(mats: np.ndarray, bases: np.ndarray) -> np.ndarray:
    """
    Iwasawa route over stacks.

    Args:
        mats: (N, n, n) group elements
        bases: (N, n, n) or (n, n) flag bases

    Returns:
        (N, n-1) array of sigma_hat_k values
    """
    r = np.linalg.qr(np.matmul(mats, bases), mode="r")
    d = np.log(np.abs(np.diagonal(r, axis1=-2, axis2=-1)))
    return d[..., :-1] - d[..., 1:]


def dist_to_complement(z: FlagLike, g: Optional[Union[GroupElement, np.ndarray]] = None,
                       levels: Optional[Iterable[int]] = None) -> float:
    """
    Proxy distance from z to the translated Schubert complement gJ.

    With B the orthonormalized basis of g^-1 z, level k of g^-1 z is
    transverse to span(e_1..e_{n-k}) exactly when the bottom k x k block of
    B is invertible. The proxy is the smallest singular value of these blocks,
    minimized over levels; it is 1 for the coordinate-reversed flag and 0 on J.
    """
    basis = flag_basis(z)
    n = basis.shape[0]
    if levels is None:
        levels = _levels_of(z, n)
    return float(dist_to_complement_batch(basis[None], g, levels)[0])


def dist_to_complement_batch(bases: np.ndarray, g: Optional[Union[GroupElement, np.ndarray]] = None,
                             levels: Optional[Iterable[int]] = None) -> np.ndarray:
    bases = np.asarray(bases, dtype=float)
    n = bases.shape[-1]
    if g is not None:
        m = g.matrix if isinstance(g, GroupElement) else np.asarray(g, dtype=float)
        bases = np.linalg.solve(m, bases)
    q, r = np.linalg.qr(bases)
    levels = tuple(range(1, n)) if levels is None else tuple(levels)
    dist = np.full(bases.shape[0], np.inf)
    for k in levels:
        block = q[:, n - k:, :k]
        dist = np.minimum(dist, np.linalg.svd(block, compute_uv=False)[:, -1])
    return dist


def flag_distance(F: FlagLike, F_prime: FlagLike, levels: Optional[Iterable[int]] = None) -> float:
    """Largest principal angle over flag levels (retained levels for partial flags)"""
    A = flag_basis(F)
    B = flag_basis(F_prime)
    if A.shape != B.shape:
        raise InvalidInputError(f"flag dimensions differ: {A.shape} vs {B.shape}")
    n = A.shape[0]
    if levels is None:
        levels = sorted(set(_levels_of(F, n)) & set(_levels_of(F_prime, n)))
    worst = 0.0
    for k in levels:
        worst = max(worst, float(principal_angles(A[:, :k], B[:, :k])[0]))
    return worst


def flag_distance_batch(center: np.ndarray, bases: np.ndarray, levels: Iterable[int]) -> np.ndarray:
    """flag_distance from one basis to a stack, via sin(theta_max) = ||(I - CC^T) B_k||_2"""
    center = np.asarray(center, dtype=float)
    bases = np.asarray(bases, dtype=float)
    n = center.shape[0]
    worst = np.zeros(bases.shape[0])
    for k in levels:
        c = center[:, :k]
        residual = bases[:, :, :k] - c @ np.matmul(c.T, bases[:, :, :k])
        sines = np.linalg.norm(residual, ord=2, axis=(1, 2))
        worst = np.maximum(worst, np.arcsin(np.clip(sines, 0.0, 1.0)))
    return worst


def xi_from_cartan(a_log: np.ndarray, k2: np.ndarray, z: FlagLike, k: int) -> float:
    """
    xi_k(k1 exp(a_log) k2, z) without forming the product (k1 drops out).

    Uses the highest weight formula: ||wedge^k(a X)||^2 is the sum over
    k-subsets I of e^{2 a_I} det(X_I)^2 with X = k2 . frame_k(z), which
    stays exact however large a_log is.
    """
    basis = flag_basis(z)
    n = basis.shape[0]
    _check_level(n, k)
    X = k2 @ basis[:, :k]
    idx = np.array(list(combinations(range(n), k)))
    sign, logdet = np.linalg.slogdet(X[idx])
    weights = a_log[idx].sum(axis=1)
    keep = sign != 0
    return float(0.5 * logsumexp(2.0 * (weights[keep] + logdet[keep])) - log_wedge_volume(basis[:, :k]))


def bad_set_distance(k2: np.ndarray, z: FlagLike) -> float:
    """Distance of z from the set where xi_k(k1 a k2, z) can fall far below omega_k"""
    w0 = longest_weyl(k2.shape[0]).matrix
    return dist_to_complement(z, k2.T @ w0.T)


def deficit_profile(k1: np.ndarray, a_log: np.ndarray, k2: np.ndarray, z: FlagLike,
                    scales: Sequence[float]) -> dict:
    """
    Deficits omega - xi and alpha - sigma_hat along g_s = k1 exp(s a_log) k2.

    The lower bounds on xi and sigma_hat say these stay bounded in s as long
    as z keeps a fixed distance from the bad set of k2.
    """
    a_log = np.asarray(a_log, dtype=float)
    if np.any(np.diff(a_log) > 0):
        raise InvalidInputError("a_log must be non-increasing")
    n = a_log.size
    pairing = cartan_pairing(n)
    xi_def, sigma_def = [], []
    for s in scales:
        a = s * a_log
        omega = np.cumsum(a)[:-1]
        alpha = a[:-1] - a[1:]
        x = np.array([xi_from_cartan(a, k2, z, k) for k in range(1, n)])
        xi_def.append(omega - x)
        sigma_def.append(alpha - pairing @ x)
    return {
        "scales": [float(s) for s in scales],
        "xi_deficit": np.array(xi_def),
        "sigma_deficit": np.array(sigma_def),
        "bad_set_distance": bad_set_distance(k2, z),
    }


def _random_stack(rng: np.random.Generator, count: int, n: int) -> np.ndarray:
    m = rng.standard_normal((count, n, n))
    det = np.linalg.det(m)
    m[det < 0, 0, :] *= -1
    return m / np.abs(det)[:, None, None] ** (1.0 / n)


def _omega_stack(mats: np.ndarray) -> np.ndarray:
    s = np.log(np.linalg.svd(mats, compute_uv=False))
    s = s - s.mean(axis=1, keepdims=True)
    return np.cumsum(s, axis=1)[:, :-1]


def _spread_cartan(rng: np.random.Generator, n: int, min_gap: float = 0.5) -> np.ndarray:
    gaps = rng.uniform(min_gap, 3.0 * min_gap, n - 1)
    a = -np.concatenate([[0.0], np.cumsum(gaps)])
    return a - a.mean()


def identity_suite(n: int, n_samples: int, seed: int, eps: float = 0.1,
                   scales: Sequence[float] = (10.0, 100.0)) -> dict:
    """
    Decomposition and algebraic identity checks on random elements.

    Args:
        n: dimension
        n_samples: number of random elements, pairs and triples
        seed: RNG seed
        eps: distance from the bad set for the bound-constant check
        scales: two Cartan scalings compared by the bound-constant check

    Returns:
        dict of worst residuals, violation counts and deficit ratios
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, n, 0])))
    pairing = cartan_pairing(n)
    G1 = _random_stack(rng, n_samples, n)
    G2 = _random_stack(rng, n_samples, n)

    kak_residual, trace_residual = 0.0, 0.0
    for g in G1:
        triple = kak(g)
        kak_residual = max(kak_residual, float(np.max(np.abs(triple.reconstruct() - g))))
        trace_residual = max(trace_residual, abs(float(triple.a_log.sum())))

    w1, w2 = _omega_stack(G1), _omega_stack(G2)
    w12 = _omega_stack(np.matmul(G1, G2))
    w2_inv = _omega_stack(np.linalg.inv(G2))
    a1 = np.log(np.linalg.svd(G1, compute_uv=False))
    a1 = a1 - a1.mean(axis=1, keepdims=True)
    roots = a1[:, :-1] - a1[:, 1:]
    roots_residual = float(np.max(np.abs(roots - w1 @ pairing.T)))
    upper_violation = float(np.max(w12 - w1 - w2))
    lower_violation = float(np.max(w1 - w2_inv - w12))

    K1 = np.stack([random_orthogonal(rng, n) for _ in range(n_samples)])
    K2 = np.stack([random_orthogonal(rng, n) for _ in range(n_samples)])
    k_invariance = float(np.max(np.abs(_omega_stack(K1 @ G1 @ K2) - w1)))

    Z = np.stack([random_orthogonal(rng, n) for _ in range(n_samples)])
    xi_res, sigma_res, xi_upper = 0.0, 0.0, 0
    wedge_res, route_res = 0.0, 0.0
    levels = range(1, n)
    for g1, g2, zb in zip(G1, G2, Z):
        z = FullFlag(zb)
        moved = z.act(g2)
        lhs = np.cumsum(iwasawa_log_diagonal(g1 @ g2, z))[:-1]
        rhs = np.cumsum(iwasawa_log_diagonal(g1, moved))[:-1] + np.cumsum(iwasawa_log_diagonal(g2, z))[:-1]
        xi_res = max(xi_res, float(np.max(np.abs(lhs - rhs))))
        # the same cocycle through wedge volumes
        wedge = np.array([xi(g1 @ g2, z, k) for k in levels])
        split = np.array([xi(g1, moved, k) + xi(g2, z, k) for k in levels])
        wedge_res = max(wedge_res, float(np.max(np.abs(wedge - split))))
        route_res = max(route_res, float(np.max(np.abs(wedge - lhs))))
        sigma_res = max(sigma_res, float(np.max(np.abs(pairing @ lhs - pairing @ rhs))))
        xi_upper += int(np.sum(np.cumsum(iwasawa_log_diagonal(g1, z))[:-1] - _omega_stack(g1[None])[0] > 1e-9))

    worst_ratio = 0.0
    bound_trials = min(n_samples, 200)
    for _ in range(bound_trials):
        k1, k2 = random_orthogonal(rng, n), random_orthogonal(rng, n)
        a_log = _spread_cartan(rng, n)
        for _attempt in range(1000):
            z = FullFlag.random(rng, n)
            if bad_set_distance(k2, z) >= eps:
                break
        else:
            logger.warning(f"no flag found at distance {eps} from the bad set")
            continue
        profile = deficit_profile(k1, a_log, k2, z, scales)
        for key in ("xi_deficit", "sigma_deficit"):
            d = np.abs(profile[key])
            ratio = (np.max(d[-1]) + DEFICIT_SLACK) / (np.max(d[0]) + DEFICIT_SLACK)
            worst_ratio = max(worst_ratio, float(ratio))

    result = {
        "n": n,
        "n_samples": n_samples,
        "kak_residual": kak_residual,
        "trace_residual": trace_residual,
        "roots_in_weights_residual": roots_residual,
        "subadditivity_violation": upper_violation,
        "lower_subadditivity_violation": lower_violation,
        "k_invariance_residual": k_invariance,
        "xi_cocycle_residual": xi_res,
        "xi_wedge_cocycle_residual": wedge_res,
        "xi_route_residual": route_res,
        "sigma_cocycle_residual": sigma_res,
        "xi_upper_violations": xi_upper,
        "bound_deficit_ratio": worst_ratio,
    }
    logger.info(f"identity suite n={n}: kak {kak_residual:.2e}, xi cocycle {xi_res:.2e}, deficit ratio {worst_ratio:.3f}")
    return result
