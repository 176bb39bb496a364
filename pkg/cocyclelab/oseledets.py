"""
Lyapunov exponents, per-root rates, the degenerate root set I, Oseledets
flags, two-sided block intersections and geodesic tracking.
"""

from dataclasses import dataclass, field
from functools import partial
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field

from .boundary import Frame, FullFlag, PartialFlagPoint, flag_distance, min_angle_sine, orthonormal_columns, principal_angles
from .configs import (
    BLOCK_ANGLE_TOL,
    CLUSTER_ABS_TOL,
    CLUSTER_REL_TOL,
    CLUSTER_SE_FACTOR,
    FLAG_CONVERGENCE_CEILING,
    FLAG_CONVERGENCE_TOL,
    SE_FLOOR,
)
from .errors import DegenerateSampleError, InvalidInputError
from .liegroup import ParabolicSpec, log_singular_values
from .parallel import run_trials
from .walk import (
    INITIAL_STREAM,
    MAX_LOG_RATIO,
    CocycleSystem,
    ProductAccumulator,
    Word,
    diagonal_log_path,
    product_path,
    sample_word,
    state_path,
    trial_rng,
)

BATCH_SEGMENTS = 10


class LyapunovReport(BaseModel):
    """Exponent estimate for one cocycle system"""
    orientation: str = Field(description="forward or backward walk")
    n_steps: int = Field(description="Path length per trial")
    n_trials: int = Field(description="Number of independent paths")
    exponents: List[float] = Field(description="lambda_1 >= ... >= lambda_n in nats per step")
    standard_errors: List[float] = Field(description="Standard error of each exponent")
    multiplicities: List[int] = Field(description="Cluster sizes m_1, ..., m_k")
    block_exponents: List[float] = Field(description="Mean exponent of each cluster")
    root_rates: List[float] = Field(description="lambda_alpha_k = lambda_k - lambda_{k+1}")
    degenerate_roots: List[int] = Field(description="I: roots whose exponents share a cluster")
    dual_roots: List[int] = Field(description="I' = {n - k : k in I}")
    sum_residual: float = Field(description="sum of exponents, zero up to noise")
    sum_standard_error: float = Field(description="standard error of the exponent sum")
    cluster_rel_tol: float = Field(description="relative clustering tolerance used")

    @property
    def n(self) -> int:
        return len(self.exponents)


def trial_start(system: CocycleSystem, seed: int, trial: int, x0=None) -> int:
    """Base point of a trial: given, or drawn from the base stationary distribution"""
    if x0 is not None:
        return system.state_index(x0)
    return int(system.sample_states(trial_rng(seed, trial, INITIAL_STREAM), 1)[0])


def _exponent_trial(trial: int, system: CocycleSystem, n_steps: int, seed: int, orientation: str,
                    x0, renormalize_every: int, checkpoints: int) -> dict:
    word = sample_word(system, seed, trial, n_steps, orientation)
    start = trial_start(system, seed, trial, x0)
    return diagonal_log_path(system, word.atoms, start, renormalize_every,
                             inverse=orientation == "backward", checkpoints=checkpoints)


def infer_multiplicities(exponents: Sequence[float], standard_errors: Optional[Sequence[float]] = None,
                         rel_tol: float = CLUSTER_REL_TOL, abs_tol: float = CLUSTER_ABS_TOL) -> Tuple[int, ...]:
    """
    Single-linkage clustering of sorted exponents.

    Neighbours i, i+1 share a cluster when their gap is at most
    max(rel_tol * (lambda_1 - lambda_n), 3 * SE, abs_tol).
    """
    lam = np.asarray(exponents, dtype=float)
    se = np.zeros_like(lam) if standard_errors is None else np.asarray(standard_errors, dtype=float)
    if np.any(np.diff(lam) > 0):
        raise InvalidInputError("exponents must be sorted non-increasing")
    spread = lam[0] - lam[-1]
    sizes = [1]
    for i in range(lam.size - 1):
        tol = max(rel_tol * spread, CLUSTER_SE_FACTOR * max(se[i], se[i + 1]), abs_tol)
        if lam[i] - lam[i + 1] <= tol:
            sizes[-1] += 1
        else:
            sizes.append(1)
    return tuple(sizes)


def _degenerate_from_multiplicities(multiplicities: Sequence[int]) -> List[int]:
    ends = set(np.cumsum(multiplicities)[:-1].tolist())
    n = int(np.sum(multiplicities))
    return [k for k in range(1, n) if k not in ends]


def estimate_exponents(system: CocycleSystem, n_steps: int, n_trials: int, seed: int,
                       cluster_tol: float = CLUSTER_REL_TOL, orientation: str = "forward",
                       x0=None, workers: int = 0, renormalize_every: int = 1) -> LyapunovReport:
    """
    Lyapunov exponents from averaged Benettin diagonal logs.

    The raw diagonal logs are averaged over trials before sorting. Standard
    errors come from the spread across trials, or from batch means over
    path segments when only one trial is run.

    Args:
        system: cocycle system
        n_steps: path length per trial
        n_trials: number of independent paths
        seed: run seed
        cluster_tol: clustering tolerance relative to the spectral spread
        orientation: "forward" walk, or "backward" for A^{-n}
        x0: base point, drawn per trial from the base distribution when None
        workers: pool size for the trials

    Returns:
        LyapunovReport
    """
    if n_steps < 1 or n_trials < 1:
        raise InvalidInputError("n_steps and n_trials must be >= 1")
    if orientation not in ("forward", "backward"):
        raise InvalidInputError(f"orientation must be forward or backward, got {orientation!r}")
    checkpoints = BATCH_SEGMENTS if n_trials == 1 and n_steps >= BATCH_SEGMENTS else 0
    worker = partial(_exponent_trial, system=system, n_steps=n_steps, seed=seed, orientation=orientation,
                     x0=x0, renormalize_every=renormalize_every, checkpoints=checkpoints)
    results = run_trials(worker, range(n_trials), workers)

    raw = np.stack([r["log_d"] for r in results]) / n_steps
    mean = raw.mean(axis=0)
    order = np.argsort(-mean, kind="stable")
    exponents = mean[order]
    if n_trials >= 2:
        samples = raw[:, order]
    elif checkpoints:
        marks = np.vstack([np.zeros(system.n), results[0]["checkpoints"]])
        lengths = np.diff([n_steps * i // checkpoints for i in range(checkpoints + 1)])
        samples = (np.diff(marks, axis=0) / lengths[:, None])[:, order]
    else:
        samples = None
    if samples is not None and samples.shape[0] >= 2:
        se = samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])
        sum_se = float(samples.sum(axis=1).std(ddof=1) / np.sqrt(samples.shape[0]))
    else:
        se = np.zeros(system.n)
        sum_se = 0.0
    se = np.maximum(se, SE_FLOOR)
    sum_se = max(sum_se, SE_FLOOR)

    multiplicities = infer_multiplicities(exponents, se, cluster_tol)
    degenerate = _degenerate_from_multiplicities(multiplicities)
    bounds = np.concatenate([[0], np.cumsum(multiplicities)])
    block_exponents = [float(exponents[bounds[i]:bounds[i + 1]].mean()) for i in range(len(multiplicities))]
    report = LyapunovReport(
        orientation=orientation,
        n_steps=n_steps,
        n_trials=n_trials,
        exponents=exponents.tolist(),
        standard_errors=se.tolist(),
        multiplicities=list(multiplicities),
        block_exponents=block_exponents,
        root_rates=(exponents[:-1] - exponents[1:]).tolist(),
        degenerate_roots=degenerate,
        dual_roots=sorted(system.n - k for k in degenerate),
        sum_residual=float(exponents.sum()),
        sum_standard_error=sum_se,
        cluster_rel_tol=cluster_tol,
    )
    logger.info(f"exponents ({orientation}, {n_trials}x{n_steps}): {np.round(exponents, 4).tolist()}, "
                f"multiplicities {list(multiplicities)}")
    return report


def classify_degenerate_roots(report: LyapunovReport, tol: Optional[float] = None) -> Tuple[ParabolicSpec, ParabolicSpec]:
    """
    The set I of roots with zero rate, and its dual I'.

    Without tol the report's own clustering decides; with tol, I = {k : lambda_alpha_k <= tol}.
    """
    n = report.n
    if tol is None:
        roots = report.degenerate_roots
    else:
        roots = [k for k in range(1, n) if report.root_rates[k - 1] <= tol]
    spec = ParabolicSpec(n, frozenset(roots))
    return spec, spec.dual()


@dataclass
class FlagEstimate:
    """
    Oseledets flag read off a finite-horizon product.

    `flag` is increasing: for the forward walk its levels n - d_{i-1} are the
    subspaces V_i^+, for the backward walk its levels d_j are V_j^-, where
    d_j = m_1 + ... + m_j with the multiplicities in exponent order.
    """
    orientation: str
    flag: FullFlag
    multiplicities: Tuple[int, ...]
    horizons: List[int] = field(default_factory=list)
    residuals: List[float] = field(default_factory=list)
    converged: bool = True
    state: int = 0

    @property
    def n(self) -> int:
        return self.flag.n

    @property
    def cumulative(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.multiplicities)])

    @property
    def levels(self) -> Tuple[int, ...]:
        d = self.cumulative[1:-1]
        if self.orientation == "forward":
            return tuple(sorted(int(self.n - x) for x in d))
        return tuple(int(x) for x in d)

    def subspace(self, i: int) -> np.ndarray:
        """V_i^+ (forward) or V_i^- (backward), 1 <= i <= k"""
        k = len(self.multiplicities)
        if not 1 <= i <= k:
            raise InvalidInputError(f"block index {i} outside 1..{k}")
        d = self.cumulative
        if self.orientation == "forward":
            return self.flag.basis[:, :self.n - d[i - 1]]
        return self.flag.basis[:, :d[i]]

    def partial(self) -> PartialFlagPoint:
        roots = frozenset(range(1, self.n)) - frozenset(self.levels)
        return PartialFlagPoint(ParabolicSpec(self.n, roots), self.flag.basis)


def right_frame(accumulator: ProductAccumulator) -> np.ndarray:
    """
    Right singular directions of the represented product, fast to slow.

    Rows of N taken in decreasing order of their scale exp(log_d) and
    orthonormalized; accurate up to exp(-gap) between distinct scales.
    """
    _, log_d, upper = accumulator.state()
    order = np.argsort(-log_d, kind="stable")
    return accumulator.q0 @ orthonormal_columns(upper[order, :].T)


def _resolve_multiplicities(accumulator: ProductAccumulator, horizon: int, multiplicities,
                            report: Optional[LyapunovReport], orientation: str) -> Tuple[int, ...]:
    if multiplicities is not None:
        m = tuple(int(x) for x in multiplicities)
    elif report is not None:
        m = tuple(report.multiplicities)
    else:
        rates = np.sort(accumulator.log_d / max(horizon, 1))[::-1]
        m = infer_multiplicities(rates)
        if orientation == "backward":
            # backward rates are the negated forward ones in reverse order
            m = m[::-1]
    if sum(m) != accumulator.n or any(x < 1 for x in m):
        raise InvalidInputError(f"multiplicities {m} do not partition dimension {accumulator.n}")
    return m


def _convergence_tol(accumulator: ProductAccumulator, horizons: Sequence[int], profile: Sequence[int],
                     floor: float) -> float:
    """
    Residual threshold for consecutive flag estimates. Flags settle like
    exp(-gap * n), so the threshold is exp(-gap * n_prev / 2) for the
    smallest gap between retained blocks, kept within [floor, FLAG_CONVERGENCE_CEILING].
    """
    ends = np.cumsum(profile)[:-1]
    if not ends.size:
        return floor
    rates = np.sort(accumulator.log_d / max(horizons[-1], 1))[::-1]
    gap = float(min(rates[e - 1] - rates[e] for e in ends))
    previous = horizons[-2] if len(horizons) > 1 else horizons[-1]
    return float(min(max(floor, np.exp(-0.5 * max(gap, 0.0) * previous)), FLAG_CONVERGENCE_CEILING))


def _estimate_flag(system: CocycleSystem, word: Word, start, horizons: Sequence[int], orientation: str,
                   multiplicities, report, tol: float) -> FlagEstimate:
    horizons = [int(h) for h in horizons]
    if not horizons or horizons[0] < 1:
        raise InvalidInputError("flag horizons must be >= 1")
    path = product_path(system, word, start, horizons, orientation)
    last = path.snapshots[-1]
    m = _resolve_multiplicities(last.accumulator, last.horizon, multiplicities, report, orientation)
    flags = [FullFlag(right_frame(s.accumulator)[:, ::-1]) for s in path.snapshots]
    estimate = FlagEstimate(orientation, flags[-1], m, horizons, [], True, int(system.state_index(start)))
    levels = estimate.levels
    residuals = [flag_distance(a, b, levels) for a, b in zip(flags, flags[1:])]
    profile = m[::-1] if orientation == "backward" else m
    threshold = _convergence_tol(last.accumulator, horizons, profile, tol)
    converged = bool(residuals) and residuals[-1] < threshold
    if not levels:
        converged = True
    if not converged:
        logger.warning(f"{orientation} flag not converged: residuals {residuals}, threshold {threshold:.2e}")
    estimate.residuals = residuals
    estimate.converged = converged
    return estimate


def forward_flag(system: CocycleSystem, word: Word, x0, horizons: Sequence[int], multiplicities=None,
                 report: Optional[LyapunovReport] = None, tol: float = FLAG_CONVERGENCE_TOL) -> FlagEstimate:
    """
    Forward Oseledets flag V^+ from the right singular frames of A^n(u, x0).

    V_i^+ is spanned by the right singular directions with index > d_{i-1};
    estimates at successive horizons are compared to decide convergence.
    """
    return _estimate_flag(system, word, x0, horizons, "forward", multiplicities, report, tol)


def backward_flag(system: CocycleSystem, word: Word, y0, horizons: Sequence[int], multiplicities=None,
                  report: Optional[LyapunovReport] = None, tol: float = FLAG_CONVERGENCE_TOL) -> FlagEstimate:
    """Backward flag V^-, the slow right singular directions of A^{-n}(v, y0)"""
    return _estimate_flag(system, word, y0, horizons, "backward", multiplicities, report, tol)


@dataclass
class BlockDecomposition:
    """Frames of the two-sided blocks V_l = V_l^+ meet V_l^-, fastest first"""
    frames: List[np.ndarray]
    dims: Tuple[int, ...]
    margin: float

    @property
    def basis(self) -> np.ndarray:
        return np.hstack(self.frames)


def _intersection(A: np.ndarray, B: np.ndarray, angle_tol: float) -> Tuple[np.ndarray, np.ndarray]:
    u, s, _ = np.linalg.svd(A.T @ B)
    angles = np.arccos(np.clip(s, -1.0, 1.0))
    r = int(np.sum(angles < angle_tol))
    return A @ u[:, :r], angles


def intersect_flags(vplus: FlagEstimate, vminus: FlagEstimate, angle_tol: float = BLOCK_ANGLE_TOL) -> BlockDecomposition:
    """
    Two-sided blocks by principal-angle intersection.

    Raises DegenerateSampleError when an intersection does not have the
    expected dimension m_l or the direct sums V_i^+ = sum_{l >= i} V_l and
    V_j^- = sum_{l <= j} V_l fail at angle_tol.
    """
    if vplus.orientation != "forward" or vminus.orientation != "backward":
        raise InvalidInputError("intersect_flags expects a forward and a backward flag")
    if tuple(vplus.multiplicities) != tuple(vminus.multiplicities):
        raise InvalidInputError(f"multiplicity profiles differ: {vplus.multiplicities} vs {vminus.multiplicities}")
    m = tuple(vplus.multiplicities)
    k = len(m)
    frames = []
    for ell in range(1, k + 1):
        vectors, angles = _intersection(vplus.subspace(ell), vminus.subspace(ell), angle_tol)
        if vectors.shape[1] != m[ell - 1]:
            raise DegenerateSampleError(
                f"block {ell}: intersection dimension {vectors.shape[1]} != multiplicity {m[ell - 1]} "
                f"(smallest angles {np.sort(angles)[:m[ell - 1] + 1].tolist()})")
        frames.append(Frame.spanning(vectors).vectors)

    for i in range(1, k + 1):
        plus_sum = np.hstack(frames[i - 1:])
        minus_sum = np.hstack(frames[:i])
        if principal_angles(plus_sum, vplus.subspace(i))[0] > angle_tol:
            raise DegenerateSampleError(f"V_{i}^+ is not the direct sum of blocks {i}..{k}")
        if principal_angles(minus_sum, vminus.subspace(i))[0] > angle_tol:
            raise DegenerateSampleError(f"V_{i}^- is not the direct sum of blocks 1..{i}")

    margin = 1.0
    if k > 1:
        margin = min(min_angle_sine(frames[ell], np.hstack(frames[:ell] + frames[ell + 1:])) for ell in range(k))
    return BlockDecomposition(frames=frames, dims=m, margin=float(margin))


def state_at(system: CocycleSystem, word: Word, x0, t: int) -> int:
    """Base point at time t >= 0 along the future of a two-sided word"""
    return int(state_path(system, word.forward_atoms[:t], x0)[-1])


def two_sided_blocks(system: CocycleSystem, word: Word, x0, t: int, multiplicities: Sequence[int],
                     horizon: int, angle_tol: float = BLOCK_ANGLE_TOL,
                     tol: float = FLAG_CONVERGENCE_TOL) -> Tuple[FlagEstimate, FlagEstimate, BlockDecomposition]:
    """
    Forward flag, backward flag and their blocks at time t of a two-sided word.

    x0 is the base point at the word's origin; the flags at time t use the
    future and past of the shifted word.
    """
    if word.orientation != "two-sided":
        raise InvalidInputError("two_sided_blocks needs a two-sided word")
    shifted = word.shifted(t)
    x_t = state_at(system, word, x0, t)
    horizons = sorted({max(1, horizon // 10), horizon})
    vplus = forward_flag(system, shifted, x_t, horizons, multiplicities, tol=tol)
    vminus = backward_flag(system, shifted, x_t, horizons, multiplicities, tol=tol)
    return vplus, vminus, intersect_flags(vplus, vminus, angle_tol)


def _conjugate_upper(upper: np.ndarray, log_d: np.ndarray) -> np.ndarray:
    """D^-1 . U . D for unit upper triangular U, D = diag(exp(log_d)), in relative precision"""
    ratio = np.clip(log_d[None, :] - log_d[:, None], -MAX_LOG_RATIO, MAX_LOG_RATIO)
    return np.triu(upper * np.exp(ratio), 1) + np.eye(upper.shape[0])


def geodesic_tracking(system: CocycleSystem, word: Word, x0, horizons: Sequence[int],
                      exponents: Union[LyapunovReport, Sequence[float], None] = None) -> dict:
    """
    Distance from the orbit A^n(u, x0)^{-1} K to the fitted ray, per horizon.

    The ray is gamma(t) = k exp(-t Lambda) K with k the orthonormal frame of
    the forward flag at the last horizon N (rows of the triangular factor
    N_N, fastest first) and Lambda the sorted exponent vector. The defect at
    n is ||a_log(A^n k exp(-n Lambda))|| / n.

    The frame is never formed: rays through float frames that differ by
    rounding diverge like exp(n * gap). Instead the segment n -> N is
    accumulated from the orthogonal factor Q_n, which gives
    N_N = (D_n^-1 N' D_n) N_n, and with N_N^T = k L^T (QR)

        A^n k = Q_n D_n (D_n^-1 N'^-1 D_n) L

    whose factors carry no cancellation.

    Returns:
        dict with horizons, defects, lambda_hat and its norm
    """
    horizons = [int(h) for h in horizons]
    if not horizons or horizons[0] < 1:
        raise InvalidInputError("tracking horizons must be >= 1")
    path = product_path(system, word, x0, horizons, "forward")
    last = path.snapshots[-1]
    _, log_d_last, _ = last.accumulator.state()
    if exponents is None:
        lam = np.sort(log_d_last / last.horizon)[::-1]
    elif isinstance(exponents, LyapunovReport):
        lam = np.asarray(exponents.exponents, dtype=float)
    else:
        lam = np.sort(np.asarray(exponents, dtype=float))[::-1]
    # column i of the frame follows the i-th Benettin direction
    assigned = np.empty_like(lam)
    assigned[np.argsort(-log_d_last, kind="stable")] = lam
    atoms = word.forward_atoms
    defects = []
    for snap in path.snapshots:
        q, log_d, upper = snap.accumulator.state()
        gap = last.horizon - snap.horizon
        if gap:
            segment = Word(atoms[snap.horizon:last.horizon])
            seg = product_path(system, segment, snap.state, [gap], "forward", basis=q).snapshots[-1].accumulator
            seg_upper = seg.state()[2]
        else:
            seg_upper = np.eye(system.n)
        carried = _conjugate_upper(seg_upper, log_d)
        _, r = np.linalg.qr((carried @ upper).T)
        pulled = _conjugate_upper(np.linalg.inv(seg_upper), log_d)
        vals = log_singular_values(pulled @ r.T, row_log=log_d, col_log=-snap.horizon * assigned)
        defects.append(float(np.linalg.norm(vals) / snap.horizon))
    logger.debug(f"geodesic tracking defects {defects}")
    return {
        "horizons": horizons,
        "defects": defects,
        "lambda_hat": lam.tolist(),
        "lambda_norm": float(np.linalg.norm(lam)),
    }
