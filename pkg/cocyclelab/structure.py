"""
Structural statistics of a cocycle: block restrictions, conformality
defects, Schmidt tightness, invariant forms, the conjugation residual and
transversality of the forward and backward flags.
"""

from dataclasses import dataclass, field
from functools import partial
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg as la
from loguru import logger
from pydantic import BaseModel, Field

from .boundary import Frame, as_frame, min_angle_sine, principal_angles
from .configs import (
    ANGLE_TOL,
    BLOCK_ANGLE_TOL,
    CLUSTER_ABS_TOL,
    CLUSTER_SE_FACTOR,
    DEFECT_FLOOR,
    FORM_TOL,
    INVARIANCE_TOL,
    TIGHT_RATIO,
    TIGHT_SLOPE,
    UNBOUNDED_GROWTH,
    UNBOUNDED_SLOPE,
)
from .errors import ConvergenceError, DegenerateSampleError, InvalidInputError
from .liegroup import bruhat_profile
from .oseledets import (
    BlockDecomposition,
    FlagEstimate,
    LyapunovReport,
    trial_start,
    two_sided_blocks,
)
from .parallel import run_trials
from .walk import CocycleSystem, ProductAccumulator, Word, product_path, sample_word


@dataclass
class BlockRestriction:
    """A^n restricted to one block: matrix = exp(log_factor) * normalized, |det normalized| = 1"""
    normalized: np.ndarray
    log_factor: float
    residual: float

    @property
    def matrix(self) -> np.ndarray:
        return np.exp(self.log_factor) * self.normalized

    @property
    def flagged(self) -> bool:
        return self.residual > INVARIANCE_TOL


def _normalize(m: np.ndarray, log_scale: float) -> Tuple[np.ndarray, float]:
    d = m.shape[0]
    sign, logdet = np.linalg.slogdet(m)
    if sign == 0 or not np.isfinite(logdet):
        raise DegenerateSampleError("block restriction is singular")
    shift = logdet / d
    return m / np.exp(shift), log_scale + shift


def block_restriction(accumulator: ProductAccumulator, frame0: Union[Frame, np.ndarray],
                      frameN: Union[Frame, np.ndarray], span: Optional[Tuple[int, int]] = None) -> BlockRestriction:
    """
    Restriction M = frameN^T A^n frame0 of the accumulated product to a block.

    Without `span` the product is applied to frame0 directly and the residual
    is the part of A^n frame0 outside span(frameN), relative to its norm.

    With span = (lo, hi) the accumulator must have been seeded with a basis
    whose first lo and hi columns span the faster blocks and the faster
    blocks plus this one. The restriction is then read from the diagonal
    block R[lo:hi, lo:hi] of the triangular factor, which never applies A^n
    to a slow vector. The residual pulls frameN back through R[:hi, :hi]
    and compares it with frame0, plus the part of frameN outside the image
    of the first hi seed columns.
    """
    start, end = as_frame(frame0), as_frame(frameN)
    if start.vectors.shape != end.vectors.shape:
        raise InvalidInputError(f"frames differ in shape: {start.vectors.shape} vs {end.vectors.shape}")
    frame0, frameN = start.vectors, end.vectors
    q, log_d, upper = accumulator.state()

    if span is None:
        top = float(np.max(log_d))
        image = q @ (np.exp(log_d - top)[:, None] * (upper @ (accumulator.q0.T @ frame0)))
        norm = np.linalg.norm(image, 2)
        if norm == 0:
            raise DegenerateSampleError("A^n frame0 underflowed; use the seeded route")
        outside = image - frameN @ (frameN.T @ image)
        residual = float(np.linalg.norm(outside, 2) / norm)
        normalized, log_factor = _normalize(frameN.T @ image, top)
        return BlockRestriction(normalized, log_factor, residual)

    lo, hi = span
    if hi - lo != start.dim:
        raise InvalidInputError(f"span {span} does not match block dimension {start.dim}")
    center = float(np.mean(log_d[lo:hi]))
    r_block = np.exp(log_d[lo:hi] - center)[:, None] * upper[lo:hi, lo:hi]
    g_start = accumulator.q0[:, lo:hi].T @ frame0
    g_end = q[:, lo:hi].T @ frameN
    m = np.linalg.solve(g_end, r_block @ g_start)
    normalized, log_factor = _normalize(m, center)

    # invariance: frameN must come from the first hi seed directions, and pull back onto frame0
    coords = q.T @ frameN
    leak = float(np.linalg.norm(coords[hi:], 2)) if hi < coords.shape[0] else 0.0
    with np.errstate(divide="ignore"):
        logs = np.log(np.abs(coords[:hi])) - log_d[:hi, None]
    shift = np.max(logs, axis=0)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    scaled = np.sign(coords[:hi]) * np.exp(logs - shift)
    pulled = accumulator.q0[:, :hi] @ la.solve_triangular(upper[:hi, :hi], scaled, unit_diagonal=True)
    angle = float(np.sin(principal_angles(pulled, frame0)[0]))
    return BlockRestriction(normalized, log_factor, max(angle, leak))


def conformality_defect(M: np.ndarray) -> float:
    """log(sigma_max / sigma_min); zero exactly for scalar multiples of orthogonal matrices"""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got {M.shape}")
    s = np.linalg.svd(M, compute_uv=False)
    if not np.all(np.isfinite(s)) or s[-1] <= 0:
        raise InvalidInputError("conformality defect of a singular matrix")
    return float(max(np.log(s[0]) - np.log(s[-1]), 0.0))


def adapted_defect(M: np.ndarray, form: np.ndarray) -> float:
    """Conformality defect of M in a frame orthonormal for the quadratic form"""
    L = np.linalg.cholesky(np.asarray(form, dtype=float))
    adapted = L.T @ np.asarray(M, dtype=float) @ np.linalg.inv(L.T)
    return conformality_defect(adapted)


@dataclass
class BlockSeries:
    """Block restrictions of A^n along one two-sided path, [block][horizon]"""
    dims: Tuple[int, ...]
    horizons: List[int]
    restrictions: List[List[BlockRestriction]] = field(default_factory=list)

    def defects(self, block: int) -> List[float]:
        return [conformality_defect(r.normalized) for r in self.restrictions[block]]


def block_series(system: CocycleSystem, word: Word, x0, multiplicities: Sequence[int],
                 horizons: Sequence[int], flag_horizon: int,
                 angle_tol: float = BLOCK_ANGLE_TOL) -> BlockSeries:
    """
    Block restrictions of A^n at each horizon for each Lyapunov block.

    Block frames are re-estimated at the start and at every endpoint from
    the shifted word. The forward product is seeded with the backward flag
    basis at the start so each block is read from the triangular factor.
    """
    horizons = [int(h) for h in horizons]
    m = tuple(int(x) for x in multiplicities)
    _, vminus0, blocks0 = two_sided_blocks(system, word, x0, 0, m, flag_horizon, angle_tol)
    seed_basis = vminus0.flag.basis
    path = product_path(system, word, x0, horizons, "forward", basis=seed_basis)
    bounds = np.concatenate([[0], np.cumsum(m)])
    series = BlockSeries(dims=m, horizons=horizons, restrictions=[[] for _ in m])
    for snap in path.snapshots:
        _, _, blocks_n = two_sided_blocks(system, word, x0, snap.horizon, m, flag_horizon, angle_tol)
        for ell in range(len(m)):
            restriction = block_restriction(snap.accumulator, blocks0.frames[ell], blocks_n.frames[ell],
                                            span=(int(bounds[ell]), int(bounds[ell + 1])))
            if restriction.flagged:
                logger.warning(f"block {ell + 1} not invariant at n={snap.horizon}: residual {restriction.residual:.2e}")
            series.restrictions[ell].append(restriction)
    return series


class TightnessResult(BaseModel):
    """Schmidt tightness statistic for one block"""
    verdict: str = Field(description="TIGHT, UNBOUNDED or INCONCLUSIVE")
    slope: float = Field(description="OLS slope of the per-horizon median defect against log n")
    ratio: float = Field(description="95th percentile growth between the largest and smallest horizon")
    growth: float = Field(description="median growth rescaled to two decades of horizon")
    horizons: List[int] = Field(description="Horizons used")
    medians: List[float] = Field(description="Median defect per horizon")
    p95: List[float] = Field(description="95th percentile defect per horizon")


def schmidt_tightness(defects: Sequence[Sequence[float]], horizons: Sequence[int]) -> TightnessResult:
    """
    Decide tightness of a defect family.

    Args:
        defects: array-like of shape (trials, horizons)
        horizons: increasing horizons spanning at least two decades

    Returns:
        TightnessResult; TIGHT when slope <= 0.01 and ratio <= 2, UNBOUNDED
        when the median grows >= 5x per two decades or rises monotonically
        with slope >= 0.25, INCONCLUSIVE otherwise
    """
    d = np.atleast_2d(np.asarray(defects, dtype=float))
    h = np.asarray(horizons, dtype=float)
    if d.shape[1] != h.size:
        raise InvalidInputError(f"defects have {d.shape[1]} horizons, expected {h.size}")
    if h.size < 2 or np.any(np.diff(h) <= 0) or h[0] <= 0:
        raise InvalidInputError("tightness needs at least two increasing positive horizons")
    decades = np.log10(h[-1] / h[0])
    if decades < 2 - 1e-9:
        raise InvalidInputError(f"horizons span {decades:.2f} decades; at least 2 are required")
    medians = np.median(d, axis=0)
    p95 = np.percentile(d, 95, axis=0)
    slope = float(np.polyfit(np.log(h), medians, 1)[0])
    ratio = float((p95[-1] + DEFECT_FLOOR) / (p95[0] + DEFECT_FLOOR))
    growth = float(((medians[-1] + DEFECT_FLOOR) / (medians[0] + DEFECT_FLOOR)) ** (2.0 / decades))
    monotone = bool(np.all(np.diff(medians) > 0))
    if slope <= TIGHT_SLOPE and ratio <= TIGHT_RATIO:
        verdict = "TIGHT"
    elif growth >= UNBOUNDED_GROWTH or (monotone and slope >= UNBOUNDED_SLOPE):
        verdict = "UNBOUNDED"
    else:
        verdict = "INCONCLUSIVE"
    return TightnessResult(verdict=verdict, slope=slope, ratio=ratio, growth=growth,
                           horizons=[int(x) for x in h], medians=medians.tolist(), p95=p95.tolist())


class InvariantFormEstimate(BaseModel):
    form: List[List[float]] = Field(description="Symmetric positive-definite form, unit determinant")
    cauchy_residual: float = Field(description="Largest relative deviation of G_n from the estimate over the last decade")
    transfer_residual: float = Field(description="Largest relative deviation of M^T F M from F")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.form)


def _unit_det(m: np.ndarray) -> np.ndarray:
    d = m.shape[0]
    _, logdet = np.linalg.slogdet(m)
    return m / np.exp(logdet / d)


def estimate_invariant_form(matrices: Sequence[np.ndarray], horizons: Optional[Sequence[int]] = None,
                            tol: float = FORM_TOL) -> InvariantFormEstimate:
    """
    Cesaro limit of the determinant-normalized pullback Gram matrices M^T M.

    Raises ConvergenceError (carrying the residual) when the Gram sequence
    is not Cauchy over the last decade or the estimate is not transported
    to itself by the normalized block maps.
    """
    mats = [np.atleast_2d(np.asarray(m, dtype=float)) for m in matrices]
    if not mats:
        raise InvalidInputError("no block restrictions given")
    horizons = list(range(1, len(mats) + 1)) if horizons is None else [int(h) for h in horizons]
    if len(horizons) != len(mats):
        raise InvalidInputError("one horizon per matrix is required")
    grams = [_unit_det(m.T @ m) for m in mats]
    last = horizons[-1]
    window = [i for i, h in enumerate(horizons) if h * 10 >= last]
    form = np.mean([grams[i] for i in window], axis=0)
    form = _unit_det(0.5 * (form + form.T))
    scale = np.linalg.norm(form)
    cauchy = max(float(np.linalg.norm(grams[i] - form) / scale) for i in window)
    transfer = 0.0
    for i in window:
        m = mats[i] / np.exp(np.linalg.slogdet(mats[i])[1] / mats[i].shape[0])
        transfer = max(transfer, float(np.linalg.norm(m.T @ form @ m - form) / scale))
    if cauchy > tol:
        raise ConvergenceError(f"Gram sequence is not Cauchy (residual {cauchy:.3e})", cauchy)
    if transfer > tol:
        raise ConvergenceError(f"form is not transported to itself (residual {transfer:.3e})", transfer)
    return InvariantFormEstimate(form=form.tolist(), cauchy_residual=cauchy, transfer_residual=transfer)


def _gap_check(report: LyapunovReport, dims: Sequence[int], horizons: Sequence[int],
               gaps: List[List[float]]) -> dict:
    """
    z-scores of the single-path rate gaps against the report's block gaps.

    A path of length h fluctuates like one trial rescaled to h, so the
    report's standard errors are inflated by sqrt(n_trials * n_steps / h).
    A 1/h term covers the bounded frame change between block frames.
    """
    if tuple(report.multiplicities) != tuple(dims):
        raise InvalidInputError(f"report multiplicities {report.multiplicities} differ from block dims {tuple(dims)}")
    bounds = np.concatenate([[0], np.cumsum(dims)])
    se = np.asarray(report.standard_errors)
    block_se = np.array([np.sqrt(np.sum(se[bounds[i]:bounds[i + 1]] ** 2)) / dims[i] for i in range(len(dims))])
    expected = [report.block_exponents[i] - report.block_exponents[i + 1] for i in range(len(dims) - 1)]
    z = []
    for h, row in zip(horizons, gaps):
        scale = np.sqrt(report.n_trials * report.n_steps / h)
        row_z = []
        for i, gap in enumerate(row):
            path_se = float(np.hypot(block_se[i], block_se[i + 1])) * scale
            combined = max(float(np.hypot(path_se, 1.0 / h)), CLUSTER_ABS_TOL)
            row_z.append(abs(gap - expected[i]) / combined)
        z.append(row_z)
    worst = max(z[-1]) if z and z[-1] else 0.0
    return {"expected_gaps": expected, "gap_z": z, "gaps_consistent": worst <= CLUSTER_SE_FACTOR}


def verify_conjugation(system: CocycleSystem, word: Word, x0,
                       blocks: Union[BlockDecomposition, Sequence[int]], horizons: Sequence[int],
                       flag_horizon: int, angle_tol: float = BLOCK_ANGLE_TOL,
                       report: Optional[LyapunovReport] = None) -> dict:
    """
    Express A^n in the block frames, strip each block's scalar and report how
    far the remainder is from orthogonal, with the per-block scalar rates.

    With a report, the rate gaps between consecutive blocks are also compared
    with the report's block-exponent gaps; the verdict is taken at the last
    horizon and holds when every gap is within CLUSTER_SE_FACTOR standard errors.

    Returns:
        dict with horizons, orthogonality_residuals (max over blocks),
        scalar_rates [horizon][block], rate_gaps [horizon][root between blocks],
        and with a report expected_gaps, gap_z and gaps_consistent
    """
    dims = blocks.dims if isinstance(blocks, BlockDecomposition) else tuple(blocks)
    series = block_series(system, word, x0, dims, horizons, flag_horizon, angle_tol)
    residuals, rates, gaps, flagged = [], [], [], 0
    for j, h in enumerate(series.horizons):
        worst = 0.0
        row = []
        for ell in range(len(dims)):
            r = series.restrictions[ell][j]
            worst = max(worst, float(np.max(np.abs(r.normalized.T @ r.normalized - np.eye(dims[ell])))))
            row.append(r.log_factor / h)
            flagged += int(r.flagged)
        residuals.append(worst)
        rates.append(row)
        gaps.append([row[i] - row[i + 1] for i in range(len(row) - 1)])
    result = {
        "horizons": series.horizons,
        "orthogonality_residuals": residuals,
        "scalar_rates": rates,
        "rate_gaps": gaps,
        "flagged_blocks": flagged,
    }
    if report is not None:
        result.update(_gap_check(report, dims, series.horizons, gaps))
        if not result["gaps_consistent"]:
            logger.warning(f"block rate gaps {gaps[-1]} disagree with exponent gaps {result['expected_gaps']}")
    return result


class TransversalityReport(BaseModel):
    label: str = Field(description="Bruhat position of (forward flag, backward flag), or ambiguous")
    margin: float = Field(description="Smallest principal-angle sine between V_i^+ and V_{i-1}^-")
    failures: int = Field(default=0, description="Sampled paths that were not in generic position")
    samples: int = Field(default=1, description="Sampled paths")


def transversality(vplus: FlagEstimate, vminus: FlagEstimate, angle_tol: float = ANGLE_TOL) -> TransversalityReport:
    """
    Relative position of the forward and backward flags.

    With simple spectrum this is the full Bruhat position. With repeated
    exponents only the retained levels are compared: generic position
    (every intersection of the expected dimension) is reported as w0.
    """
    if tuple(vplus.multiplicities) != tuple(vminus.multiplicities):
        raise InvalidInputError("forward and backward flags have different multiplicities")
    k = len(vplus.multiplicities)
    n = vplus.n
    margin = 1.0
    if k > 1:
        margin = min(min_angle_sine(vplus.subspace(i), vminus.subspace(i - 1)) for i in range(2, k + 1))
    if k == n:
        label = bruhat_profile(vplus.flag, vminus.flag, angle_tol).label
    elif k == 1:
        label = "w0"
    else:
        generic = True
        for a in vplus.levels:
            for b in vminus.levels:
                angles = principal_angles(vplus.flag.basis[:, :a], vminus.flag.basis[:, :b])
                if int(np.sum(angles < angle_tol)) != max(0, a + b - n):
                    generic = False
        label = "w0" if generic else "ambiguous"
    failures = 0 if label == "w0" else 1
    return TransversalityReport(label=label, margin=float(margin), failures=failures, samples=1)


def _survey_trial(trial: int, system: CocycleSystem, multiplicities: Tuple[int, ...], seed: int,
                  horizon: int, angle_tol: float) -> dict:
    word = sample_word(system, seed, trial, horizon, "two-sided")
    x0 = trial_start(system, seed, trial)
    try:
        vplus, vminus, blocks = two_sided_blocks(system, word, x0, 0, multiplicities, horizon, angle_tol)
    except DegenerateSampleError as e:
        return {"blocks_ok": False, "label": "ambiguous", "margin": 0.0, "error": str(e)}
    report = transversality(vplus, vminus)
    return {"blocks_ok": True, "label": report.label, "margin": report.margin, "block_margin": blocks.margin}


def transversality_survey(system: CocycleSystem, report: LyapunovReport, n_paths: int, seed: int,
                          horizon: int, angle_tol: float = BLOCK_ANGLE_TOL, workers: int = 0) -> dict:
    """Block dimensions and Bruhat position over many sampled two-sided paths"""
    worker = partial(_survey_trial, system=system, multiplicities=tuple(report.multiplicities), seed=seed,
                     horizon=horizon, angle_tol=angle_tol)
    results = run_trials(worker, range(n_paths), workers)
    block_ok = sum(r["blocks_ok"] for r in results)
    w0 = sum(r["label"] == "w0" for r in results)
    margins = [r["margin"] for r in results if r["blocks_ok"]]
    summary = {
        "paths": n_paths,
        "block_dimension_ok": block_ok,
        "block_fraction": block_ok / n_paths,
        "w0_count": w0,
        "w0_fraction": w0 / n_paths,
        "degenerate_samples": n_paths - block_ok,
        "median_margin": float(np.median(margins)) if margins else 0.0,
    }
    logger.info(f"transversality survey: {w0}/{n_paths} in w0 position, {block_ok}/{n_paths} with expected block dims")
    return summary


class ConformalityReport(BaseModel):
    """Per-block defect, conformal factor and invariance sequences over trials"""
    horizons: List[int] = Field(description="Horizons n")
    dims: List[int] = Field(description="Block dimensions")
    defects: List[List[List[float]]] = Field(description="[block][trial][horizon] conformality defect D_n")
    log_factors: List[List[List[float]]] = Field(description="[block][trial][horizon] log conformal factor of A^n on the block")
    residuals: List[List[List[float]]] = Field(description="[block][trial][horizon] invariance residual")
    tightness: List[Optional[TightnessResult]] = Field(description="Schmidt tightness per block")
    forms: List[Optional[InvariantFormEstimate]] = Field(description="Invariant form per TIGHT block (first trial)")
    failures: int = Field(description="Trials dropped as degenerate samples")
    flagged: int = Field(description="Block restrictions above the invariance threshold")


def _series_trial(trial: int, system: CocycleSystem, multiplicities: Tuple[int, ...], seed: int,
                  horizons: List[int], flag_horizon: int, angle_tol: float) -> Optional[dict]:
    word = sample_word(system, seed, trial, horizons[-1] + flag_horizon, "two-sided", past=flag_horizon)
    x0 = trial_start(system, seed, trial)
    try:
        series = block_series(system, word, x0, multiplicities, horizons, flag_horizon, angle_tol)
    except DegenerateSampleError as e:
        logger.warning(f"trial {trial} dropped: {e}")
        return None
    return {
        "defects": [series.defects(ell) for ell in range(len(multiplicities))],
        "log_factors": [[r.log_factor for r in row] for row in series.restrictions],
        "residuals": [[r.residual for r in row] for row in series.restrictions],
        "normalized": [[r.normalized for r in row] for row in series.restrictions],
    }


def conformality_report(system: CocycleSystem, report: LyapunovReport, horizons: Sequence[int], n_trials: int,
                        seed: int, flag_horizon: int, angle_tol: float = BLOCK_ANGLE_TOL,
                        workers: int = 0) -> ConformalityReport:
    """
    Conformality defects per Lyapunov block over independent two-sided paths,
    with the tightness verdict and, for TIGHT blocks, the invariant form.
    """
    m = tuple(report.multiplicities)
    horizons = [int(h) for h in horizons]
    worker = partial(_series_trial, system=system, multiplicities=m, seed=seed, horizons=horizons,
                     flag_horizon=flag_horizon, angle_tol=angle_tol)
    results = [r for r in run_trials(worker, range(n_trials), workers) if r is not None]
    if not results:
        raise DegenerateSampleError("every trial produced a degenerate sample")
    k = len(m)
    defects = [[r["defects"][ell] for r in results] for ell in range(k)]
    tightness, forms = [], []
    for ell in range(k):
        try:
            verdict = schmidt_tightness(defects[ell], horizons)
        except InvalidInputError as e:
            logger.warning(f"block {ell + 1}: {e}")
            verdict = None
        tightness.append(verdict)
        form = None
        if verdict is not None and verdict.verdict == "TIGHT":
            try:
                form = estimate_invariant_form(results[0]["normalized"][ell], horizons)
            except ConvergenceError as e:
                logger.warning(f"block {ell + 1}: {e}")
        forms.append(form)
    flagged = sum(int(x > INVARIANCE_TOL) for r in results for row in r["residuals"] for x in row)
    return ConformalityReport(
        horizons=horizons,
        dims=list(m),
        defects=defects,
        log_factors=[[r["log_factors"][ell] for r in results] for ell in range(k)],
        residuals=[[r["residuals"][ell] for r in results] for ell in range(k)],
        tightness=tightness,
        forms=forms,
        failures=n_trials - len(results),
        flagged=flagged,
    )
