"""
Experiment handlers

Each handler runs one experiment kind on a built system and returns a
status record. Failures are logged and returned as
{"status": "error", "message": ..., "error": ...} so that a run always
produces a (possibly partial) report. Results shared between experiments
(the exponent report, the stationary cloud) are kept in `context`.

Curves go under the "curves" key as {name: {"horizons": [...], "values": [...]}};
the caller writes them out as CSV files.
"""

from typing import Any, Callable, Dict

import numpy as np
from loguru import logger

from .boundary import identity_suite
from .configs import PULLBACK_DISTANCE, PULLBACK_MASS, TRACKING_RELATIVE_DEFECT, W0_FRACTION
from .errors import ExperimentError
from .oseledets import (
    LyapunovReport,
    classify_degenerate_roots,
    estimate_exponents,
    forward_flag,
    geodesic_tracking,
    trial_start,
    two_sided_blocks,
)
from .scenarios import ExperimentConfig
from .stationary import (
    MeasureCloud,
    atom_test,
    contraction_profile,
    furstenberg_check,
    pullback_limit,
    regularity_scan,
    simulate_stationary,
    stationarity_spread,
)
from .structure import conformality_report, transversality, transversality_survey, verify_conjugation
from .walk import CocycleSystem, sample_word

IDENTITY_TOL = 1e-9
DEFICIT_RATIO_LIMIT = 1.5

Handler = Callable[[CocycleSystem, ExperimentConfig, int, Dict[str, Any]], Dict[str, Any]]


def _curve(horizons, values) -> Dict[str, list]:
    return {"horizons": [float(h) if isinstance(h, float) else int(h) for h in horizons],
            "values": [float(v) for v in values]}


def _checked(report: LyapunovReport) -> LyapunovReport:
    if not np.all(np.isfinite(report.exponents)):
        raise ExperimentError(f"non-finite exponent estimate {report.exponents}")
    return report


def _exponent_report(system: CocycleSystem, exp: ExperimentConfig, seed: int, context: Dict[str, Any]) -> LyapunovReport:
    if "report" not in context:
        context["report"] = _checked(estimate_exponents(system, exp.n_steps, exp.n_trials, seed, exp.cluster_tol))
    return context["report"]


def _cloud(system: CocycleSystem, exp: ExperimentConfig, seed: int, context: Dict[str, Any]) -> MeasureCloud:
    if "cloud" not in context:
        context["cloud"] = simulate_stationary(system, exp.burn_in, exp.n_samples, seed, init=exp.init)
    return context["cloud"]


def _flag_horizons(flag_horizon: int):
    return sorted({max(1, flag_horizon // 10), flag_horizon})


def run_exponents(system: CocycleSystem, exp: ExperimentConfig, seed: int, context: Dict[str, Any]) -> Dict[str, Any]:
    """
    Forward and backward exponents, root rates and the degenerate root sets.

    Returns:
        status record with the forward report, backward exponents and the
        antisymmetry residual max |lambda^-_i + lambda^+_(n+1-i)|
    """
    try:
        report = _checked(estimate_exponents(system, exp.n_steps, exp.n_trials, seed, exp.cluster_tol))
        context["report"] = report
        backward = estimate_exponents(system, exp.n_steps, exp.n_trials, seed, exp.cluster_tol,
                                      orientation="backward")
        antisymmetry = float(np.max(np.abs(np.asarray(backward.exponents) + np.asarray(report.exponents)[::-1])))
        spec, dual = classify_degenerate_roots(report)
        return {
            "status": "success",
            "message": f"exponents {np.round(report.exponents, 4).tolist()}",
            "report": report.model_dump(),
            "backward": backward.model_dump(),
            "antisymmetry_residual": antisymmetry,
            "degenerate_roots": sorted(spec.roots),
            "dual_roots": sorted(dual.roots),
        }
    except Exception as e:
        logger.error(f"Error in exponents experiment: {e}")
        return {"status": "error", "message": "exponent estimation failed", "error": str(e)}


def run_flags(system: CocycleSystem, exp: ExperimentConfig, seed: int, context: Dict[str, Any]) -> Dict[str, Any]:
    """Flags on one path, their Bruhat position, and the survey over n_paths paths"""
    try:
        report = _exponent_report(system, exp, seed, context)
        word = sample_word(system, seed, 0, exp.flag_horizon, "two-sided")
        x0 = trial_start(system, seed, 0)
        vplus, vminus, blocks = two_sided_blocks(system, word, x0, 0, report.multiplicities, exp.flag_horizon,
                                                 exp.angle_tol)
        position = transversality(vplus, vminus)
        survey = transversality_survey(system, report, exp.n_paths, seed, exp.flag_horizon, exp.angle_tol)
        generic = survey["w0_fraction"] >= W0_FRACTION
        return {
            "status": "success" if generic else "error",
            "message": f"position {position.label}, w0 on {survey['w0_count']}/{survey['paths']} paths"
                       + ("" if generic else f" (below {W0_FRACTION:.0%})"),
            "multiplicities": list(report.multiplicities),
            "forward_residuals": vplus.residuals,
            "backward_residuals": vminus.residuals,
            "converged": vplus.converged and vminus.converged,
            "block_margin": blocks.margin,
            "transversality": position.model_dump(),
            "survey": survey,
        }
    except Exception as e:
        logger.error(f"Error in flags experiment: {e}")
        return {"status": "error", "message": "flag estimation failed", "error": str(e)}


def run_blocks(system: CocycleSystem, exp: ExperimentConfig, seed: int, context: Dict[str, Any]) -> Dict[str, Any]:
    """Block dimensions over sampled paths and the conjugation residual along one path"""
    try:
        report = _exponent_report(system, exp, seed, context)
        survey = transversality_survey(system, report, exp.n_paths, seed, exp.flag_horizon, exp.angle_tol)
        word = sample_word(system, seed, 0, exp.horizons[-1] + exp.flag_horizon, "two-sided", past=exp.flag_horizon)
        x0 = trial_start(system, seed, 0)
        conjugation = verify_conjugation(system, word, x0, report.multiplicities, exp.horizons, exp.flag_horizon,
                                         exp.angle_tol, report=report)
        curves = {"orthogonality_residual": _curve(conjugation["horizons"], conjugation["orthogonality_residuals"])}
        for ell in range(len(report.multiplicities)):
            curves[f"block{ell + 1}_scalar_rate"] = _curve(conjugation["horizons"],
                                                          [row[ell] for row in conjugation["scalar_rates"]])
        consistent = conjugation["gaps_consistent"]
        return {
            "status": "success" if consistent else "error",
            "message": f"expected block dimensions on {survey['block_dimension_ok']}/{survey['paths']} paths"
                       + ("" if consistent else ", block rate gaps disagree with the exponent gaps"),
            "dims": list(report.multiplicities),
            "survey": survey,
            "conjugation": conjugation,
            "curves": curves,
        }
    except Exception as e:
        logger.error(f"Error in blocks experiment: {e}")
        return {"status": "error", "message": "block decomposition failed", "error": str(e)}


def run_conformality(system: CocycleSystem, exp: ExperimentConfig, seed: int, context: Dict[str, Any]) -> Dict[str, Any]:
    """Defect sequences per block with the tightness verdict and invariant forms"""
    try:
        report = _exponent_report(system, exp, seed, context)
        result = conformality_report(system, report, exp.horizons, exp.n_trials, seed, exp.flag_horizon, exp.angle_tol)
        verdicts = [t.verdict if t is not None else "INCONCLUSIVE" for t in result.tightness]
        curves = {}
        for ell, defects in enumerate(result.defects):
            curves[f"block{ell + 1}_median_defect"] = _curve(result.horizons, np.median(defects, axis=0))
        return {
            "status": "success",
            "message": f"tightness verdicts {verdicts}",
            "verdicts": verdicts,
            "conformality": result.model_dump(),
            "curves": curves,
        }
    except Exception as e:
        logger.error(f"Error in conformality experiment: {e}")
        return {"status": "error", "message": "conformality study failed", "error": str(e)}


def run_stationary(system: CocycleSystem, exp: ExperimentConfig, seed: int, context: Dict[str, Any]) -> Dict[str, Any]:
    """Stationary cloud, its diagnostics, pullback concentration and forward contraction"""
    try:
        report = _exponent_report(system, exp, seed, context)
        cloud = simulate_stationary(system, exp.burn_in, exp.n_samples, seed, init=exp.init)
        context["cloud"] = cloud
        spread = stationarity_spread(system, exp.burn_in, max(2, exp.n_samples // 4), seed)
        length = max(exp.horizons[-1], exp.flag_horizon)
        word = sample_word(system, seed, 0, length, "forward")
        x0 = trial_start(system, seed, 0)
        reference = None
        if len(report.multiplicities) > 1:
            reference = forward_flag(system, word, x0, _flag_horizons(exp.flag_horizon), report=report)
        pullback = pullback_limit(system, cloud, word, x0, exp.horizons, exp.ball_eps, reference=reference)
        contraction = contraction_profile(system, word, x0, cloud, exp.horizons, exp.ball_eps)
        curves = {
            "pullback_mass": _curve(pullback["horizons"], pullback["masses"]),
            "contraction_mass": _curve(contraction["horizons"], contraction["masses"]),
        }
        if reference is not None:
            curves["pullback_reference_distance"] = _curve(pullback["horizons"], pullback["reference_distances"])
        pullback.pop("centers")
        problems = [] if cloud.stationary else ["NOT-STATIONARY cloud"]
        if reference is not None:
            if pullback["masses"][-1] < PULLBACK_MASS:
                problems.append(f"pullback mass {pullback['masses'][-1]:.3f} below {PULLBACK_MASS}")
            if pullback["reference_distances"][-1] > PULLBACK_DISTANCE:
                problems.append(f"pullback centre {pullback['reference_distances'][-1]:.3g} from the forward flag")
        return {
            "status": "error" if problems else "success",
            "message": "; ".join(problems) if problems else "cloud passed the stationarity diagnostic",
            "n_samples": len(cloud),
            "stationary": cloud.stationary,
            "diagnostic": cloud.diagnostic,
            "spread": spread,
            "pullback": pullback,
            "contraction": contraction,
            "curves": curves,
        }
    except Exception as e:
        logger.error(f"Error in stationary experiment: {e}")
        return {"status": "error", "message": "stationary sampling failed", "error": str(e)}


def run_regularity(system: CocycleSystem, exp: ExperimentConfig, seed: int, context: Dict[str, Any]) -> Dict[str, Any]:
    try:
        cloud = _cloud(system, exp, seed, context)
        scan = regularity_scan(cloud, exp.eps, exp.n_g, seed)
        atom = atom_test(cloud, exp.eps)
        return {
            "status": "success",
            "message": f"atom verdict {atom.verdict}",
            "regularity": scan.model_dump(),
            "atom": atom.model_dump(),
            "curves": {
                "worst_mass": _curve(scan.eps, scan.masses),
                "largest_ball_mass": _curve(atom.radii, atom.masses),
            },
        }
    except Exception as e:
        logger.error(f"Error in regularity experiment: {e}")
        return {"status": "error", "message": "regularity scan failed", "error": str(e)}


def run_furstenberg(system: CocycleSystem, exp: ExperimentConfig, seed: int, context: Dict[str, Any]) -> Dict[str, Any]:
    try:
        report = _exponent_report(system, exp, seed, context)
        cloud = _cloud(system, exp, seed, context)
        check = furstenberg_check(system, cloud, report, exp.n_mc, seed)
        return {
            "status": "success" if check["consistent"] else "error",
            "message": f"max z-score {check['max_z']:.2f}",
            "furstenberg": check,
        }
    except Exception as e:
        logger.error(f"Error in furstenberg experiment: {e}")
        return {"status": "error", "message": "boundary integral check failed", "error": str(e)}


def run_tracking(system: CocycleSystem, exp: ExperimentConfig, seed: int, context: Dict[str, Any]) -> Dict[str, Any]:
    try:
        report = _exponent_report(system, exp, seed, context)
        word = sample_word(system, seed, 0, exp.horizons[-1], "forward")
        tracking = geodesic_tracking(system, word, trial_start(system, seed, 0), exp.horizons, report)
        norm = tracking["lambda_norm"]
        relative = [d / norm if norm > 0 else float("inf") for d in tracking["defects"]]
        tracking["relative_defects"] = relative
        tracked = relative[-1] <= TRACKING_RELATIVE_DEFECT
        return {
            "status": "success" if tracked else "error",
            "message": f"defect/n at n={exp.horizons[-1]}: {tracking['defects'][-1]:.4g}"
                       + ("" if tracked else f", above {TRACKING_RELATIVE_DEFECT} of |lambda|"),
            "tracking": tracking,
            "curves": {"defect_per_step": _curve(tracking["horizons"], tracking["defects"])},
        }
    except Exception as e:
        logger.error(f"Error in tracking experiment: {e}")
        return {"status": "error", "message": "geodesic tracking failed", "error": str(e)}


def run_identities(system: CocycleSystem, exp: ExperimentConfig, seed: int, context: Dict[str, Any]) -> Dict[str, Any]:
    try:
        suite = identity_suite(system.n, exp.n_samples_identities, seed)
        checks = {
            key: suite[key] <= IDENTITY_TOL
            for key in ("kak_residual", "trace_residual", "roots_in_weights_residual", "subadditivity_violation",
                        "lower_subadditivity_violation", "k_invariance_residual", "xi_cocycle_residual",
                        "xi_wedge_cocycle_residual", "xi_route_residual", "sigma_cocycle_residual")
        }
        checks["xi_upper_violations"] = suite["xi_upper_violations"] == 0
        checks["bound_deficit_ratio"] = suite["bound_deficit_ratio"] <= DEFICIT_RATIO_LIMIT
        passed = all(checks.values())
        return {
            "status": "success" if passed else "error",
            "message": "all identities hold" if passed else f"failed: {[k for k, ok in checks.items() if not ok]}",
            "residuals": suite,
            "checks": checks,
        }
    except Exception as e:
        logger.error(f"Error in identities experiment: {e}")
        return {"status": "error", "message": "identity suite failed", "error": str(e)}


FULL_REPORT_ORDER = ("exponents", "flags", "blocks", "conformality", "stationary", "regularity", "furstenberg",
                     "tracking")


def run_full_report(system: CocycleSystem, exp: ExperimentConfig, seed: int, context: Dict[str, Any]) -> Dict[str, Any]:
    """Every experiment kind except the identity suite, sharing one context"""
    results, curves = {}, {}
    for kind in FULL_REPORT_ORDER:
        result = HANDLERS[kind](system, exp, seed, context)
        for name, curve in result.pop("curves", {}).items():
            curves[f"{kind}_{name}"] = curve
        results[kind] = result
    failed = [k for k, r in results.items() if r["status"] != "success"]
    return {
        "status": "error" if failed else "success",
        "message": f"failed: {failed}" if failed else "all experiments succeeded",
        "experiments": results,
        "curves": curves,
    }


HANDLERS: Dict[str, Handler] = {
    "exponents": run_exponents,
    "flags": run_flags,
    "blocks": run_blocks,
    "conformality": run_conformality,
    "stationary": run_stationary,
    "regularity": run_regularity,
    "furstenberg": run_furstenberg,
    "tracking": run_tracking,
    "identities": run_identities,
    "full-report": run_full_report,
}
