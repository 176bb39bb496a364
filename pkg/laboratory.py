"""
Experiment orchestration for the cocycle lab
"""

import time
from typing import Any, Dict, Optional

from loguru import logger

from cocyclelab.configs import VERSION
from cocyclelab.data_manager import DataManager, data_manager
from cocyclelab.experiments import HANDLERS
from cocyclelab.parallel import set_default_workers
from cocyclelab.scenarios import ScenarioConfig, build_system, scenario_digest


class ExperimentManager:
    """Runs the experiments of a scenario and writes the report and curves"""

    def __init__(self, data: Optional[DataManager] = None):
        self.data = data or data_manager
        self.experiment_mapping = dict(HANDLERS)

    def run(self, config: ScenarioConfig, seed: Optional[int] = None, workers: Optional[int] = None) -> Dict[str, Any]:
        """
        Execute every experiment of the scenario in order.

        Args:
            config: validated scenario
            seed: overrides the scenario seed
            workers: overrides the scenario worker count

        Returns:
            the report dict; it is also written to <out>/<scenario>/report.json

        Raises:
            ConfigError: when the scenario does not build into a valid system
        """
        system = build_system(config)
        seed = config.seed if seed is None else int(seed)
        set_default_workers(config.workers if workers is None else workers)
        context: Dict[str, Any] = {}
        experiments, failures = [], []
        timing = {}
        started = time.perf_counter()

        for index, exp in enumerate(config.experiments):
            handler = self.experiment_mapping[exp.kind]
            logger.info(f"[{config.name}] running {exp.kind}")
            t0 = time.perf_counter()
            result = handler(system, exp, seed, context)
            timing[f"{index}:{exp.kind}"] = time.perf_counter() - t0
            for name, curve in result.pop("curves", {}).items():
                self.data.save_curve(config.name, exp.kind, name, curve["horizons"], curve["values"])
            if result["status"] != "success":
                failures.append({"experiment": exp.kind, "message": result.get("error", result["message"])})
                logger.warning(f"[{config.name}] {exp.kind} failed: {result['message']}")
            experiments.append({"kind": exp.kind, **result})

        if "cloud" in context:
            self.data.save_cloud(config.name, context["cloud"])
        report = {
            "scenario": config.name,
            "digest": scenario_digest(config),
            "seed": seed,
            "version": VERSION,
            "workers_independent": True,
            "experiments": experiments,
            "failures": failures,
        }
        self.data.save_report(config.name, report)
        timing["total"] = time.perf_counter() - started
        self.data.save_timing(config.name, timing)
        logger.info(f"[{config.name}] finished in {timing['total']:.1f}s with {len(failures)} failures")
        return report
