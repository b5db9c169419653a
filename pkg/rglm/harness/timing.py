"""Wall-time and memory overhead of training configurations."""

from __future__ import annotations

import gc
import logging
import time
from typing import Sequence

import numpy as np
import psutil

from rglm.config import TrainConfig
from rglm.harness.trainer import Dataset, prepare_data, train

logger = logging.getLogger(__name__)

TIMING_FIELDS = ["variant", "setting", "seconds_per_epoch", "seconds_per_epoch_std", "repeats",
                 "memory_before_mb", "memory_after_mb", "memory_delta_mb", "peak_memory_note"]


class TimingAnalyzer:
    """Measures training runs with the process's resident set size before and after."""

    def __init__(self):
        self.process = psutil.Process()
        self.stats = {"runs": 0, "seconds": 0.0}

    def rss_mb(self) -> float:
        return self.process.memory_info().rss / 1024 / 1024

    def measure(self, cfg: TrainConfig, data: Dataset | None = None) -> dict:
        gc.collect()
        before = self.rss_mb()
        start = time.perf_counter()
        result = train(cfg, data=data)
        elapsed = time.perf_counter() - start
        after = self.rss_mb()
        self.stats["runs"] += 1
        self.stats["seconds"] += elapsed
        return {
            "seconds_per_epoch": elapsed / cfg.epochs,
            "memory_before": before,
            "memory_after": after,
            "note": result.summary["peak_memory_note"],
        }


def timing_report(cfgs: Sequence[TrainConfig], repeats: int = 2, labels: Sequence[str] | None = None) -> list[dict]:
    """One row per configuration: mean and std of seconds per epoch over ``repeats``."""
    analyzer = TimingAnalyzer()
    rows = []
    for i, cfg in enumerate(cfgs):
        data = prepare_data(cfg)
        samples = [analyzer.measure(cfg, data) for _ in range(max(1, repeats))]
        seconds = [s["seconds_per_epoch"] for s in samples]
        rows.append({
            "variant": cfg.variant,
            "setting": labels[i] if labels else cfg.variant,
            "seconds_per_epoch": float(np.mean(seconds)),
            "seconds_per_epoch_std": float(np.std(seconds)),
            "repeats": len(samples),
            "memory_before_mb": samples[0]["memory_before"],
            "memory_after_mb": samples[-1]["memory_after"],
            "memory_delta_mb": samples[-1]["memory_after"] - samples[0]["memory_before"],
            "peak_memory_note": samples[-1]["note"],
        })
        logger.info("Timing: %s %.3fs/epoch", rows[-1]["setting"], rows[-1]["seconds_per_epoch"])
    return rows


def overhead_ratios(rows: Sequence[dict]) -> dict[str, float]:
    """Seconds per epoch of each row relative to the vanilla row."""
    base = next((r["seconds_per_epoch"] for r in rows if r["variant"] == "vanilla"), None)
    if not base:
        return {}
    return {r["setting"]: r["seconds_per_epoch"] / base for r in rows}
