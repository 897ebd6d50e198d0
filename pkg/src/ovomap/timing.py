"""Per-keyframe stage timing and the benchmark summary table.

Stages follow the pipeline: Seg (mask/embedding acquisition), M&T (matching
and tracking), PP (geometry preprocessing), CLIP (descriptor extraction and
fusion).  Seconds-per-keyframe adds the residual loop overhead on top of the
stage times.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

STAGES = ("Seg", "M&T", "PP", "CLIP")


class TimingReport:
    """Accumulates stage seconds per keyframe; thread safe."""

    def __init__(self):
        self._lock = threading.Lock()
        self._stages: dict[int, dict[str, float]] = {}
        self._totals: dict[int, float] = {}

    def keyframes(self) -> list[int]:
        with self._lock:
            keys = set(self._stages) | set(self._totals)
        return sorted(keys)

    def stage_seconds(self, keyframe: int, stage: str) -> float:
        with self._lock:
            return self._stages.get(keyframe, {}).get(stage, 0.0)

    def record_stage(self, keyframe: int, stage: str, seconds: float) -> None:
        """Add seconds to a stage (repeated calls accumulate)."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
        if seconds < 0:
            raise ValueError("seconds must be >= 0")
        with self._lock:
            self._stages.setdefault(keyframe, {})
            self._stages[keyframe][stage] = self._stages[keyframe].get(stage, 0.0) + seconds

    def record_total(self, keyframe: int, seconds: float) -> None:
        """Record the measured wall time of a whole keyframe iteration."""
        if seconds < 0:
            raise ValueError("seconds must be >= 0")
        with self._lock:
            self._totals[keyframe] = self._totals.get(keyframe, 0.0) + seconds

    def finalize(self) -> "TimingSummary":
        """Sequence averages.

        A keyframe's s/KF is its recorded total (at least the stage sum, so
        asynchronous attribution can never push it below the work actually
        done) or the plain stage sum when no total was recorded.
        """
        kfs = self.keyframes()
        with self._lock:
            stage_means = {}
            for stage in STAGES:
                vals = [self._stages.get(k, {}).get(stage, 0.0) for k in kfs]
                stage_means[stage] = sum(vals) / len(vals) if vals else 0.0
            per_kf = []
            for k in kfs:
                ssum = sum(self._stages.get(k, {}).values())
                per_kf.append(max(self._totals.get(k, 0.0), ssum))
            mean_total = sum(per_kf) / len(per_kf) if per_kf else 0.0
        return TimingSummary(
            num_keyframes=len(kfs),
            stage_means=stage_means,
            seconds_per_keyframe=mean_total,
        )


@dataclass(frozen=True)
class TimingSummary:
    num_keyframes: int
    stage_means: dict[str, float]
    seconds_per_keyframe: float

    def columns(self) -> list[str]:
        return [f"{s} [s]" for s in STAGES] + ["s/KF"]

    def row(self) -> list[float]:
        return [self.stage_means[s] for s in STAGES] + [self.seconds_per_keyframe]

    def format_table(self) -> str:
        """Five-column benchmark table: one row of sequence averages."""
        header = " | ".join(f"{c:>9}" for c in self.columns())
        rule = "-+-".join("-" * 9 for _ in self.columns())
        row = " | ".join(f"{v:9.3f}" for v in self.row())
        return "\n".join([header, rule, row])

    def to_dict(self) -> dict:
        return {
            "num_keyframes": self.num_keyframes,
            "stage_means": {k: float(v) for k, v in self.stage_means.items()},
            "seconds_per_keyframe": float(self.seconds_per_keyframe),
        }
