"""Resource accounting and report serialization.

Static memory estimates are closed-form: 4 bytes per f32 parameter, plus
8 bytes per trainable parameter for the two optimizer moments (12 bytes per
trainable parameter total); the embedding table costs classes * dim * 4
regardless of how deep or wide the teacher that produced it was.

Measured peaks come from a sampling high-water-mark accumulator over the
process resident set (``/proc/self/statm``), maintained as a single atomic
maximum while the run executes. ``ru_maxrss`` is the fallback where procfs
is unavailable; it is process-lifetime (inherited across exec), so the
sampler is preferred. With neither source the profile is estimate-only.
"""
from __future__ import annotations

import csv
import json
import os
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

from .errors import ConfigurationError
from .model import param_count
from .trainer import ExperimentConfig, TrainingReport

try:
    import resource as _resource
except ImportError:  # non-POSIX platform
    _resource = None

try:
    _PAGE_SIZE = os.sysconf("SC_PAGE_SIZE")
except (AttributeError, ValueError, OSError):
    _PAGE_SIZE = 4096

BYTES_PER_PARAM = 4
OPTIMIZER_BYTES_PER_PARAM = 8  # two f32 moments

CSV_COLUMNS = ["epoch", "loss_total", "loss_ce", "loss_kd", "loss_clip", "val_accuracy", "lr"]

T = TypeVar("T")


@dataclass
class ResourceProfile:
    """Peak memory and wall time for one run, with a static breakdown."""

    mode: str
    wall_seconds: float
    bytes_model_params: Dict[str, int] = field(default_factory=dict)
    peak_bytes_measured: Optional[int] = None
    estimate_only: bool = False

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "wall_seconds": self.wall_seconds,
            "bytes_model_params": self.bytes_model_params,
            "peak_bytes_measured": self.peak_bytes_measured,
            "estimate_only": self.estimate_only,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ResourceProfile":
        return cls(
            mode=payload["mode"],
            wall_seconds=payload["wall_seconds"],
            bytes_model_params=dict(payload["bytes_model_params"]),
            peak_bytes_measured=payload["peak_bytes_measured"],
            estimate_only=payload["estimate_only"],
        )


def static_memory_estimate(
    config: ExperimentConfig, teacher_embed_dim: Optional[int] = None
) -> Dict[str, int]:
    """Closed-form parameter-memory breakdown for the roles the mode uses.

    Trainable roles (student, projection) cost ``params * 12`` bytes
    (weights plus two optimizer moments); the frozen teacher costs
    ``params * 4``; the embedding table costs ``classes * dim * 4``.
    """
    config.validate()
    d_t = teacher_embed_dim
    if d_t is None and config.teacher is not None:
        d_t = config.teacher.embed_dim
    student_params = param_count(config.student)
    trainable = BYTES_PER_PARAM + OPTIMIZER_BYTES_PER_PARAM
    breakdown = {"student": student_params * trainable}
    if config.mode in ("regular-kd", "clip-teacher"):
        if config.teacher is None:
            raise ConfigurationError("teacher config required to estimate teacher memory")
        breakdown["teacher"] = param_count(config.teacher) * BYTES_PER_PARAM
    if config.mode in ("clip-teacher", "clip-embed"):
        if d_t is None:
            raise ConfigurationError(
                "teacher embedding width unknown; pass teacher_embed_dim or set a teacher config"
            )
        breakdown["projection"] = config.student.embed_dim * d_t * trainable
    if config.mode == "clip-embed":
        breakdown["embedding_table"] = config.student.num_classes * d_t * BYTES_PER_PARAM
    return breakdown


def _current_rss_bytes() -> Optional[int]:
    try:
        with open("/proc/self/statm") as fh:
            return int(fh.read().split()[1]) * _PAGE_SIZE
    except (OSError, ValueError, IndexError):
        return None


def _lifetime_peak_rss_bytes() -> Optional[int]:
    if _resource is None:
        return None
    peak = _resource.getrusage(_resource.RUSAGE_SELF).ru_maxrss
    # Linux reports kilobytes, macOS bytes
    return peak if sys.platform == "darwin" else peak * 1024


class _RssHighWaterMark:
    """Background sampler keeping the max resident-set size seen so far."""

    def __init__(self, interval: float = 0.005):
        self.interval = interval
        self.peak = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def sample(self) -> None:
        rss = _current_rss_bytes()
        if rss is not None and rss > self.peak:
            self.peak = rss

    def _loop(self) -> None:
        while not self._stop.is_set():
            self.sample()
            self._stop.wait(self.interval)

    def start(self) -> bool:
        if _current_rss_bytes() is None:
            return False
        self.sample()
        self._thread.start()
        return True

    def stop(self) -> int:
        self._stop.set()
        self._thread.join()
        self.sample()
        return self.peak


def measure_run(
    fn: Callable[[], T],
    mode: str,
    bytes_model_params: Optional[Dict[str, int]] = None,
) -> Tuple[T, ResourceProfile]:
    """Execute ``fn`` and record wall time and the resident-memory peak.

    The peak is the high-water mark observed while ``fn`` ran; for a
    dedicated training process that is the whole-run peak. Without procfs
    the process-lifetime ``ru_maxrss`` stands in, and with no instrumentation
    at all the profile is marked estimate-only.
    """
    sampler = _RssHighWaterMark()
    sampled = sampler.start()
    start = time.perf_counter()
    try:
        result = fn()
    finally:
        wall = time.perf_counter() - start
        peak = sampler.stop() if sampled else None
    profile = ResourceProfile(
        mode=mode,
        wall_seconds=wall,
        bytes_model_params=dict(bytes_model_params or {}),
    )
    if sampled:
        profile.peak_bytes_measured = peak
    else:
        fallback = _lifetime_peak_rss_bytes()
        profile.peak_bytes_measured = fallback
        profile.estimate_only = fallback is None
    return result, profile


def write_report(report: TrainingReport, profile: ResourceProfile, out_dir: str) -> Tuple[str, str]:
    """Emit ``metrics.csv`` and ``report.json`` under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for record in report.epochs:
            row = record.to_dict()
            writer.writerow("" if row[col] is None else row[col] for col in CSV_COLUMNS)
    json_path = os.path.join(out_dir, "report.json")
    payload = report.to_dict()
    payload["resource_profile"] = profile.to_dict()
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return csv_path, json_path


def read_report(path: str) -> Tuple[TrainingReport, ResourceProfile]:
    with open(path) as fh:
        payload = json.load(fh)
    profile = ResourceProfile.from_dict(payload.pop("resource_profile"))
    return TrainingReport.from_dict(payload), profile


def read_metrics_csv(path: str) -> List[dict]:
    """Parse metrics.csv back into typed rows (empty cells become None)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for raw in reader:
            row = {}
            for col in CSV_COLUMNS:
                value = raw[col]
                if value == "":
                    row[col] = None
                elif col == "epoch":
                    row[col] = int(value)
                else:
                    row[col] = float(value)
            rows.append(row)
    return rows


def reports_table(paths: Sequence[str]) -> str:
    """Side-by-side resource comparison of several report.json files.

    The memory ratio column divides each run's peak by the smallest measured
    peak among the listed runs.
    """
    rows = []
    for path in paths:
        report, profile = read_report(path)
        rows.append(
            {
                "run": report.config.get("run_name", "?"),
                "mode": report.mode,
                "final_acc": report.final_accuracy,
                "wall_s": report.wall_seconds,
                "peak_bytes": profile.peak_bytes_measured,
            }
        )
    measured = [r["peak_bytes"] for r in rows if r["peak_bytes"]]
    floor = min(measured) if measured else None
    header = f"{'run':<24} {'mode':<16} {'final_acc':>9} {'wall_s':>9} {'peak_mb':>9} {'mem_ratio':>9}"
    lines = [header, "-" * len(header)]
    for r in rows:
        peak = r["peak_bytes"]
        peak_mb = f"{peak / 1e6:.1f}" if peak else "-"
        ratio = f"{peak / floor:.2f}" if peak and floor else "-"
        lines.append(
            f"{r['run']:<24} {r['mode']:<16} {r['final_acc']:>9.4f} {r['wall_s']:>9.2f} "
            f"{peak_mb:>9} {ratio:>9}"
        )
    return "\n".join(lines)
