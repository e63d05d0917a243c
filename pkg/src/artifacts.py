"""Run artifacts: CSV tables, text report and resolved config, plus reading them back for comparison."""

import json
import logging
from collections.abc import Sequence
from itertools import accumulate
from pathlib import Path
from typing import Any

import pandas as pd
from pydantic import ValidationError

from src.config import ScenarioConfig
from src.simulation import ComparisonReport, Metrics, RoutingEvent, TravelRecord

logger = logging.getLogger(__name__)

TRAVEL_TIMES = "travel_times.csv"
TOTALS_VS_N = "totals_vs_n.csv"
COMPUTATIONS = "computations.csv"
REPORT = "report.txt"
RESOLVED_CONFIG = "resolved_config.json"
RUN_LOG = "run.log"
COMPARISON = "comparison.csv"
COMPARISON_REPORT = "comparison.txt"
COMPARISON_COMPUTATIONS = "comparison_computations.csv"
REJECTED = "rejected.csv"

TRAVEL_TIMES_COLUMNS = ["cav_id", "t_start", "t_finish", "travel_time"]
TOTALS_COLUMNS = ["n", "cumulative_total"]
COMPUTATIONS_COLUMNS = ["event_index", "n_cavs", "evaluations", "m_pow_n"]
COMPARISON_COLUMNS = ["n", "total_a", "total_b", "difference"]
REJECTED_COLUMNS = ["cav_id"]
COMPARISON_COMPUTATIONS_COLUMNS = [
    "run", "event_index", "n_cavs", "evaluations", "cumulative_evaluations", "m_pow_n", "cumulative_m_pow_n",
]

FLOAT_FORMAT = "%.6f"


class ArtifactError(ValueError):
    """Raised when a run directory is missing files or holds malformed tables."""


def _write_table(path: Path, frame: pd.DataFrame) -> Path:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="")
    return path


def write_run_artifacts(out_dir: str | Path, metrics: Metrics, resolved_config: dict[str, Any]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    records = sorted(metrics.travel.values(), key=lambda r: r.cav_id)
    travel = pd.DataFrame(
        [(r.cav_id, r.t_start, r.t_finish, r.travel_time) for r in records],
        columns=TRAVEL_TIMES_COLUMNS,
    )
    totals = pd.DataFrame(metrics.cumulative_totals(), columns=TOTALS_COLUMNS)
    computations = pd.DataFrame(
        [(e.event_index, e.n_cavs, e.evaluations, str(e.m_pow_n)) for e in metrics.routing_events],
        columns=COMPUTATIONS_COLUMNS,
    )
    rejected = pd.DataFrame([(cav_id,) for cav_id in metrics.rejected], columns=REJECTED_COLUMNS)

    written = [
        _write_table(out / TRAVEL_TIMES, travel),
        _write_table(out / TOTALS_VS_N, totals),
        _write_table(out / COMPUTATIONS, computations),
        _write_table(out / REJECTED, rejected),
    ]

    config_path = out / RESOLVED_CONFIG
    config_path.write_text(json.dumps(resolved_config, indent=2, sort_keys=True) + "\n")
    written.append(config_path)

    report_path = out / REPORT
    report_path.write_text(render_report(metrics))
    written.append(report_path)

    logger.info("Wrote %d artifacts to %s", len(written), out)
    return written


def render_report(metrics: Metrics) -> str:
    lines = [
        f"mode: {metrics.mode}",
        f"scenario: {metrics.fingerprint}",
        f"trips submitted: {metrics.trips_submitted}",
        f"trips completed: {len(metrics.travel)}",
        f"trips rejected: {len(metrics.rejected)}",
        f"total travel time: {metrics.total_travel_time:.6f}",
        f"predictions: {metrics.evaluations}",
        f"route changes: {metrics.reroute_changes}",
        f"stalls: {metrics.stalls}",
        f"safety audit issues: {len(metrics.audit_issues)}",
    ]
    if metrics.rejected:
        lines.append("rejected CAVs: " + ", ".join(str(cav_id) for cav_id in metrics.rejected))
    return "\n".join(lines) + "\n"


def _read_table(path: Path, columns: list[str]) -> pd.DataFrame:
    if not path.is_file():
        raise ArtifactError(f"{path}: missing")
    try:
        frame = pd.read_csv(path, dtype={"m_pow_n": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ArtifactError(f"{path}: unreadable table: {e}") from e
    if list(frame.columns) != columns:
        raise ArtifactError(f"{path}: expected columns {columns}, found {list(frame.columns)}")
    return frame


def read_run_artifacts(run_dir: str | Path) -> Metrics:
    """Rebuild the comparable parts of a run's metrics from its directory."""
    run = Path(run_dir)
    if not run.is_dir():
        raise ArtifactError(f"{run}: not a run directory")

    config_path = run / RESOLVED_CONFIG
    try:
        config = ScenarioConfig.model_validate(json.loads(config_path.read_text()))
    except FileNotFoundError as e:
        raise ArtifactError(f"{config_path}: missing") from e
    except (json.JSONDecodeError, ValidationError) as e:
        raise ArtifactError(f"{config_path}: invalid resolved config: {e}") from e

    travel = _read_table(run / TRAVEL_TIMES, TRAVEL_TIMES_COLUMNS)
    computations = _read_table(run / COMPUTATIONS, COMPUTATIONS_COLUMNS)
    rejected = _read_table(run / REJECTED, REJECTED_COLUMNS)
    try:
        records = {
            int(row.cav_id): TravelRecord(int(row.cav_id), float(row.t_start), float(row.t_finish))
            for row in travel.itertuples(index=False)
        }
        events = [
            RoutingEvent(int(row.event_index), int(row.n_cavs), int(row.evaluations), int(row.m_pow_n))
            for row in computations.itertuples(index=False)
        ]
        rejected_ids = [int(cav_id) for cav_id in rejected.cav_id]
    except (TypeError, ValueError) as e:
        raise ArtifactError(f"{run}: malformed row: {e}") from e

    return Metrics(
        fingerprint=config.fingerprint(),
        mode=config.mode,
        routes_per_cav=config.routing.routes_per_cav,
        travel=records,
        routing_events=events,
        rejected=rejected_ids,
    )


def _computation_rows(label: str, events: Sequence[RoutingEvent]) -> list[tuple]:
    evaluations = accumulate(event.evaluations for event in events)
    reference = accumulate(event.m_pow_n for event in events)
    return [
        (label, e.event_index, e.n_cavs, e.evaluations, total, str(e.m_pow_n), str(bound))
        for e, total, bound in zip(events, evaluations, reference)
    ]


def write_comparison(out_dir: str | Path, report: ComparisonReport) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [(row.n, row.total_a, row.total_b, row.difference) for row in report.rows],
        columns=COMPARISON_COLUMNS,
    )
    table = _write_table(out / COMPARISON, frame)
    computations = _write_table(
        out / COMPARISON_COMPUTATIONS,
        pd.DataFrame(
            _computation_rows("A", report.events_a) + _computation_rows("B", report.events_b),
            columns=COMPARISON_COMPUTATIONS_COLUMNS,
        ),
    )
    summary = out / COMPARISON_REPORT
    summary.write_text(report.summary() + "\n")
    return [table, computations, summary]
