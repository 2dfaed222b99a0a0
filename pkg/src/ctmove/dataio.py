"""Observation CSV ingestion, run configuration and output tables."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import ModelError, ObservationSeries, RefinedPath

TIME_UNITS = {"hours": 1.0, "days": 24.0}
DISTANCE_UNITS = {"metres": 1.0, "kilometres": 1000.0}


class InputError(ValueError):
    """Malformed input file or configuration."""


def _parse_time(text: str):
    try:
        return float(text)
    except ValueError:
        pass
    stamp = text.strip()
    if stamp.endswith(("Z", "z")):
        stamp = stamp[:-1] + "+00:00"
    return datetime.fromisoformat(stamp)


def load_observations(
    path: str | Path, time_unit: str = "hours", distance_unit: str = "metres"
) -> ObservationSeries:
    """Read a ``time,x,y`` CSV into hours since the first fix and metres.

    Times are numbers in ``time_unit`` or ISO-8601 timestamps. Rows with a
    blank ``x`` or ``y`` are treated as missing fixes and skipped.
    """
    if time_unit not in TIME_UNITS or distance_unit not in DISTANCE_UNITS:
        raise InputError(f"unsupported units {time_unit!r}/{distance_unit!r}")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip().lower() for h in next(reader, [])]
        if header[:3] != ["time", "x", "y"]:
            raise InputError(f"{path}: header must be time,x,y")
        for line_no, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            rec = (rec + ["", "", ""])[:3]
            if not rec[1].strip() or not rec[2].strip():
                continue
            try:
                rows.append((line_no, _parse_time(rec[0]), float(rec[1]), float(rec[2])))
            except ValueError as exc:
                raise InputError(f"{path}: line {line_no}: {exc}") from exc
    if len(rows) < 3:
        raise InputError(f"{path}: need at least 3 usable rows, found {len(rows)}")
    kinds = {isinstance(r[1], datetime) for r in rows}
    if len(kinds) > 1:
        raise InputError(f"{path}: mixed numeric and timestamp times")
    if kinds == {True}:
        stamps = [r[1] for r in rows]
        aware = {s.tzinfo is not None for s in stamps}
        if len(aware) > 1:
            raise InputError(f"{path}: mixed zoned and naive timestamps")
        t0 = stamps[0]
        hours = [(s - t0).total_seconds() / 3600.0 for s in stamps]
    else:
        scale = TIME_UNITS[time_unit]
        hours = [(r[1] - rows[0][1]) * scale for r in rows]
    for k in range(1, len(rows)):
        if hours[k] == hours[k - 1]:
            raise InputError(f"{path}: line {rows[k][0]}: duplicate time")
        if hours[k] < hours[k - 1]:
            raise InputError(f"{path}: line {rows[k][0]}: time goes backwards")
    scale = DISTANCE_UNITS[distance_unit]
    locs = np.array([(r[2], r[3]) for r in rows]) * scale
    return ObservationSeries(np.array(hours), locs)


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_table(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Comma-separated table with a header; floats are written round-trip exact."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else _fmt(v) if not isinstance(v, str) else v
                             for v in row])


def read_table(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader if row]


def write_observations(path: str | Path, obs: ObservationSeries) -> None:
    write_table(path, ["time", "x", "y"],
                ((t, x, y) for t, (x, y) in zip(obs.times, obs.locations)))


PATH_HEADER = ["t", "state", "theta", "nu", "x", "y"]


def path_rows(path: RefinedPath) -> Iterable[list]:
    """One row per grid time; the final row carries no interval values.

    States are written 1-based.
    """
    locs = path.locations()
    n = path.n_intervals
    for i in range(n + 1):
        if i < n:
            yield [path.times[i], int(path.behaviour[i]) + 1, path.bearings[i], path.steps[i],
                   locs[i, 0], locs[i, 1]]
        else:
            yield [path.times[i], None, None, None, locs[i, 0], locs[i, 1]]


def path_from_rows(rows: Sequence[Sequence[str]]) -> RefinedPath:
    times = np.array([float(r[0]) for r in rows])
    body = rows[:-1]
    return RefinedPath(
        times,
        np.array([int(r[1]) - 1 for r in body]),
        np.array([float(r[2]) for r in body]),
        np.array([float(r[3]) for r in body]),
        np.array([float(rows[0][4]), float(rows[0][5])]),
    )


def read_paths(path: str | Path) -> list[tuple[int, RefinedPath]]:
    """Snapshots from a long ``draw,t,state,theta,nu,x,y`` table."""
    _, rows = read_table(path)
    out = []
    start = 0
    for k in range(1, len(rows) + 1):
        if k == len(rows) or rows[k][0] != rows[start][0]:
            out.append((int(rows[start][0]), path_from_rows([r[1:] for r in rows[start:k]])))
            start = k
    return out


@dataclass
class RunConfig:
    """Flat run configuration; every field may appear as ``key = value``."""

    out: str = "out"
    seed: int = 0
    # fit input
    observations: str = ""
    time_unit: str = "hours"
    distance_unit: str = "metres"
    # sampler
    n_iter: int = 1000
    thin: int = 1
    burn_in_fraction: float = 0.25
    path_updates_per_iter: int = 100
    section_length_min: int = 4
    section_length_max: int = 24
    delta_t: float = 2.0
    rw_scale: float = 0.05
    rw_proposal_sd: str = ""
    path_store_stride: int = 10
    speed_threshold: float = 100.0
    # priors
    gamma_shape: float = 0.1
    gamma_rate: float = 4.0
    turn_prior_mean: float = 0.05
    turn_prior_sd: float = 0.1
    r_max: float = 1.0
    # simulation
    start_time: float = 0.0
    end_time: float = 500.0
    obs_interval: float = 24.0
    obs_times: str = ""
    initial_state: int = 1
    lambda_1: float = 0.00651
    lambda_2: float = 0.052
    sigma_theta_sq_1: float = 5.61
    sigma_theta_sq_2: float = 0.389
    mu_1: float = 77.3
    mu_2: float = 638.0
    beta_1: float = 1.45
    beta_2: float = 0.245
    sigma_psi_sq_1: float = 7920.0
    sigma_psi_sq_2: float = 23600.0
    # summary
    grid_step: float = 1.0
    alpha: float = 0.05

    def __post_init__(self):
        if self.time_unit not in TIME_UNITS:
            raise InputError(f"time_unit must be one of {sorted(TIME_UNITS)}")
        if self.distance_unit not in DISTANCE_UNITS:
            raise InputError(f"distance_unit must be one of {sorted(DISTANCE_UNITS)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip()
            if key not in known:
                raise InputError(f"unknown configuration key {key!r}")
            kind = known[key].type
            try:
                if kind in ("int", int):
                    kwargs[key] = int(raw)
                elif kind in ("float", float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw).strip()
            except (TypeError, ValueError) as exc:
                raise InputError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        """Read a ``key = value`` file or a run manifest written by ``fit``."""
        text = Path(path).read_text(encoding="utf-8")
        if text.lstrip().startswith("{"):
            return cls.from_mapping(json.loads(text)["config"])
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
        parser.optionxform = str
        parser.read_string("[run]\n" + text)
        return cls.from_mapping(dict(parser["run"]))

    def observation_schedule(self) -> np.ndarray:
        """Explicit ``obs_times`` if given, else every ``obs_interval`` hours."""
        if self.obs_times.strip():
            times = np.array([float(v) for v in self.obs_times.split(",")])
            if np.any(times < self.start_time) or np.any(times > self.end_time):
                raise InputError("observation schedule extends beyond the simulated horizon")
            if np.any(np.diff(times) <= 0):
                raise InputError("obs_times must be strictly increasing")
        else:
            if not self.obs_interval > 0:
                raise InputError("obs_interval must be positive")
            count = int(math.floor((self.end_time - self.start_time) / self.obs_interval + 1e-9))
            times = self.start_time + self.obs_interval * np.arange(count + 1)
        if times.size < 3:
            raise InputError("observation schedule needs at least 3 times")
        return times

    def rw_sd_array(self) -> Optional[np.ndarray]:
        if not self.rw_proposal_sd.strip():
            return None
        vals = np.array([float(v) for v in self.rw_proposal_sd.split(",")])
        if np.any(vals < 0):
            raise InputError("rw_proposal_sd entries must be non-negative")
        return vals


def write_manifest(path: str | Path, command: str, config: RunConfig, extra: dict) -> None:
    import scipy

    from . import __version__

    doc = {
        "command": command,
        "config": config.to_dict(),
        "versions": {"ctmove": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        **extra,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def uniform_grid(t0: float, t1: float, step: float) -> np.ndarray:
    """Evenly spaced grid from ``t0`` to exactly ``t1`` with spacing at most ``step``."""
    n = max(1, int(math.ceil((t1 - t0) / step - 1e-9)))
    grid = t0 + (t1 - t0) * np.arange(n + 1) / n
    grid[-1] = t1
    return grid
