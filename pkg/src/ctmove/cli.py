"""Command line entry point: ``ctmove simulate | fit | summarize``."""

from __future__ import annotations

import argparse
import hashlib
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataio import (
    PATH_HEADER,
    InputError,
    RunConfig,
    load_observations,
    path_rows,
    read_paths,
    read_table,
    uniform_grid,
    write_manifest,
    write_observations,
    write_table,
)
from .diagnostics import (
    effective_sample_size,
    heidelberger_welch,
    quantile_summary,
    state_probability_series,
)
from .inference import NormalPrior, PriorSpec, SamplerConfig, grid_indices
from .model import (
    BehaviourParams,
    ModelError,
    MovementParams,
    ObservationSeries,
    Parameters,
    simulate_path,
)
from .sampler import SamplerError, run_sampler

log = logging.getLogger("ctmove")


def build_parameters(cfg: RunConfig) -> Parameters:
    movement = tuple(
        MovementParams(
            getattr(cfg, f"sigma_theta_sq_{s}"),
            getattr(cfg, f"mu_{s}"),
            getattr(cfg, f"beta_{s}"),
            getattr(cfg, f"sigma_psi_sq_{s}"),
        )
        for s in (1, 2)
    )
    return Parameters(BehaviourParams.two_state(cfg.lambda_1, cfg.lambda_2), movement)


def build_priors(cfg: RunConfig) -> PriorSpec:
    dirichlet = np.array([[0.0, 1.0], [1.0, 0.0]])
    turn = {(1, "sigma_theta_sq"): NormalPrior(cfg.turn_prior_mean, cfg.turn_prior_sd)}
    return PriorSpec(np.full(2, cfg.gamma_shape), np.full(2, cfg.gamma_rate), dirichlet, turn,
                     cfg.r_max)


def build_sampler_config(cfg: RunConfig, seed: int) -> SamplerConfig:
    return SamplerConfig(
        n_iter=cfg.n_iter,
        thin=cfg.thin,
        burn_in_fraction=cfg.burn_in_fraction,
        path_updates_per_iter=cfg.path_updates_per_iter,
        section_length_range=(cfg.section_length_min, cfg.section_length_max),
        delta_t=cfg.delta_t,
        rw_proposal_sd=cfg.rw_sd_array(),
        rw_scale=cfg.rw_scale,
        path_store_stride=cfg.path_store_stride,
        speed_threshold=cfg.speed_threshold,
        seed=seed,
    )


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(cfg: RunConfig) -> list[Path]:
    """Simulate a refined path and subsample it at the observation schedule."""
    rng = np.random.default_rng(cfg.seed)
    params = build_parameters(cfg)
    obs_t = cfg.observation_schedule()
    if cfg.initial_state not in (1, 2):
        raise InputError("initial_state must be 1 or 2")
    s0 = cfg.initial_state - 1
    m = params.movement[s0]
    initial = (s0, rng.uniform(-math.pi, math.pi), rng.normal(m.mu, math.sqrt(m.speed_variance)))
    path = simulate_path(params, cfg.start_time, cfg.end_time, cfg.delta_t, initial, rng,
                         knots=obs_t)
    locs = path.locations()[grid_indices(path, obs_t)]
    out = _out_dir(cfg)
    files = [out / "path.csv", out / "observations.csv", out / "manifest.json"]
    write_table(files[0], PATH_HEADER, path_rows(path))
    write_observations(files[1], ObservationSeries(obs_t, locs))
    write_manifest(files[2], "simulate", cfg, {})
    return files


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_fit(cfg: RunConfig) -> list[Path]:
    """Run the sampler on an observation file and write draws and path snapshots."""
    if not cfg.observations:
        raise InputError("fit needs 'observations' in the configuration")
    obs_file = Path(cfg.observations).resolve()
    if not obs_file.is_file():
        raise InputError(f"observation file {obs_file} does not exist")
    obs = load_observations(obs_file, cfg.time_unit, cfg.distance_unit)
    samples = run_sampler(obs, build_sampler_config(cfg, cfg.seed), build_priors(cfg),
                          rng=np.random.default_rng(cfg.seed),
                          progress=log.isEnabledFor(logging.INFO))
    out = _out_dir(cfg)
    files = [out / n for n in ("draws.csv", "paths.csv", "acceptance.csv", "manifest.json")]
    write_table(files[0], ["iteration"] + samples.names,
                ([int(it)] + list(row) for it, row in zip(samples.iterations, samples.draws)))
    write_table(files[1], ["draw"] + PATH_HEADER,
                ([k] + row for k, path in samples.paths for row in path_rows(path)))
    write_table(files[2], ["component", "accepted", "attempted", "rate"],
                ([key, samples.accepted[key], samples.attempted[key], rate]
                 for key, rate in samples.acceptance_rates.items()))
    echo = RunConfig.from_mapping({**cfg.to_dict(), "observations": str(obs_file)})
    write_manifest(files[3], "fit", echo, {"observations_sha256": _sha256(obs_file)})
    return files


def summary_columns(names: list[str], draws: np.ndarray) -> tuple[list[str], np.ndarray]:
    """Reorder per state and append ``sigma_psi_sq / (2 beta)`` computed per draw."""
    n_states = sum(1 for n in names if n.startswith("lambda_"))
    cols, data = [], []
    for s in range(1, n_states + 1):
        for base in ("lambda", "sigma_theta_sq", "mu", "beta", "sigma_psi_sq"):
            cols.append(f"{base}_{s}")
            data.append(draws[:, names.index(f"{base}_{s}")])
        cols.append(f"speed_variance_{s}")
        data.append(draws[:, names.index(f"sigma_psi_sq_{s}")]
                    / (2.0 * draws[:, names.index(f"beta_{s}")]))
    cols += [n for n in names if n.startswith("q_")]
    data += [draws[:, names.index(n)] for n in names if n.startswith("q_")]
    return cols, np.column_stack(data)


def cmd_summarize(cfg: RunConfig) -> list[Path]:
    """Quantile table, convergence report and state probabilities from a fit."""
    out = Path(cfg.out)
    for name in ("draws.csv", "paths.csv"):
        if not (out / name).is_file():
            raise InputError(f"missing {out / name}; run 'fit' first")
    header, rows = read_table(out / "draws.csv")
    if len(rows) < 2:
        raise InputError("need at least two stored draws to summarize")
    draws = np.array([[float(v) for v in r[1:]] for r in rows])
    cols, data = summary_columns(header[1:], draws)
    table = quantile_summary(data, cols)
    files = [out / "summary.csv", out / "convergence.csv", out / "state_probabilities.csv"]
    write_table(files[0], ["parameter", "q05", "q50", "q95"],
                ([n] + list(table.row(n)) for n in cols))

    def convergence_row(name, chain):
        ess = effective_sample_size(chain) if chain.size >= 10 else None
        if chain.size >= 100:
            hw = heidelberger_welch(chain, cfg.alpha)
            return [name, ess, "yes" if hw.stationary else "no", hw.start_fraction, hw.p_value]
        return [name, ess, None, None, None]

    write_table(files[1], ["parameter", "ess", "stationary", "start_fraction", "p_value"],
                (convergence_row(n, data[:, k]) for k, n in enumerate(cols)))
    snaps = [p for _, p in read_paths(out / "paths.csv")]
    n_states = sum(1 for n in cols if n.startswith("lambda_"))
    grid = uniform_grid(snaps[0].times[0], snaps[0].times[-1], cfg.grid_step)
    series = state_probability_series(snaps, grid, n_states)
    write_table(files[2], ["t"] + [f"p_state_{s + 1}" for s in range(n_states)],
                ([t] + list(p) for t, p in zip(series.times, series.probabilities)))
    return files


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "summarize": cmd_summarize}


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="ctmove", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("--config", help="key = value file, or a manifest.json from a previous run")
        p.add_argument("--seed", type=int, help="overrides the configured seed")
        p.add_argument("--out", help="output directory (overrides the configured one)")
        p.add_argument("-v", "--verbose", action="store_true", help="log sampler progress")
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        if overrides:
            cfg = RunConfig.from_mapping({**cfg.to_dict(), **overrides})
        files = COMMANDS[args.command](cfg)
    except (InputError, ModelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SamplerError as exc:
        print(f"sampler aborted: {exc}", file=sys.stderr)
        return 1
    for f in files:
        print(f)
    return 0


if __name__ == "__main__":
    sys.exit(main())
