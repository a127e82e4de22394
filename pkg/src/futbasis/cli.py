"""Command-line front end: ``futbasis <command> --config FILE [--variant V] [--out DIR] [--seed N]``.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure, 4 I/O failure.
Set ``FUTBASIS_LOG_LEVEL`` (e.g. ``DEBUG``) for more logging.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from . import __version__
from .backtest import run_simulated
from .model import DerivedModel, InvalidParameters, MarketParams, Preferences, derive
from .odesolve import DEFAULT_STEPS, NumericalFailure, Variant, solve, to_table
from .policy import ce_extremes, certainty_equivalent, region_grid, strategy_coefficients
from .simulate import build_tables, confidence_region, simulate_joint

log = logging.getLogger("futbasis")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
SWEEP_PARAMETERS = ("gamma", "kappa_scale", "maturity_gap")
KEEP_PATHS_LIMIT = 5_000_000  # wealth cells kept in memory for the wealth CSV


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    market: MarketParams
    gamma: float
    n_paths: int = 400
    n_steps: int = 50
    seed: int = 0
    s0: Any = 1.0
    z0: Any = 0.0
    x0: float = 1.0
    ode_steps: int = DEFAULT_STEPS
    times: list = field(default_factory=lambda: [0.05, 0.15, 0.25])
    resolution: int = 201
    level: float = 0.95
    curve_points: int = 26
    sweep: Optional[dict] = None
    output_dir: str = "out"
    raw: dict = field(default_factory=dict)

    def preferences(self) -> Preferences:
        return Preferences(self.gamma)


def _section(d: dict, key: str) -> dict:
    sec = d.get(key) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section '{key}' must be a mapping")
    return sec


def load_config(path: str | os.PathLike) -> RunConfig:
    """Read a YAML or JSON run configuration."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    return parse_config(raw)


def parse_config(raw: Any) -> RunConfig:
    if not isinstance(raw, dict) or "market" not in raw:
        raise ConfigError("config must be a mapping with a 'market' section")
    try:
        market = MarketParams.from_dict(_section(raw, "market"))
    except KeyError as exc:
        raise ConfigError(f"market section is missing {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"market section: {exc}") from exc
    prefs = _section(raw, "preferences")
    sim = _section(raw, "simulation")
    solver = _section(raw, "solver")
    ce = _section(raw, "ce")
    try:
        cfg = RunConfig(
            market=market,
            gamma=float(prefs.get("gamma", 2.0)),
            n_paths=int(sim.get("n_paths", 400)),
            n_steps=int(sim.get("n_steps", 50)),
            seed=int(sim.get("seed", 0)),
            s0=sim.get("s0", 1.0),
            z0=sim.get("z0", 0.0),
            x0=float(sim.get("x0", 1.0)),
            ode_steps=int(solver.get("n_steps", DEFAULT_STEPS)),
            times=[float(t) for t in ce.get("times", [0.05, 0.15, 0.25])],
            resolution=int(ce.get("resolution", 201)),
            level=float(ce.get("level", 0.95)),
            curve_points=int(ce.get("curve_points", 26)),
            sweep=raw.get("sweep"),
            output_dir=str(raw.get("output_dir", "out")),
            raw=raw,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.n_paths < 1 or cfg.n_steps < 1 or cfg.ode_steps < 2:
        raise ConfigError("n_paths, n_steps must be >= 1 and solver n_steps >= 2")
    if cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if cfg.x0 <= 0:
        raise ConfigError("x0 must be positive")
    if not 0 < cfg.level < 1:
        raise ConfigError("ce level must lie in (0, 1)")
    if cfg.sweep is not None:
        _check_sweep(cfg.sweep)
    return cfg


def _check_sweep(sweep: dict) -> None:
    if not isinstance(sweep, dict) or sweep.get("parameter") not in SWEEP_PARAMETERS:
        raise ConfigError(f"sweep.parameter must be one of {SWEEP_PARAMETERS}")
    values = sweep.get("values")
    if not isinstance(values, list) or not values:
        raise ConfigError("sweep.values must be a non-empty list")
    vals = np.asarray(values, dtype=float)
    if sweep["parameter"] == "maturity_gap" and np.any(vals <= 0):
        raise ConfigError("maturity_gap values must be positive (a zero gap admits arbitrage)")
    if sweep["parameter"] in ("gamma", "kappa_scale") and np.any(vals <= 0):
        raise ConfigError(f"{sweep['parameter']} values must be positive")


class Output:
    """Writes result files into one directory without overwriting anything."""

    def __init__(self, directory: str | os.PathLike, overwrite: bool = False):
        self.dir = Path(directory)
        self.overwrite = overwrite
        self.files: list[str] = []
        self.dir.mkdir(parents=True, exist_ok=True)

    def _path(self, name: str) -> Path:
        path = self.dir / name
        if path.exists() and not self.overwrite:
            raise FileExistsError(f"refusing to overwrite existing output {path}")
        self.files.append(name)
        return path

    def csv(self, name: str, header: list[str], rows: np.ndarray) -> None:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        np.savetxt(self._path(name), rows, delimiter=",", header=",".join(header), comments="", fmt="%.17g")

    def json(self, name: str, obj: dict) -> None:
        with open(self._path(name), "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Variant):
        return o.value
    raise TypeError(f"not JSON serializable: {type(o)}")


def _variants(arg: Optional[str]) -> list[Variant]:
    if arg in (None, "both"):
        return [Variant.FUTURES_ONLY, Variant.FULL_MARKET]
    return [Variant.parse(arg)]


def _fmt_t(t: float) -> str:
    return f"{t:.6g}"


def cmd_simulate(cfg: RunConfig, model: DerivedModel, out: Output, args) -> dict:
    n = model.n
    tables = build_tables(model, cfg.n_steps)
    paths = simulate_joint(model, tables, cfg.s0, cfg.z0, cfg.n_paths, cfg.seed)
    idx = np.repeat(np.arange(cfg.n_paths), cfg.n_steps + 1)
    t = np.tile(paths.times, cfg.n_paths)
    rows = np.column_stack(
        [idx, t, paths.z.reshape(-1, n), paths.s.reshape(-1, n), paths.f.reshape(-1, n)]
    )
    header = ["path", "t"] + [f"{p}_{i + 1}" for p in ("z", "s", "f") for i in range(n)]
    out.csv("paths.csv", header, rows)

    coverage = []
    for t_c in cfg.times:
        if t_c <= 0:
            continue
        step = int(round(t_c / paths.times[-1] * cfg.n_steps))
        if not np.isclose(paths.times[step], t_c, rtol=0, atol=1e-12):
            raise ConfigError(f"ce time {t_c} is not on the simulation grid")
        region = confidence_region(model, t_c, paths.z[0, 0], cfg.level)
        inside = region.contains(paths.z[:, step])
        coverage.append([t_c, cfg.level, float(inside.mean()), len(inside)])
        if n == 2:
            ring = region.boundary(200)
            out.csv(f"ellipse_t{_fmt_t(t_c)}.csv", ["z_1", "z_2"], ring)
    out.csv("coverage.csv", ["t", "level", "fraction_inside", "n_paths"], np.array(coverage).reshape(-1, 4))
    return {"coverage": coverage}


def cmd_solve(cfg: RunConfig, model: DerivedModel, out: Output, args) -> dict:
    info = {}
    for v in _variants(args.variant):
        sol = solve(model, cfg.preferences(), v, cfg.ode_steps)
        header, table = to_table(sol)
        out.csv(f"solution_{v.value}.csv", header, table)
        info[v.value] = {"f_T": float(sol.f[-1]), "midpoint_residual": sol.midpoint_residual()}
    return info


def cmd_ce(cfg: RunConfig, model: DerivedModel, out: Output, args) -> dict:
    info = {}
    horizon = model.horizon
    curve = np.linspace(0.0, horizon, cfg.curve_points)
    times = sorted(set(np.round(np.concatenate([curve, cfg.times]), 12)))
    for v in _variants(args.variant):
        sol = solve(model, cfg.preferences(), v, cfg.ode_steps)
        rows = []
        for t in times:
            if t == 0:
                ce0 = float(certainty_equivalent(sol, 0.0, cfg.x0, np.broadcast_to(cfg.z0, (model.n,))))
                rows.append([t, ce0, ce0] + [np.nan] * (2 * model.n))
                continue
            ext = ce_extremes(sol, t, cfg.x0, cfg.z0, cfg.level, cfg.resolution)
            rows.append([t, ext.ce_min, ext.ce_max, *ext.argmin, *ext.argmax])
            if t in cfg.times and model.n == 2:
                region = confidence_region(model, t, cfg.z0, cfg.level)
                pts = region_grid(region, cfg.resolution)
                ce = certainty_equivalent(sol, t, cfg.x0, pts)
                out.csv(f"ce_{v.value}_t{_fmt_t(t)}.csv", ["z_1", "z_2", "ce"], np.column_stack([pts, ce]))
        header = ["t", "ce_min", "ce_max"] + [f"argmin_z_{i + 1}" for i in range(model.n)] + [
            f"argmax_z_{i + 1}" for i in range(model.n)
        ]
        out.csv(f"ce_extremes_{v.value}.csv", header, np.array(rows))
        info[v.value] = {str(r[0]): {"min": r[1], "max": r[2]} for r in rows if r[0] in cfg.times}
    return info


def cmd_strategy(cfg: RunConfig, model: DerivedModel, out: Output, args) -> dict:
    if model.n != 2:
        raise ConfigError("position surfaces are only produced for two assets")
    n = model.n
    for v in _variants(args.variant):
        sol = solve(model, cfg.preferences(), v, cfg.ode_steps)
        for t in cfg.times:
            if t <= 0:
                continue
            region = confidence_region(model, t, cfg.z0, cfg.level)
            pts = region_grid(region, cfg.resolution)
            const, slope = strategy_coefficients(sol, t)
            pos = cfg.x0 * (const + pts @ slope.T)
            names = [f"theta_{i + 1}" for i in range(n)]
            if v is Variant.FULL_MARKET:
                names += [f"pi_{i + 1}" for i in range(n)]
            out.csv(f"positions_{v.value}_t{_fmt_t(t)}.csv", ["z_1", "z_2"] + names, np.column_stack([pts, pos]))
    return {}


def cmd_backtest(cfg: RunConfig, model: DerivedModel, out: Output, args) -> dict:
    keep = cfg.n_paths * (cfg.n_steps + 1) <= KEEP_PATHS_LIMIT
    info = {}
    for v in _variants(args.variant):
        sol = solve(model, cfg.preferences(), v, cfg.ode_steps)
        rep = run_simulated(
            model, cfg.preferences(), sol, cfg.n_paths, cfg.n_steps, cfg.seed,
            x0=cfg.x0, s0=cfg.s0, z0=cfg.z0, keep_paths=keep,
        )
        summary = rep.summary()
        out.json(f"report_{v.value}.json", summary)
        out.csv(f"terminal_{v.value}.csv", ["path", "x_T", "failed"],
                np.column_stack([np.arange(rep.n_paths), rep.terminal, rep.failed]))
        if keep:
            times = np.linspace(0.0, model.horizon, cfg.n_steps + 1)
            rows = np.column_stack(
                [np.repeat(np.arange(rep.n_paths), cfg.n_steps + 1), np.tile(times, rep.n_paths), rep.wealth.ravel()]
            )
            out.csv(f"wealth_{v.value}.csv", ["path", "t", "wealth"], rows)
        if rep.kde is not None:
            out.csv(f"kde_{v.value}.csv", ["wealth", "density"], np.column_stack([rep.kde.grid, rep.kde.density]))
        info[v.value] = {"sharpe": rep.sharpe, "n_failed": rep.n_failed, "min_terminal": summary["terminal_stats"]["min"]}
    return info


def sweep_market(market: MarketParams, parameter: str, value: float) -> MarketParams:
    """Market parameters for one point of a sensitivity sweep."""
    if parameter == "kappa_scale":
        # the base mean-reversion pattern is rescaled, spot stays non-reverting
        base = np.asarray(market.eta_f) - np.asarray(market.eta_s)
        base = base / abs(base[0])
        return market.replace(eta_f=value * base, eta_s=np.zeros_like(base))
    if parameter == "maturity_gap":
        mats = np.array(market.maturities, dtype=float)
        mats[0] = market.horizon + value
        return market.replace(maturities=mats)
    return market


def ce_at_origin(model: DerivedModel, gamma: float, variant: Variant, n_steps: int) -> float:
    """``CE(0, 1, 0)`` from ``f`` at the full horizon; defined for any gamma != 1."""
    sol = solve(model, Preferences(gamma, allow_nirvana=gamma <= 1), variant, n_steps)
    return float(np.exp(gamma / (1 - gamma) * sol.f[-1]))


def run_sweep(cfg: RunConfig, variants: list[Variant]) -> list[dict]:
    if cfg.sweep is None:
        raise ConfigError("config has no sweep section")
    parameter = cfg.sweep["parameter"]
    rows = []
    for value in cfg.sweep["values"]:
        value = float(value)
        gamma = value if parameter == "gamma" else cfg.gamma
        try:
            model = derive(sweep_market(cfg.market, parameter, value))
        except InvalidParameters as exc:
            raise ConfigError(f"sweep value {value}: {exc}") from exc
        for v in variants:
            row = {"parameter": parameter, "value": value, "variant": v.value, "status": "ok", "ce": float("nan")}
            if gamma == 1:
                row["status"] = "undefined_at_log_utility"
            else:
                try:
                    row["ce"] = ce_at_origin(model, gamma, v, cfg.ode_steps)
                except NumericalFailure as exc:
                    if gamma >= 1:
                        raise
                    log.info("gamma=%g %s: %s", gamma, v.value, exc)
                    row["status"] = "nirvana_detected"
            rows.append(row)
    return rows


def cmd_sweep(cfg: RunConfig, model: DerivedModel, out: Output, args) -> dict:
    rows = run_sweep(cfg, _variants(args.variant))
    path = out._path("sweep.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("parameter,value,variant,status,ce\n")
        for r in rows:
            fh.write(f"{r['parameter']},{r['value']:.17g},{r['variant']},{r['status']},{r['ce']:.17g}\n")
    return {"rows": rows}


COMMANDS = {
    "simulate": cmd_simulate,
    "solve": cmd_solve,
    "ce": cmd_ce,
    "strategy": cmd_strategy,
    "backtest": cmd_backtest,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="futbasis", description="Futures basis trading model toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML or JSON run configuration")
    parser.add_argument("--variant", choices=["futures", "full", "both"], default=None)
    parser.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    parser.add_argument("--seed", type=int, default=None, help="simulation seed (overrides the config)")
    parser.add_argument("--overwrite", action="store_true", help="allow replacing existing output files")
    return parser


def _config_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(
        level=os.environ.get("FUTBASIS_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        raw = _config_bytes(args.config)
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be a non-negative integer")
            cfg.seed = args.seed
        model = derive(cfg.market)
        cfg.preferences()
    except (ConfigError, InvalidParameters, ValueError, yaml.YAMLError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        out = Output(args.out or cfg.output_dir, overwrite=args.overwrite)
        info = COMMANDS[args.command](cfg, model, out, args)
        manifest = {
            "command": args.command,
            "variant": args.variant or "both",
            "seed": cfg.seed,
            "config_sha256": hashlib.sha256(raw).hexdigest(),
            "run_sha256": hashlib.sha256(raw + f"|seed={cfg.seed}".encode()).hexdigest(),
            "version": __version__,
            "files": list(out.files),
            "info": info,
        }
        out.json(f"manifest_{args.command}.json", manifest)
    except (ConfigError, InvalidParameters) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
