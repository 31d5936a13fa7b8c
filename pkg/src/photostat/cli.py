"""Command-line interface: ``photostat simulate | reconstruct | analyze``.

Exit codes: 0 success (an unconverged reconstruction still counts as success),
2 invalid input, 3 I/O failure.

Every output file is accompanied by a ``*.manifest.json`` sidecar recording the
command, inputs, resolved configuration, tool version, seed and timestamps.
Settings resolve as command-line flags, then ``--config`` file, then defaults.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .distributions import ModelSpec, heralded_photon, mean_photon_number
from .em import EmConfig, ReconstructionResult, UPDATE_RULES, reconstruct, suggest_truncation
from .errors import PhotostatError, UndefinedValueError
from .forward import EfficiencyGrid, dumps_dataset, load_dataset, no_click_probabilities, simulate_dataset
from .inference import (
    ParameterGrid,
    confidence_intervals,
    fit_model,
    klyshko_with_uncertainty,
    poisson_background_fit,
    scan_modes,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_IO = 3
DEFAULT_SIM_TRUNCATION = 8

DEFAULTS = {
    "simulate": {
        "model": None, "family": None, "mu": None, "modes": None, "n0": None,
        "vacuum": 0.027, "two_photon_ratio": 0.0185, "truncation": None,
        "K": None, "eta_max": None, "eta_min": None, "etas": None,
        "runs": 10**6, "seed": 0, "out": None,
    },
    "reconstruct": {
        "dataset": None, "truncation": None, "tolerance": None, "max_iter": 10**6,
        "trace_stride": 1000, "update": "binomial", "reference": None, "seed": None, "out": None,
    },
    "analyze": {
        "result": None, "dataset": None, "fit": [], "modes": "1-20,100,500,10000",
        "background_base": "multithermal", "weights": None, "seed": None, "out": None,
    },
}


class InputError(Exception):
    """Invalid command-line input (exit code 2)."""


class OutputError(Exception):
    """Failure to read or write a file (exit code 3)."""


def _csv_list(cast):
    def parse(text):
        try:
            return [cast(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"cannot parse list {text!r}") from None
    return parse


def parse_modes(text) -> list[int]:
    """Parse ``"1-20,100,500"`` into a list of integers."""
    if isinstance(text, (list, tuple)):
        return [int(m) for m in text]
    modes = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            modes.extend(range(int(lo), int(hi) + 1))
        else:
            modes.append(int(part))
    return modes


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="photostat",
        description="Reconstruct photon-number statistics from on/off detection data.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def shared(p):
        p.add_argument("--seed", type=int, default=S, help="random seed (simulate only uses it)")
        p.add_argument("--out", default=S, help="output path")
        p.add_argument("--config", default=None, help="JSON file with default settings")

    s = sub.add_parser("simulate", help="simulate an on/off dataset")
    shared(s)
    s.add_argument("--model", default=S, help="ModelSpec JSON file")
    s.add_argument("--family", default=S,
                   choices=["fock", "coherent", "thermal", "multithermal", "heralded"])
    s.add_argument("--mu", type=float, default=S)
    s.add_argument("--modes", type=int, default=S)
    s.add_argument("--n0", type=int, default=S)
    s.add_argument("--vacuum", type=float, default=S, help="heralded: vacuum probability")
    s.add_argument("--two-photon-ratio", type=float, default=S, help="heralded: rho_2 / rho_1")
    s.add_argument("--truncation", type=int, default=S)
    s.add_argument("--K", type=int, default=S, help="number of efficiencies")
    s.add_argument("--eta-max", type=float, default=S)
    s.add_argument("--eta-min", type=float, default=S,
                   help="lowest efficiency (default eta_max / K)")
    s.add_argument("--etas", type=_csv_list(float), default=S,
                   help="explicit comma-separated efficiencies")
    s.add_argument("--runs", type=int, default=S, help="runs per efficiency")

    r = sub.add_parser("reconstruct", help="reconstruct a photon distribution")
    shared(r)
    r.add_argument("--dataset", default=S)
    r.add_argument("--truncation", type=int, default=S)
    r.add_argument("--tolerance", type=float, default=S, help="default 1e-7 * K")
    r.add_argument("--max-iter", type=int, default=S)
    r.add_argument("--trace-stride", type=int, default=S)
    r.add_argument("--update", choices=UPDATE_RULES, default=S)
    r.add_argument("--reference", default=S, help="ModelSpec JSON for fidelity tracking")

    a = sub.add_parser("analyze", help="uncertainties, Klyshko parameters and fits")
    shared(a)
    a.add_argument("--result", default=S)
    a.add_argument("--dataset", default=S)
    a.add_argument("--fit", type=_csv_list(str), default=S,
                   help="families: fock,coherent,thermal,multithermal,background")
    a.add_argument("--modes", default=S, help='mode counts, e.g. "1-20,100,500"')
    a.add_argument("--background-base", default=S,
                   choices=["coherent", "thermal", "multithermal"])
    a.add_argument("--weights", type=_csv_list(float), default=S,
                   help="background-fit weight grid")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS[command])
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise OutputError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise InputError("config must be a JSON object")
        for key, value in raw.items():
            key = key.replace("-", "_")
            if key not in settings:
                raise InputError(f"unknown config key {key!r} for {command}")
            settings[key] = value
    for key, value in vars(args).items():
        if key in settings:
            settings[key] = value
    if settings.get("out") is None:
        raise InputError("--out is required")
    return settings


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise OutputError(f"cannot read {what}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} is not valid JSON: {exc}") from None


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".",
                                   prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from None


def _write_manifest(path, command, inputs, settings, started):
    manifest = {
        "command": command,
        "inputs": inputs,
        "config": settings,
        "version": __version__,
        "seed": settings.get("seed"),
        "started": started,
        "finished": _now(),
    }
    _atomic_write(path, json.dumps(manifest, indent=2, default=str) + "\n")


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _model_from_settings(cfg) -> ModelSpec:
    if cfg["model"] is not None:
        # An explicit --truncation overrides the one stored in the model file.
        return ModelSpec.from_dict(_read_json(cfg["model"], "model spec"), truncation=cfg["truncation"])
    N = cfg["truncation"] if cfg["truncation"] is not None else DEFAULT_SIM_TRUNCATION
    family = cfg["family"]
    if family is None:
        raise InputError("give --model or --family")
    if family == "heralded":
        d = heralded_photon(cfg["vacuum"], cfg["two_photon_ratio"], N)
        parts = [(float(w), ModelSpec("fock", N, n0=k)) for k, w in enumerate(d.probs) if w > 0]
        # Exact weights from the distribution, renormalized against rounding.
        total = sum(w for w, _ in parts)
        return ModelSpec("mixture", N, components=tuple((w / total, m) for w, m in parts))
    return ModelSpec(family, N, mu=cfg["mu"], modes=cfg["modes"], n0=cfg["n0"])


def _grid_from_settings(cfg) -> EfficiencyGrid:
    if cfg["etas"] is not None:
        return EfficiencyGrid(cfg["etas"])
    if cfg["K"] is None or cfg["eta_max"] is None:
        raise InputError("give --etas, or --K together with --eta-max")
    return EfficiencyGrid.equally_spaced(int(cfg["K"]), float(cfg["eta_max"]), cfg["eta_min"])


def cmd_simulate(cfg, started) -> int:
    spec = _model_from_settings(cfg)
    grid = _grid_from_settings(cfg)
    dist = spec.build()
    data = simulate_dataset(dist, grid, int(cfg["runs"]), int(cfg["seed"]))
    out = Path(cfg["out"])
    _atomic_write(out, dumps_dataset(data))
    cfg = dict(cfg, resolved_model=spec.to_dict(), etas=[float(e) for e in grid.etas])
    _write_manifest(out.with_name(out.name + ".manifest.json"), "simulate",
                    {"model": cfg["model"]}, cfg, started)
    print(f"wrote {grid.K} rows to {out} (model {dist.label}, mean photons {mean_photon_number(dist):.6g})")
    return EXIT_OK


def _load_dataset(path):
    if path is None:
        raise InputError("--dataset is required")
    try:
        return load_dataset(path)
    except OSError as exc:
        raise OutputError(f"cannot read dataset: {exc}") from None


def format_table(rho, delta) -> str:
    lines = [f"{'n':>3}  {'rho_n':>14}  {'delta_rho_n':>14}"]
    for n, (r, d) in enumerate(zip(rho, delta)):
        d_text = "undefined" if math.isnan(d) else f"{d:.6e}"
        lines.append(f"{n:>3}  {r:>14.6e}  {d_text:>14}")
    return "\n".join(lines)


def cmd_reconstruct(cfg, started) -> int:
    data = _load_dataset(cfg["dataset"])
    N = cfg["truncation"] if cfg["truncation"] is not None else suggest_truncation(data)
    cfg = dict(cfg, truncation=int(N))
    config = EmConfig(
        truncation=int(N),
        max_iterations=int(cfg["max_iter"]),
        tolerance=cfg["tolerance"],
        trace_stride=int(cfg["trace_stride"]),
        update=cfg["update"],
    )
    reference = None
    if cfg["reference"] is not None:
        reference = ModelSpec.from_dict(_read_json(cfg["reference"], "reference spec"),
                                        truncation=int(N)).build()
    result = reconstruct(data, config, reference)
    out = Path(cfg["out"])
    _atomic_write(out, json.dumps(result.to_dict(), indent=2) + "\n")
    _write_manifest(out.with_name(out.name + ".manifest.json"), "reconstruct",
                    {"dataset": cfg["dataset"], "reference": cfg["reference"]}, cfg, started)
    report = confidence_intervals(result, data)
    status = "converged" if result.converged else "not converged (iteration cap)"
    print(f"{status} after {result.iterations_run} iterations, epsilon = {result.final_epsilon:.6e}")
    print(format_table(result.rho.probs, report.delta_rho))
    return EXIT_OK


def _table_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _num(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def cmd_analyze(cfg, started) -> int:
    if cfg["result"] is None:
        raise InputError("--result is required")
    result = ReconstructionResult.from_dict(_read_json(cfg["result"], "result"))
    data = _load_dataset(cfg["dataset"])
    if result.etas is not None and not np.array_equal(result.etas, data.grid.etas):
        raise InputError("result and dataset were produced on different efficiency grids")
    report = confidence_intervals(result, data)
    rho = result.rho
    p = no_click_probabilities(rho, data.grid)
    f = data.frequencies

    klyshko_rows = []
    for n in range(1, rho.truncation):
        try:
            value, err = klyshko_with_uncertainty(rho, report, n)
            klyshko_rows.append({"n": n, "value": value, "uncertainty": err})
        except UndefinedValueError as exc:
            klyshko_rows.append({"n": n, "value": None, "uncertainty": None, "reason": str(exc)})

    fits = []
    families = cfg["fit"] or []
    modes = parse_modes(cfg["modes"])
    weights = cfg["weights"]
    grid_kwargs = {"modes": tuple(modes)}
    if weights is not None:
        grid_kwargs["weights"] = tuple(float(w) for w in weights)
    pgrid = ParameterGrid(**grid_kwargs)
    mode_scan = []
    for family in families:
        if family == "background":
            fits.append({"family": f"{cfg['background_base']}+poisson background",
                         **poisson_background_fit(rho, report, cfg["background_base"], pgrid).to_dict()})
        else:
            fits.append({"family": family, **fit_model(rho, report, family, pgrid).to_dict()})
            if family == "multithermal":
                mode_scan = [
                    {"modes": s.fitted_parameters["modes"], "mu": s.fitted_parameters["mu"],
                     "reduced_chi_square": s.reduced_chi_square}
                    for s in scan_modes(rho, report, modes)
                ]

    outdir = Path(cfg["out"])
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create {outdir}: {exc}") from None

    _atomic_write(outdir / "frequencies.csv", _table_csv(
        ("eta", "f_observed", "p_reconstructed", "abs_residual"),
        [(_num(e), _num(fo), _num(pr), _num(abs(fo - pr))) for e, fo, pr in zip(data.grid.etas, f, p)],
    ))
    _atomic_write(outdir / "distribution.csv", _table_csv(
        ("n", "rho", "delta_rho"),
        [(n, _num(r), _num(d)) for n, (r, d) in enumerate(zip(rho.probs, report.delta_rho))],
    ))
    _atomic_write(outdir / "klyshko.csv", _table_csv(
        ("n", "K_n", "delta_K_n"),
        [(k["n"], _num(k["value"]), _num(k["uncertainty"])) for k in klyshko_rows],
    ))
    full = {
        "epsilon": result.final_epsilon,
        "max_abs_residual": float(np.max(np.abs(f - p))),
        "uncertainty": report.to_dict(),
        "klyshko": klyshko_rows,
        "fits": fits,
        "mode_scan": mode_scan,
    }
    _atomic_write(outdir / "report.json", json.dumps(full, indent=2) + "\n")
    _write_manifest(outdir / "manifest.json", "analyze",
                    {"result": cfg["result"], "dataset": cfg["dataset"]}, cfg, started)

    print(format_table(rho.probs, report.delta_rho))
    for k in klyshko_rows:
        if k["value"] is not None:
            print(f"K_{k['n']} = {k['value']:.4e} +/- {k['uncertainty']:.2e}")
    for fit in fits:
        print(f"fit {fit['family']}: {fit['fitted_parameters']}  "
              f"reduced chi2 = {fit['reduced_chi_square']:.4g} (dof {fit['degrees_of_freedom']})")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct, "analyze": cmd_analyze}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = _now()
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg, started)
    except (InputError, PhotostatError, ValueError) as exc:
        print(f"photostat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OutputError as exc:
        print(f"photostat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
