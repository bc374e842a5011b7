"""Experiment runner: TOML configs in, deterministic CSV artifacts out.

Every experiment writes CSV files (15 significant digits, LF endings) plus
a manifest.json with the config hash and per-file checksums; re-running an
identical config reproduces byte-identical CSVs.  Exit codes: 0 success,
2 configuration error, 3 numeric failure, 4 resource refusal.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import __version__, dicke, drt, kbe, spectroscopy
from .fock import ContractViolation, LatticeSpec

MAX_WORKERS = 8
MAX_DICKE_N = 4000
MAX_KBE_STEPS = 2500
MAX_CHAIN_DIM = 1000


class ConfigError(ValueError):
    """Configuration cannot be parsed or validated."""


class ResourceRefusal(RuntimeError):
    """Requested computation exceeds the configured resource caps."""


@dataclass
class ExperimentConfig:
    experiment: str
    params: dict
    out_dir: str = "."
    workers: int = 1


@dataclass
class RunManifest:
    config_hash: str
    version: str
    wall_time_s: float
    files: dict = field(default_factory=dict)


# (type, default); None defaults are derived during validation
SCHEMAS = {
    "freefermion-ds": {
        "L": (int, 10), "n": (int, 6), "h0": (float, 1.0),
        "gamma_over_h0": (float, 0.01), "gamma_prime_over_h0": (float, None),
        "t_end": (float, 80.0), "dt": (float, 1.0 / 60.0),
        "omega_min": (float, 0.1), "omega_max": (float, 4.9),
        "n_omega": (int, 81), "sigma_b": (float, 0.05),
    },
    "dicke-scan": {
        "g_over_gc": (float, 0.9998), "omega_a": (float, 1.0),
        "omega_c": (float, 2.0), "N_list": (list, [50, 100, 200, 400,
                                                   700, 1000]),
    },
    "dicke-quench": {
        "g_over_gc": (float, 0.9998), "omega_a": (float, 1.0),
        "omega_c": (float, 2.0), "N": (int, 1000), "kappa": (float, 0.05),
        "t_max_ws": (float, 1.2), "n_t": (int, 121),
    },
    "kbe-compare": {
        "L": (int, 10), "h0": (float, 1.0), "beta_s": (float, 1.0),
        "n_filling": (float, 6.0), "V": (float, 1.0), "J": (float, 2.0),
        "dt": (float, 0.02), "t_max": (float, 12.0),
        "hartree": (str, "lesser"), "delta0": (float, None),
        "scan": (str, "none"), "scan_values": (list, []),
    },
    "gdrt-verify": {
        "eta": (float, 0.4), "t_final": (float, 2.0), "dt": (float, 0.01),
        "h0": (float, 1.0), "beta_s": (float, 1.0),
    },
}


def _coerce(key, value, typ):
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key {key!r}: expected a number, "
                              f"got {value!r}")
        return float(value)
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key {key!r}: expected an integer, "
                              f"got {value!r}")
        return value
    if typ is list:
        if not isinstance(value, list):
            raise ConfigError(f"key {key!r}: expected a list, got {value!r}")
        return value
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"key {key!r}: expected a string, "
                              f"got {value!r}")
        return value
    raise ConfigError(f"key {key!r}: unsupported type")


def _validate(experiment: str, raw_params: dict) -> dict:
    schema = SCHEMAS[experiment]
    params = {}
    for key, value in raw_params.items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} for experiment "
                              f"{experiment!r}; valid keys: "
                              f"{sorted(schema)}")
        params[key] = _coerce(key, value, schema[key][0])
    for key, (_, default) in schema.items():
        params.setdefault(key, default)
    if experiment == "freefermion-ds":
        if params["gamma_prime_over_h0"] is None:
            params["gamma_prime_over_h0"] = params["gamma_over_h0"] / 5.0
        if params["gamma_prime_over_h0"] > params["gamma_over_h0"]:
            raise ConfigError("gamma_prime must not exceed gamma")
        if params["n_omega"] < 2 or params["omega_max"] <= params["omega_min"]:
            raise ConfigError("frequency grid is empty or degenerate")
    if experiment == "kbe-compare":
        if params["delta0"] is None:
            params["delta0"] = 1.0 / (5.0 * params["h0"])
        if params["scan"] not in ("none", "tau0", "td"):
            raise ConfigError(f"scan must be none, tau0 or td, "
                              f"got {params['scan']!r}")
        if params["scan"] != "none" and not params["scan_values"]:
            raise ConfigError("scan requested without scan_values")
    return params


def load_config(path) -> ExperimentConfig:
    """Parse and validate a TOML experiment config."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if "experiment" not in doc:
        raise ConfigError(f"{path}: missing required key 'experiment'")
    experiment = doc.pop("experiment")
    if experiment not in SCHEMAS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from "
                          f"{sorted(SCHEMAS)}")
    out_dir = doc.pop("out_dir", ".")
    workers = doc.pop("workers", 1)
    raw = doc.pop("params", {})
    if doc:
        raise ConfigError(f"unknown top-level keys {sorted(doc)}")
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError("workers must be a positive integer")
    return ExperimentConfig(experiment=experiment,
                            params=_validate(experiment, raw),
                            out_dir=str(out_dir), workers=workers)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.15g}"


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(x) for x in row) for row in rows]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _run_freefermion_ds(params, out, workers):
    L, n = params["L"], params["n"]
    if math.comb(L, n) > MAX_CHAIN_DIM:
        raise ResourceRefusal(f"chain dimension C({L},{n}) exceeds "
                              f"{MAX_CHAIN_DIM}")
    h0 = params["h0"]
    system = spectroscopy.chain_protocol_system(L, n, h0)
    grid = np.linspace(params["omega_min"] * h0, params["omega_max"] * h0,
                       params["n_omega"])
    spec = spectroscopy.reconstruct_ds(
        grid, system, params["gamma_over_h0"] * h0,
        params["gamma_prime_over_h0"] * h0, params["t_end"], params["dt"],
        sigma_b=params["sigma_b"] * h0)
    _write_csv(out / "ds_spectrum.csv",
               ["omega", "abs_chi", "phase", "r2", "flagged"],
               [(om, abs(v), float(np.angle(v)), r2, int(fl))
                for om, v, r2, fl in zip(spec.frequencies, spec.values,
                                         spec.r2, spec.flags)])
    _write_csv(out / "ds_peaks.csv", ["position", "weight", "sigma_b"],
               spec.peaks)
    return ["ds_spectrum.csv", "ds_peaks.csv"]


def _run_dicke_scan(params, out, workers):
    n_list = [int(N) for N in params["N_list"]]
    if not n_list:
        raise ConfigError("N_list must not be empty")
    if max(n_list) > MAX_DICKE_N:
        raise ResourceRefusal(f"N={max(n_list)} exceeds the "
                              f"{MAX_DICKE_N}-atom cap")

    def one(N):
        return dicke.scan_criticality([N], params["g_over_gc"],
                                      params["omega_a"],
                                      params["omega_c"])[0]

    with ThreadPoolExecutor(max_workers=min(workers, MAX_WORKERS)) as pool:
        rows = list(pool.map(one, n_list))
    cols = ["N", "g_over_gc", "omega_s", "N0_tilde", "Ns_tilde",
            "residual", "n_max_used"]
    _write_csv(out / "dicke_scan.csv", cols,
               [[r[c] for c in cols] for r in rows])
    files = ["dicke_scan.csv"]
    if len(rows) >= 5:
        fit = dicke.fit_scan(rows)
        _write_csv(out / "dicke_fits.csv", ["name", "value", "stderr"],
                   [("nu1", *fit.nu1), ("nu2", *fit.nu2),
                    ("nu3", *fit.nu3), ("eta_exp", *fit.eta_exp)])
        files.append("dicke_fits.csv")
    return files


def _run_dicke_quench(params, out, workers):
    if params["N"] > MAX_DICKE_N:
        raise ResourceRefusal(f"N={params['N']} exceeds the "
                              f"{MAX_DICKE_N}-atom cap")
    g = params["g_over_gc"] * 0.5 * np.sqrt(params["omega_a"]
                                            * params["omega_c"])
    bundle, ext, n_max = dicke.converged_cutoff(
        params["omega_a"], params["omega_c"], g, params["N"])
    ds = dicke.lehmann_ds(bundle)
    t = np.linspace(0.0, params["t_max_ws"] / ext.omega_s, params["n_t"])
    kappa = params["kappa"] if params["kappa"] > 0 else None
    soft = dicke.quench_prediction(ext, t, kappa=kappa)
    full = dicke.quench_response(ds, t, kappa=kappa)
    _write_csv(out / "dicke_quench.csv", ["t", "dN_soft", "dN_full"],
               zip(t, soft, full))
    _write_csv(out / "dicke_quench_meta.csv",
               ["omega_s", "N0_tilde", "Ns_tilde", "residual", "n_max"],
               [(ext.omega_s, ext.N_0_tilde, ext.N_s_tilde, ext.residual,
                 n_max)])
    return ["dicke_quench.csv", "dicke_quench_meta.csv"]


def _sigma_column(times, dW_kbe, pred, delta0):
    metric = drt.sigma_deviation(times, dW_kbe, pred, delta0=delta0)
    col = np.full(times.size, np.nan)
    start = int(round(metric.times[0] / (times[1] - times[0])))
    col[start:start + metric.sigma.size] = metric.sigma
    return col


def _run_kbe_compare(params, out, workers):
    n_steps = int(round(params["t_max"] / params["dt"]))
    if n_steps > MAX_KBE_STEPS:
        raise ResourceRefusal(f"{n_steps} two-time steps exceed the "
                              f"{MAX_KBE_STEPS}-step cap")
    spec = LatticeSpec(L=params["L"], h0=params["h0"], mu=0.0, pbc=True)
    grid = kbe.TwoTimeGrid(dt=params["dt"], n_steps=n_steps)
    times = grid.times
    tables = drt.chain_susceptibility_tables(
        spec, params["beta_s"], params["n_filling"], times)
    init = kbe.initial_equilibrium_gf(
        spec, params["beta_s"], n_target=params["n_filling"])[:2]

    def compare(V, J):
        bath = kbe.bath_correlator(V, kbe.syk2_propagators(J, grid))
        pred = drt.drt_predict(tables, bath)
        gf = kbe.kbe_evolve(init, spec, bath, grid,
                            hartree=params["hartree"])
        imb = kbe.imbalance_record(gf).observables["Ne_minus_No"]
        dW = imb - imb[0]
        l01 = pred.observables["dW_l01"]
        return dW, pred.observables["dW_l0"], l01, \
            _sigma_column(times, dW, l01, params["delta0"])

    if params["scan"] == "none":
        dW, l0, l01, sig = compare(params["V"], params["J"])
        _write_csv(out / "drt_compare.csv",
                   ["t", "dW_kbe", "dW_drt_l0", "dW_drt_l01", "sigma"],
                   zip(times, dW, l0, l01, sig))
        return ["drt_compare.csv"]

    values = [float(v) for v in params["scan_values"]]

    def scan_point(v):
        if params["scan"] == "tau0":
            J, V, label = 1.0 / v, params["V"], v          # v is tau0 = 1/J
        else:
            V = np.sqrt(params["J"] / v)                   # v is td = J/V^2
            J, label = params["J"], v
        return label, compare(V, J)[3]

    with ThreadPoolExecutor(max_workers=min(workers, MAX_WORKERS)) as pool:
        results = list(pool.map(scan_point, values))
    rows = [(label, t, s)
            for label, sig in results for t, s in zip(times, sig)]
    _write_csv(out / "sigma_map.csv", ["tau0_or_td", "t", "sigma"], rows)
    return ["sigma_map.csv"]


def _run_gdrt_verify(params, out, workers):
    rep = drt.gdrt_toy_verify(eta=params["eta"], t_final=params["t_final"],
                              dt=params["dt"], h0=params["h0"],
                              beta_s=params["beta_s"])
    _write_csv(out / "gdrt_verify.csv", ["t", "exact", "predicted"],
               zip(rep.times, rep.exact, rep.predicted))
    _write_csv(out / "gdrt_summary.csv",
               ["eta", "residual", "residual_half", "scaling_ratio"],
               [(rep.eta, rep.residual, rep.residual_half,
                 rep.scaling_ratio)])
    return ["gdrt_verify.csv", "gdrt_summary.csv"]


RUNNERS = {
    "freefermion-ds": _run_freefermion_ds,
    "dicke-scan": _run_dicke_scan,
    "dicke-quench": _run_dicke_quench,
    "kbe-compare": _run_kbe_compare,
    "gdrt-verify": _run_gdrt_verify,
}


def run(config: ExperimentConfig) -> RunManifest:
    """Dispatch an experiment and write its artifacts plus manifest.json."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"experiment": config.experiment, "params": config.params,
               "workers": config.workers}
    config_hash = hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()
    ).hexdigest()
    t0 = time.time()
    files = RUNNERS[config.experiment](config.params, out, config.workers)
    manifest = RunManifest(config_hash=config_hash, version=__version__,
                           wall_time_s=time.time() - t0,
                           files={f: _sha256(out / f) for f in files})
    with open(out / "manifest.json", "w", newline="\n") as fh:
        json.dump(manifest.__dict__, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _apply_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    params = dict(config.params)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        try:
            value = tomli.loads(f"v = {text}")["v"]
        except tomli.TOMLDecodeError:
            value = text
        if key == "out_dir":
            config.out_dir = str(value)
            continue
        if key == "workers":
            config.workers = _coerce(key, value, int)
            continue
        params[key] = value
    config.params = _validate(config.experiment, params)
    return config


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="disspec", description="dissipative-spectroscopy experiments")
    parser.add_argument("experiment", choices=sorted(SCHEMAS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE")
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        if config.experiment != args.experiment:
            raise ConfigError(f"config declares {config.experiment!r} but "
                              f"{args.experiment!r} was requested")
        if args.out is not None:
            config.out_dir = args.out
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("workers must be positive")
            config.workers = args.workers
        config = _apply_overrides(config, args.override)
        if config.workers > MAX_WORKERS:
            raise ResourceRefusal(f"workers={config.workers} exceeds the "
                                  f"{MAX_WORKERS}-worker cap")
        manifest = run(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ResourceRefusal as exc:
        print(f"resource refusal: {exc}", file=sys.stderr)
        return 4
    except (ContractViolation, ArithmeticError, ValueError, RuntimeError,
            np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    for name, digest in sorted(manifest.files.items()):
        print(f"{name}  sha256={digest[:16]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
