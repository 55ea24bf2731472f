"""Reproducible experiment driver.

Configs are strict JSON: every key must be known, required keys must be
present, and defaults are echoed into the run manifest.  Exit status: 0 on
success, 2 on configuration errors, 3 on numerical non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field

import numpy as np
import scipy

from . import __version__, kernels
from .asymptotics import (
    appendix_a_sqrt_coefficient,
    lap_convergence_study,
    puiseux_fit,
    resolvent_ray_samples,
)
from .cache import KernelCache
from .dynamics import (
    DecayCurve,
    KGState,
    evolve_klein_gordon,
    evolve_schrodinger,
    kg_decay_curve,
    scattering_state,
    schrodinger_decay_curve,
    wraparound_cutoff,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    ExtrapolationError,
    LatdispError,
)
from .freeop import QuadratureSpec
from .lattice import GridFunction, LatticeBox, Potential, save_csv, save_npz
from .perturbed import find_eigenvalues, genericity_check

KINDS = ("lap", "puiseux", "spectrum", "evolve", "decay", "scatter", "kg", "appendix-a")


@dataclass
class ExperimentConfig:
    kind: str
    params: dict
    seed: int = 0
    output_dir: str = "."

    def echo(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, **self.params}


@dataclass
class RunManifest:
    config: dict
    artifacts: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    versions: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(
                {
                    "config": self.config,
                    "artifacts": self.artifacts,
                    "wall_clock_s": self.wall_clock_s,
                    "versions": self.versions,
                    "diagnostics": self.diagnostics,
                },
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")


# ---------------------------------------------------------------------------
# strict parsing

_COMMON_KEYS = {"kind", "seed", "quadrature", "output_dir"}

# per-kind schema: key -> (required, default)
_SCHEMAS = {
    "lap": {
        "omega": (True, None),
        "sigma": (True, None),
        "L": (False, 8),
        "potential": (False, []),
        "side": (False, "upper"),
    },
    "puiseux": {
        "base": (True, None),
        "potential": (False, []),
        "probes": (False, [[[0, 0, 0], [0, 0, 0]]]),
        "magnitudes": (False, [0.1 * 10 ** (-0.4 * k) for k in range(6)]),
        "direction_angle": (False, None),
        "model": (False, None),
    },
    "spectrum": {
        "potential": (True, None),
        "L": (False, 8),
        "tol": (False, 1e-10),
    },
    "evolve": {
        "potential": (False, []),
        "L": (True, None),
        "times": (True, None),
        "psi0": (False, {"type": "delta"}),
        "checkpoints": (False, False),
    },
    "decay": {
        "potential": (False, []),
        "L": (True, None),
        "sigma": (False, 6.0),
        "times": (True, None),
        "psi0": (False, {"type": "delta"}),
        "fit_window": (False, None),
        "subtract_bound_states": (False, True),
    },
    "scatter": {
        "potential": (True, None),
        "L": (True, None),
        "sigma": (False, 6.0),
        "t_max": (True, None),
        "dt": (False, 0.25),
        "psi0": (False, {"type": "gaussian", "width": 2.0}),
        "measure_times": (False, None),
        "fit_window": (False, None),
    },
    "kg": {
        "potential": (False, []),
        "L": (True, None),
        "m": (True, None),
        "sigma": (False, 6.0),
        "times": (True, None),
        "psi0": (False, {"type": "gaussian", "width": 2.0}),
        "dt": (False, None),
        "fit_window": (False, None),
        "mode": (False, "decay"),
    },
    "appendix-a": {
        "l": (True, None),
        "delta": (True, None),
        "ys": (False, None),
    },
}

_QUAD_KEYS = {"grid_points", "epsilons", "extrapolation"}
_PSI0_KEYS = {"type", "width", "site", "path"}


def parse_config(text: str) -> ExperimentConfig:
    """Parse a JSON experiment config; unknown keys are rejected with the
    offending key named."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    kind = raw.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"unknown or missing kind: {kind!r}; expected one of {KINDS}")
    schema = _SCHEMAS[kind]
    for key in raw:
        if key not in schema and key not in _COMMON_KEYS:
            raise ConfigError(f"unknown key {key!r} for kind {kind!r}")
    params = {}
    for key, (required, default) in schema.items():
        if key in raw:
            params[key] = raw[key]
        elif required:
            raise ConfigError(f"missing required key {key!r} for kind {kind!r}")
        else:
            params[key] = default
    quad = raw.get("quadrature", {})
    if not isinstance(quad, dict):
        raise ConfigError("quadrature must be an object")
    for key in quad:
        if key not in _QUAD_KEYS:
            raise ConfigError(f"unknown quadrature key {key!r}")
    params["quadrature"] = quad
    psi0 = params.get("psi0")
    if isinstance(psi0, dict):
        for key in psi0:
            if key not in _PSI0_KEYS:
                raise ConfigError(f"unknown psi0 key {key!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    out_dir = raw.get("output_dir", ".")
    return ExperimentConfig(kind=kind, params=params, seed=seed, output_dir=out_dir)


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.echo(), indent=2, sort_keys=True)


def _build_potential(spec) -> Potential:
    if isinstance(spec, dict):
        path = spec.get("file")
        if path is None:
            raise ConfigError("potential object must carry a 'file' key")
        entries = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                x1, x2, x3, v = line.split(",")
                entries[(int(x1), int(x2), int(x3))] = float(v)
        return Potential.from_dict(entries)
    if not isinstance(spec, list):
        raise ConfigError("potential must be a list of [x1, x2, x3, value] rows")
    entries = {}
    for row in spec:
        if len(row) != 4:
            raise ConfigError(f"bad potential row {row!r}")
        entries[(int(row[0]), int(row[1]), int(row[2]))] = float(row[3])
    return Potential.from_dict(entries)


def _build_psi0(spec, box: LatticeBox) -> GridFunction:
    kind = spec.get("type") if isinstance(spec, dict) else None
    if kind == "delta":
        site = tuple(spec.get("site", (0, 0, 0)))
        return GridFunction.delta(box, site)
    if kind == "gaussian":
        w = float(spec.get("width", 2.0))
        g = GridFunction.from_callable(
            box, lambda a, b, c: np.exp(-(a * a + b * b + c * c) / (2 * w * w))
        )
        g.values /= g.norm()
        return g
    if kind == "file":
        from .lattice import load_csv, load_npz

        path = spec["path"]
        u = load_npz(path) if str(path).endswith(".npz") else load_csv(path)
        if u.box != box:
            raise ConfigError("psi0 file box does not match configured box")
        return u
    raise ConfigError(f"unknown psi0 type {kind!r}")


def _build_quad(spec: dict) -> QuadratureSpec:
    kwargs = {}
    if "grid_points" in spec:
        kwargs["grid_points"] = int(spec["grid_points"])
    if "epsilons" in spec:
        kwargs["epsilons"] = tuple(float(e) for e in spec["epsilons"])
    if "extrapolation" in spec:
        kwargs["extrapolation"] = str(spec["extrapolation"])
    return QuadratureSpec(**kwargs)


# ---------------------------------------------------------------------------
# artifact writers


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def export_curve(curve: DecayCurve, path) -> None:
    """CSV with header 't,value' plus a JSON sidecar carrying the fit."""
    with open(path, "w") as fh:
        fh.write("t,value\n")
        for t, v in zip(curve.times, curve.values):
            fh.write(f"{_fmt(t)},{_fmt(v)}\n")
    sidecar = {
        "sigma": curve.sigma,
        "fit_slope": curve.fit_slope,
        "fit_stderr": curve.fit_stderr,
        "fit_window": list(curve.fit_window),
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# runners


def _run_lap(cfg, out, quad):
    V = _build_potential(cfg.params["potential"])
    report = lap_convergence_study(
        float(cfg.params["omega"]),
        float(cfg.params["sigma"]),
        V,
        box=LatticeBox(int(cfg.params["L"])),
        quad=quad,
        side=cfg.params["side"],
    )
    path = out / "lap_report.json"
    with open(path, "w") as fh:
        json.dump(
            {
                "omega": report.omega,
                "sigma": report.sigma,
                "side": report.side,
                "epsilons": list(report.epsilons),
                "norms": report.norms,
                "cauchy_differences": report.cauchy_differences,
                "extrapolated_norm": report.extrapolated_norm,
                "extrapolation_gap": report.extrapolation_gap,
                "converged": report.converged,
                "hypothesis_met": report.hypothesis_met,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    csv = out / "lap_differences.csv"
    with open(csv, "w") as fh:
        fh.write("epsilon,norm,cauchy_difference\n")
        diffs = report.cauchy_differences + [float("nan")]
        for e, n, d in zip(report.epsilons, report.norms, diffs):
            fh.write(f"{_fmt(e)},{_fmt(n)},{_fmt(d)}\n")
    return [path, csv], {"converged": report.converged}


def _run_puiseux(cfg, out, quad):
    V = _build_potential(cfg.params["potential"])
    probes = [
        (tuple(int(c) for c in x), tuple(int(c) for c in y))
        for x, y in cfg.params["probes"]
    ]
    direction = None
    if cfg.params["direction_angle"] is not None:
        direction = np.exp(1j * float(cfg.params["direction_angle"]))
    cache = KernelCache(out / "kernel_cache.tsv")
    try:
        samples = resolvent_ray_samples(
            float(cfg.params["base"]),
            V,
            probes,
            cfg.params["magnitudes"],
            quad,
            direction=direction,
            cache=cache,
        )
    finally:
        cache.close()
    fit = puiseux_fit(samples, cfg.params["model"])
    csv = out / "ray_samples.csv"
    with open(csv, "w") as fh:
        fh.write("magnitude,probe,re,im\n")
        for i, m in enumerate(samples.magnitudes):
            for j in range(len(probes)):
                v = samples.values[i, j]
                fh.write(f"{_fmt(m)},{j},{_fmt(v.real)},{_fmt(v.imag)}\n")
    js = out / "puiseux_fit.json"
    with open(js, "w") as fh:
        json.dump(
            {
                "base": samples.base,
                "model": fit.model,
                "direction": [samples.direction.real, samples.direction.imag],
                "probes": [[list(x), list(y)] for x, y in probes],
                "c0": [[c.real, c.imag] for c in fit.c0],
                "c_half": [[c.real, c.imag] for c in fit.c_half],
                "c1": [[c.real, c.imag] for c in fit.c1],
                "residual_norm": fit.residual_norm,
                "exponent_estimate": fit.exponent_estimate,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    return [csv, js], {"exponent_estimate": fit.exponent_estimate}


def _run_spectrum(cfg, out, quad):
    V = _build_potential(cfg.params["potential"])
    box = LatticeBox(int(cfg.params["L"]))
    pairs = find_eigenvalues(V, box, tol=float(cfg.params["tol"]))
    csv = out / "eigenvalues.csv"
    files = [csv]
    with open(csv, "w") as fh:
        fh.write("mu,multiplicity\n")
        for p in pairs:
            fh.write(f"{_fmt(p.mu)},{p.multiplicity}\n")
    for i, p in enumerate(pairs):
        path = out / f"eigenfunction_{i}.npz"
        save_npz(p.u, path)
        files.append(path)
    report = genericity_check(V, quad)
    js = out / "genericity.json"
    with open(js, "w") as fh:
        json.dump(
            {
                "entries": {
                    str(k): {"smallest_singular_value": v[0], "condition": v[1]}
                    for k, v in report.entries.items()
                },
                "verdict": report.verdict,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    files.append(js)
    return files, {"count": len(pairs), "verdict": report.verdict}


def _run_evolve(cfg, out, quad):
    V = _build_potential(cfg.params["potential"])
    box = LatticeBox(int(cfg.params["L"]))
    psi0 = _build_psi0(cfg.params["psi0"], box)
    times = [float(t) for t in cfg.params["times"]]
    traj = evolve_schrodinger(V, psi0, times)
    csv = out / "evolution_norms.csv"
    with open(csv, "w") as fh:
        fh.write("t,l2_norm\n")
        for t, st in zip(traj.times, traj.states):
            fh.write(f"{_fmt(t)},{_fmt(st.norm())}\n")
    files = [csv]
    if cfg.params["checkpoints"]:
        for t, st in zip(traj.times, traj.states):
            path = out / f"state_t{t:g}.npz"
            save_npz(st, path)
            files.append(path)
        manifest = out / "checkpoints.json"
        with open(manifest, "w") as fh:
            json.dump({"method": traj.meta}, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        files.append(manifest)
    return files, {"max_degree": traj.meta["max_degree"]}


def _run_decay(cfg, out, quad):
    V = _build_potential(cfg.params["potential"])
    box = LatticeBox(int(cfg.params["L"]))
    psi0 = _build_psi0(cfg.params["psi0"], box)
    times = np.asarray([float(t) for t in cfg.params["times"]])
    pairs = (
        find_eigenvalues(V, box)
        if (V.support_size and cfg.params["subtract_bound_states"])
        else []
    )
    window = cfg.params["fit_window"]
    window = tuple(window) if window else None
    curve = schrodinger_decay_curve(
        V, psi0, times, float(cfg.params["sigma"]), pairs, fit_window=window
    )
    path = out / "decay_curve.csv"
    export_curve(curve, path)
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    sidecar["wraparound_cutoff"] = wraparound_cutoff(box)
    sidecar["bound_states_subtracted"] = len(pairs)
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [path, str(path) + ".json"], {"fit_slope": curve.fit_slope}


def _run_scatter(cfg, out, quad):
    V = _build_potential(cfg.params["potential"])
    box = LatticeBox(int(cfg.params["L"]))
    psi0 = _build_psi0(cfg.params["psi0"], box)
    mt = cfg.params["measure_times"]
    window = cfg.params["fit_window"]
    phi_plus, curve, diag = scattering_state(
        V,
        psi0,
        float(cfg.params["t_max"]),
        float(cfg.params["sigma"]),
        dt=float(cfg.params["dt"]),
        measure_times=np.asarray(mt, dtype=float) if mt else None,
        fit_window=tuple(window) if window else None,
    )
    phi_path = out / "phi_plus.npz"
    save_npz(phi_plus, phi_path)
    curve_path = out / "scatter_remainder.csv"
    export_curve(curve, curve_path)
    js = out / "scatter_diagnostics.json"
    with open(js, "w") as fh:
        json.dump(
            {
                "tail_bound": diag["tail_bound"],
                "integrand_tail_coefficient": diag["integrand_tail_coefficient"],
                "nonconvergent_tail_warning": diag["nonconvergent_tail_warning"],
                "duhamel_step": diag["duhamel_step"],
                "t_max": diag["t_max"],
                "bound_state_count": diag["bound_state_count"],
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    return [phi_path, curve_path, str(curve_path) + ".json", js], {
        "fit_slope": curve.fit_slope
    }


def _run_kg(cfg, out, quad):
    V = _build_potential(cfg.params["potential"])
    box = LatticeBox(int(cfg.params["L"]))
    m = float(cfg.params["m"])
    psi0 = _build_psi0(cfg.params["psi0"], box)
    state0 = KGState(psi0, GridFunction.zeros(box), m)
    times = np.asarray([float(t) for t in cfg.params["times"]])
    if cfg.params["mode"] == "decay":
        window = cfg.params["fit_window"]
        curve = kg_decay_curve(
            V, state0, times, float(cfg.params["sigma"]),
            fit_window=tuple(window) if window else None,
        )
        path = out / "kg_decay_curve.csv"
        export_curve(curve, path)
        return [path, str(path) + ".json"], {"fit_slope": curve.fit_slope}
    if cfg.params["mode"] == "frequency":
        pairs = find_eigenvalues(V, box)
        if not pairs:
            raise ConvergenceError("no bound state for frequency recovery")
        u1 = pairs[0]
        state0 = KGState(u1.u, GridFunction.zeros(box), m)
        amps = []
        dt = cfg.params["dt"]

        def observer(t, st):
            amps.append(complex(np.vdot(u1.u.values, st.psi.values)))

        evolve_klein_gordon(
            V, state0, times, dt=float(dt) if dt else None,
            observer=observer, store_states=False,
        )
        series = np.asarray(amps)
        freqs = np.fft.rfftfreq(len(times), d=times[1] - times[0]) * 2 * np.pi
        spec = np.abs(np.fft.rfft(np.real(series)))
        peak = float(freqs[int(np.argmax(spec[1:])) + 1])
        nu1 = float(np.sqrt(m * m + u1.mu))
        path = out / "kg_frequency.json"
        with open(path, "w") as fh:
            json.dump(
                {
                    "mu1": u1.mu,
                    "nu1_predicted": nu1,
                    "nu1_recovered": peak,
                    "rayleigh_resolution": 2 * np.pi / (times[-1] - times[0]),
                },
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")
        csv = out / "kg_amplitude.csv"
        with open(csv, "w") as fh:
            fh.write("t,re,im\n")
            for t, a in zip(times, series):
                fh.write(f"{_fmt(t)},{_fmt(a.real)},{_fmt(a.imag)}\n")
        return [path, csv], {"nu1_recovered": peak, "nu1_predicted": nu1}
    raise ConfigError(f"unknown kg mode {cfg.params['mode']!r}")


def _run_appendix_a(cfg, out, quad):
    ys = cfg.params["ys"]
    fit = appendix_a_sqrt_coefficient(
        int(cfg.params["l"]),
        float(cfg.params["delta"]),
        np.asarray(ys, dtype=float) if ys else None,
    )
    path = out / "appendix_a.json"
    with open(path, "w") as fh:
        json.dump(
            {
                "l": fit.l,
                "delta": fit.delta,
                "ys": [float(y) for y in fit.ys],
                "values": [[v.real, v.imag] for v in fit.values],
                "sqrt_coefficient": [
                    fit.sqrt_coefficient.real,
                    fit.sqrt_coefficient.imag,
                ],
                "residual": fit.residual,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    return [path], {"sqrt_coefficient": fit.sqrt_coefficient.real}


_RUNNERS = {
    "lap": _run_lap,
    "puiseux": _run_puiseux,
    "spectrum": _run_spectrum,
    "evolve": _run_evolve,
    "decay": _run_decay,
    "scatter": _run_scatter,
    "kg": _run_kg,
    "appendix-a": _run_appendix_a,
}


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    from pathlib import Path

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    quad = _build_quad(cfg.params.get("quadrature", {}))
    files, diagnostics = _RUNNERS[cfg.kind](cfg, out, quad)
    manifest = RunManifest(
        config=cfg.echo(),
        artifacts={str(Path(f).name): _sha256(f) for f in files},
        wall_clock_s=time.time() - t0,
        versions={
            "latdisp": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "kernel_backend": kernels.BACKEND,
        },
        diagnostics=diagnostics,
    )
    manifest.write(out / "manifest.json")
    return manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="latdisp",
        description="lattice dispersive-decay laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)
    try:
        with open(args.config) as fh:
            cfg = parse_config(fh.read())
        if cfg.kind != args.command:
            raise ConfigError(
                f"config kind {cfg.kind!r} does not match subcommand {args.command!r}"
            )
        cfg.output_dir = args.out
        if args.seed is not None:
            cfg.seed = args.seed
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        manifest = run_experiment(cfg)
    except (ConvergenceError, ExtrapolationError) as exc:
        print(f"numerical non-convergence: {exc}", file=sys.stderr)
        return 3
    except LatdispError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(manifest.diagnostics, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
