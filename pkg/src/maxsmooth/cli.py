"""Command-line interface.

Subcommands:

* ``simulate``: draw a dataset from a model family and write it as CSV.
* ``fit``: run the two-step fit on a dataset and write posterior summaries.
* ``bench``: wall-clock comparison of the two-step fit vs the exact sampler.
* ``forecast``: leave-one-year-out forecast post-processing on a grid.

Every run writes ``run_manifest.json`` (seed, package and library versions,
engine, timings, and sha256 hashes of the deterministic output files) into
the output directory; under a fixed seed the hashes are identical across
runs. Exit status: 0 on success, 1 for numerical failures, 2 for usage,
input, or data errors.

Seed handling: the ``--seed`` value feeds a ``numpy.random.SeedSequence``;
each pipeline stage uses the child sequence ``(seed, stage)`` with a fixed
stage counter (simulate=0, inference=1, forecast folds=3, bootstrap=4), so
stages are reproducible independently of one another.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, exact, forecast, models, smooth
from ._engine import engine_name, thread_count
from .errors import DataFormatError, MaxSmoothError

STAGE_SIMULATE = 0
STAGE_INFER = 1
STAGE_FORECAST = 3
STAGE_BOOTSTRAP = 4

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_INPUT = 2

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "Model configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n1": {"type": "integer", "minimum": 2},
        "n2": {"type": "integer", "minimum": 2},
        "T": {"type": "integer", "minimum": 2},
        "n_groups": {"type": "integer", "minimum": 3},
        "p": {"type": "integer", "minimum": 1},
        "n_times": {"type": "integer", "minimum": 2},
        "theta_true": {
            "type": "object",
            "additionalProperties": {"type": "number", "exclusiveMinimum": 0},
        },
        "levels": {"type": "object", "additionalProperties": {"type": "number"}},
        "logvar_prior": {
            "type": "array",
            "items": {"type": "number", "exclusiveMinimum": 0},
            "minItems": 2,
            "maxItems": 2,
        },
        "poisson_prior": {
            "type": ["array", "null"],
            "items": {"type": "number", "minimum": 0},
            "minItems": 2,
            "maxItems": 2,
        },
        "treg_prior_phi": {
            "type": "array",
            "items": {"type": "number", "exclusiveMinimum": 0},
            "minItems": 2,
            "maxItems": 2,
        },
        "hyper_rate": {"type": "number", "exclusiveMinimum": 0},
        "u0": {"type": "number"},
        "flavor": {"enum": ["mode", "moment"]},
        "seed": {"type": "integer", "minimum": 0},
    },
}


def derive_rng(seed, stage):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stage,)))


def load_config(path):
    import jsonschema

    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON: {exc}") from None
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            pointer = "/" + "/".join(str(p) for p in e.absolute_path)
            lines.append(f"  {pointer}: {e.message}")
        raise DataFormatError(f"{path}: invalid config:\n" + "\n".join(lines))
    for key in ("logvar_prior", "poisson_prior", "treg_prior_phi"):
        if cfg.get(key) is not None and key in cfg:
            cfg[key] = tuple(cfg[key])
    return cfg


def _spec_from_args(args):
    cfg = load_config(args.config) if args.config else {}
    cfg["seed"] = args.seed
    if getattr(args, "flavor", None):
        cfg["flavor"] = args.flavor
    return models.default_spec(args.model, **cfg)


def write_data_csv(spec, data, path):
    fam = spec.family
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if fam in ("logvar", "linreg", "poisson"):
            header = ["i1", "i2", "t", "y"]
            if fam == "linreg":
                header.append("f")
            writer.writerow(header)
            n1 = spec.n1
            for cell in range(data.y.shape[0]):
                i1, i2 = cell % n1, cell // n1
                for t in range(data.y.shape[1]):
                    row = [i1, i2, t, repr(float(data.y[cell, t]))]
                    if fam == "linreg":
                        row.append(repr(float(data.covariates[cell, t])))
                    writer.writerow(row)
        elif fam == "treg":
            p = spec.p
            writer.writerow(["t", "k", "y"] + [f"x{j + 1}" for j in range(p)])
            for i in range(data.y.shape[0]):
                for k in range(data.y.shape[1]):
                    writer.writerow(
                        [i, k, repr(float(data.y[i, k]))]
                        + [repr(float(v)) for v in data.covariates[i, k]]
                    )
        else:
            raise ValueError(f"unknown model family {fam!r}")


def write_truth_csv(truth, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "index", "value"])
        for name in sorted(truth):
            vals = np.asarray(truth[name], dtype=np.float64).ravel()
            for j, v in enumerate(vals):
                writer.writerow([name, j, repr(float(v))])


def _read_rows(path, required):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataFormatError(f"{path}: empty file")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise DataFormatError(f"{path}: missing columns {missing}")
        rows = list(reader)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return rows, reader.fieldnames


def read_data_csv(family, path, spec=None):
    """Load a dataset CSV and return (spec, SimData) with dims inferred."""
    if spec is None:
        spec = models.default_spec(family)
    if family in ("logvar", "linreg", "poisson"):
        required = ["i1", "i2", "t", "y"] + (["f"] if family == "linreg" else [])
        rows, _ = _read_rows(path, required)
        try:
            i1 = np.array([int(r["i1"]) for r in rows])
            i2 = np.array([int(r["i2"]) for r in rows])
            tt = np.array([int(r["t"]) for r in rows])
            y = np.array([float(r["y"]) for r in rows])
        except (TypeError, ValueError) as exc:
            raise DataFormatError(f"{path}: {exc}") from None
        n1, n2, t = int(i1.max()) + 1, int(i2.max()) + 1, int(tt.max()) + 1
        if len(rows) != n1 * n2 * t:
            raise DataFormatError(
                f"{path}: expected {n1 * n2 * t} rows for a complete "
                f"{n1}x{n2} lattice with {t} replicates, found {len(rows)}"
            )
        spec.n1, spec.n2 = n1, n2
        if family == "poisson":
            spec.n_times = t
            if np.any(y < 0) or np.any(y != np.round(y)):
                raise DataFormatError(f"{path}: counts must be nonnegative integers")
        else:
            spec.T = t
        ymat = np.empty((n1 * n2, t))
        cell = i1 + n1 * i2
        ymat[cell, tt] = y
        cov = None
        if family == "linreg":
            f = np.array([float(r["f"]) for r in rows])
            cov = np.empty((n1 * n2, t))
            cov[cell, tt] = f
        spec.validate()
        return spec, models.SimData(y=ymat, covariates=cov, spec=spec)
    if family == "treg":
        rows, fieldnames = _read_rows(path, ["t", "k", "y", "x1"])
        p = sum(1 for c in fieldnames if c.startswith("x"))
        try:
            gi = np.array([int(r["t"]) for r in rows])
            ki = np.array([int(r["k"]) for r in rows])
            y = np.array([float(r["y"]) for r in rows])
            x = np.array(
                [[float(r[f"x{j + 1}"]) for j in range(p)] for r in rows]
            )
        except (TypeError, ValueError) as exc:
            raise DataFormatError(f"{path}: {exc}") from None
        g, t = int(gi.max()) + 1, int(ki.max()) + 1
        if len(rows) != g * t:
            raise DataFormatError(
                f"{path}: expected {g * t} rows for {g} time points with "
                f"{t} observations each, found {len(rows)}"
            )
        spec.n_groups, spec.T, spec.p = g, t, p
        ymat = np.empty((g, t))
        ymat[gi, ki] = y
        xmat = np.empty((g, t, p))
        xmat[gi, ki] = x
        spec.validate()
        return spec, models.SimData(y=ymat, covariates=xmat, spec=spec)
    raise ValueError(f"unknown model family {family!r}")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(args, timings, outputs=(), extra=None):
    import scipy

    manifest = {
        "command": args.command,
        "seed": args.seed,
        "engine": engine_name(),
        "threads": thread_count(getattr(args, "threads", None)),
        "versions": {
            "maxsmooth": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
        "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "timings_seconds": {k: round(v, 4) for k, v in timings.items()},
        "outputs_sha256": {p.name: _sha256(p) for p in outputs},
    }
    try:
        import numba

        manifest["versions"]["numba"] = numba.__version__
    except ImportError:
        pass
    if extra:
        manifest.update(extra)
    return manifest


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args):
    out = _outdir(args)
    spec = _spec_from_args(args)
    t0 = time.perf_counter()
    data = models.simulate(spec, derive_rng(args.seed, STAGE_SIMULATE))
    write_data_csv(spec, data, out / "data.csv")
    write_truth_csv(data.truth, out / "truth.csv")
    _write_json(asdict(spec), out / "resolved_config.json")
    timings = {"simulate": time.perf_counter() - t0}
    outputs = [out / "data.csv", out / "truth.csv", out / "resolved_config.json"]
    _write_json(
        _manifest(args, timings, outputs, {"model": spec.family}),
        out / "run_manifest.json",
    )
    print(f"wrote {out / 'data.csv'} ({spec.family})")
    return EXIT_OK


def _latent_summary(latent, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "index", "mean", "sd", "q025", "q50", "q975"])
        for name in latent.names:
            block = latent.block(name)
            mean = block.mean(axis=0)
            sd = block.std(axis=0, ddof=1)
            q025, q50, q975 = np.quantile(block, [0.025, 0.5, 0.975], axis=0)
            for j in range(block.shape[1]):
                writer.writerow(
                    [name, j, repr(float(mean[j])), repr(float(sd[j])),
                     repr(float(q025[j])), repr(float(q50[j])),
                     repr(float(q975[j]))]
                )


def _latent_draws_csv(latent, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["draw", "block", "index", "value"])
        for name in latent.names:
            block = latent.block(name)
            for s in range(block.shape[0]):
                for j in range(block.shape[1]):
                    writer.writerow([s, name, j, repr(float(block[s, j]))])


def _theta_csv(theta_draws, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(theta_draws.names + ["log_posterior"])
        for s in range(theta_draws.theta.shape[0]):
            writer.writerow(
                [repr(float(v)) for v in theta_draws.theta[s]]
                + [repr(float(theta_draws.logpost[s]))]
            )


def _validation_only(pm, out, args):
    """--samples 0: build the pseudo model and self-check the ratio identity."""
    theta0 = np.array([h.init for h in pm.hypers])
    rng = derive_rng(args.seed, STAGE_INFER)
    base = smooth.theta_log_marginal(pm, theta0)
    worst = 0.0
    for _ in range(5):
        x = rng.standard_normal(pm.dim_x)
        worst = max(worst, abs(smooth.theta_log_marginal(pm, theta0, at_x=x) - base))
    if not (worst < 1e-8):
        raise MaxSmoothError(
            f"ratio-identity self-check failed: spread {worst:.3e} at theta0"
        )
    _write_json(
        {"ratio_identity_max_dev": worst, "theta0": theta0.tolist()},
        out / "validation.json",
    )
    print(f"validation only: ratio-identity spread {worst:.2e} < 1e-8")
    return EXIT_OK


def cmd_fit(args):
    out = _outdir(args)
    spec = _spec_from_args(args)
    spec, data = read_data_csv(args.model, args.data, spec)
    t0 = time.perf_counter()
    pm = models.build_pseudo(spec, data, flavor=args.flavor)
    t1 = time.perf_counter()
    if args.samples == 0:
        return _validation_only(pm, out, args)
    result = smooth.fit(
        pm, args.samples, derive_rng(args.seed, STAGE_INFER), sampler=args.sampler
    )
    t2 = time.perf_counter()
    outputs = [out / "theta_draws.csv", out / "latent_summary.csv"]
    _theta_csv(result.theta, out / "theta_draws.csv")
    _latent_summary(result.latent, out / "latent_summary.csv")
    if args.full_draws:
        _latent_draws_csv(result.latent, out / "latent_draws.csv")
        outputs.append(out / "latent_draws.csv")
    if args.dump_density:
        dens = []
        for bd in result.diagnostics.get("block_densities", []):
            dens.append(
                {
                    "dims": bd["dims"],
                    "log_density": np.asarray(bd["log_density"]).tolist(),
                }
            )
        axes = result.diagnostics.get("axes_kappa")
        _write_json(
            {
                "axes_log_scale": [np.asarray(a).tolist() for a in axes]
                if axes is not None
                else None,
                "hyper_names": result.theta.names,
                "blocks": dens,
            },
            out / "density.json",
        )
        outputs.append(out / "density.json")
    diag = {
        k: (float(v) if isinstance(v, (int, float, np.floating)) else v)
        for k, v in result.diagnostics.items()
        if isinstance(v, (int, float, str, bool, np.floating))
    }
    timings = {
        "max_step": t1 - t0,
        "smooth_step": t2 - t1,
    }
    extra = {
        "model": spec.family,
        "flavor": args.flavor,
        "sampler": args.sampler,
        "n_draws": args.samples,
        "diagnostics": diag,
    }
    _write_json(
        _manifest(args, timings, outputs, extra), out / "run_manifest.json"
    )
    mean_theta = result.theta.theta.mean(axis=0)
    pairs = ", ".join(
        f"{n}={v:.4g}" for n, v in zip(result.theta.names, mean_theta)
    )
    print(f"fit {spec.family} [{args.flavor}/{args.sampler}]: {pairs}")
    print(f"wrote {out / 'theta_draws.csv'}, {out / 'latent_summary.csv'}")
    return EXIT_OK


BENCH_COLUMNS = ("n_lattice", "t_reps", "method", "seconds_per_10k",
                 "max_step_seconds")


def cmd_bench(args):
    out_path = Path(args.out)
    if out_path.suffix == ".csv":
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_dir, csv_path = out_path.parent, out_path
    else:
        out_path.mkdir(parents=True, exist_ok=True)
        out_dir, csv_path = out_path, out_path / "bench.csv"
    if args.quick:
        sizes, draws, exact_draws = ((10, 10),), 2000, 1000
    else:
        sizes, draws, exact_draws = ((10, 10), (20, 20), (35, 35), (50, 50)), 10000, 10000
    t0 = time.perf_counter()
    rows = exact.timing_benchmark(
        lattice_sizes=sizes,
        n_draws=draws,
        seed=args.seed,
        exact_draws=exact_draws,
    )
    timings = {"benchmark": time.perf_counter() - t0}
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    _write_json(_manifest(args, timings), out_dir / "run_manifest.json")
    print(f"{'lattice':>8} {'T':>5} {'method':>12} {'s/10k draws':>12} {'max s':>8}")
    for r in rows:
        print(
            f"{r['n_lattice']:>8} {r['t_reps']:>5} {r['method']:>12} "
            f"{r['seconds_per_10k']:>12.2f} {r['max_step_seconds']:>8.2f}"
        )
    print(f"wrote {csv_path}")
    return EXIT_OK


def _predictive_csv(pred, ds, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_index", "year", "sample_index", "value"])
        for cell in range(ds.n_cells):
            for it, year in enumerate(ds.years):
                for s, v in enumerate(pred.samples[cell, it]):
                    writer.writerow([cell, int(year), s, repr(float(v))])


def cmd_forecast(args):
    out = _outdir(args)
    t0 = time.perf_counter()
    if args.data:
        ds = forecast.ingest(args.data)
    else:
        n1, n2, years = (int(v) for v in args.synth.split(","))
        ds = forecast.synth_grid(n1, n2, years, derive_rng(args.seed, STAGE_SIMULATE))
        forecast.write_csv(ds, out / "grid.csv")
    schemes = list(forecast.SCHEMES) if args.scheme == "all" else [args.scheme]
    preds = []
    timings = {"ingest": time.perf_counter() - t0}
    for scheme in schemes:
        ts = time.perf_counter()
        preds.append(
            forecast.loyo_fit_predict(
                ds, scheme, args.samples, seed=(args.seed, STAGE_FORECAST),
                mle_student_t=args.mle_student_t,
            )
        )
        timings[f"predict_{scheme}"] = time.perf_counter() - ts
    report = forecast.score(preds, ds)
    outputs = [out / "scores.json"]
    if not args.data:
        outputs.insert(0, out / "grid.csv")
    if args.full_draws:
        for pred in preds:
            name = (
                "predictive_samples.csv"
                if len(preds) == 1
                else f"predictive_samples_{pred.scheme}.csv"
            )
            _predictive_csv(pred, ds, out / name)
            outputs.append(out / name)
    have = set(report.crps_cells)
    brng = derive_rng(args.seed, STAGE_BOOTSTRAP)
    for a, b in (("clim", "mle"), ("mle", "spat1"), ("mle", "spat2"),
                 ("spat1", "spat2")):
        if a in have and b in have:
            ts = time.perf_counter()
            report.bootstrap[f"{a}_minus_{b}"] = forecast.block_bootstrap_crps_diff(
                report.crps_cells[a], report.crps_cells[b],
                ds.n1, ds.n2, args.blocks, brng,
            )
            timings[f"bootstrap_{a}_{b}"] = time.perf_counter() - ts
    _write_json(report.metrics, out / "scores.json")
    if report.bootstrap:
        _write_json(report.bootstrap, out / "bootstrap.json")
        outputs.append(out / "bootstrap.json")
    extra = {
        "schemes": schemes,
        "n_samples": args.samples,
        "grid": {"n1": ds.n1, "n2": ds.n2, "years": int(ds.n_years)},
    }
    _write_json(_manifest(args, timings, outputs, extra), out / "run_manifest.json")
    for scheme in schemes:
        m = report.metrics[scheme]
        print(
            f"{scheme:>6}: crps={m['crps']:.4f} mse={m['mse']:.4f} "
            f"w95={m['w95']:.3f} cov95={m['cov95']:.3f}"
        )
    print(f"wrote {out / 'scores.json'}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="maxsmooth", description=__doc__.splitlines()[0]
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="base RNG seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker-pool cap (default: MAXSMOOTH_THREADS or all)")

    p = sub.add_parser("simulate", help="draw a dataset from a model family")
    p.add_argument("--model", required=True, choices=models.FAMILIES)
    p.add_argument("--config", help="JSON config overriding family defaults")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="two-step fit on a dataset CSV")
    p.add_argument("--model", required=True, choices=models.FAMILIES)
    p.add_argument("--data", required=True, help="dataset CSV from simulate")
    p.add_argument("--config", help="JSON config overriding family defaults")
    p.add_argument("--flavor", choices=("mode", "moment"), default="mode",
                   help="Gaussian approximation flavor")
    p.add_argument("--sampler", choices=("grid", "metropolis"), default="grid")
    p.add_argument("--samples", type=int, default=1000,
                   help="posterior draws (0 = validation-only self-check)")
    p.add_argument("--full-draws", action="store_true",
                   help="also write latent_draws.csv with every draw")
    p.add_argument("--dump-density", action="store_true",
                   help="write the evaluated hyperparameter grid densities")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bench", help="two-step vs exact-sampler timing table")
    p.add_argument("--quick", action="store_true",
                   help="10x10 lattice only, reduced draw counts")
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("forecast", help="leave-one-year-out grid post-processing")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="grid CSV (lat,lon,year,forecast,observation)")
    src.add_argument("--synth", metavar="N1,N2,YEARS",
                     help="simulate a grid instead of reading one")
    p.add_argument("--scheme", choices=forecast.SCHEMES + ("all",), default="all")
    p.add_argument("--samples", type=int, default=1000,
                   help="predictive samples per cell-year")
    p.add_argument("--blocks", type=int, default=23,
                   help="requested bootstrap block count")
    p.add_argument("--mle-student-t", action="store_true",
                   help="t-form predictive for the per-cell regression scheme")
    p.add_argument("--full-draws", action="store_true",
                   help="also write predictive_samples CSVs (large)")
    common(p)
    p.set_defaults(func=cmd_forecast)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        os.environ["MAXSMOOTH_THREADS"] = str(args.threads)
        try:
            import numba

            numba.set_num_threads(thread_count(args.threads))
        except (ImportError, ValueError):
            pass
    try:
        return args.func(args)
    except (DataFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except MaxSmoothError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
