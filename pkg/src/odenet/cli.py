"""Command-line interface: ``odenet generate|fit|simulate|compare|report``.

Every run is described by one JSON document (a *run config*)::

    {
      "dataset": {"generator": {"system": "lv", "regime": "limit_cycle", "eps": 0.01}},
      "basis": {"d": 2, "p": 2},
      "train": {"iterations": 5000, "init": "regression_warm_start"},
      "integrator": {"method": "dopri5"},
      "mode": "odenet",
      "output": "runs/lv",
      "seed": 0
    }

``dataset`` is either ``{"path": ...}`` (a manifest written by ``generate``,
a directory holding one, or a single CSV file) or ``{"generator": ...}``.
Unknown keys anywhere are rejected before any work starts.

Exit codes: 0 success, 1 configuration error, 2 training divergence,
3 simulation divergence, 4 a reproduction recipe missed its bounds.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema
import numpy as np

from .basis import build_basis, term_label
from .data import Dataset, Trajectory, read_csv, write_csv
from .errors import ConfigError, IntegrationError, OdenetError, TrainingDivergedError
from .integrate import IntegratorConfig, TimeGrid, integrate_batch
from .model import CoefficientMatrix, ODEModel
from .noise import noise_gaussianity_report, write_report_csv
from .sindy import DEFAULT_LAMBDAS, compare_models, sindy_fit
from .systems import ReferenceSystem, generate_dataset, make_actin, make_lorenz, make_lv
from .train import FittedModel, TrainConfig, estimate_hidden_initial, train

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_SIMULATION, EXIT_RECIPE = 0, 1, 2, 3, 4

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}


def _dataclass_schema(cls, skip=()) -> dict:
    kinds = {"int": {"type": "integer"}, "float": _NUM, "bool": {"type": "boolean"}, "str": {"type": "string"}}
    props = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        base = str(f.type).split("|")[0].strip()
        spec = dict(kinds.get(base, {}))
        if "None" in str(f.type):
            spec = {"anyOf": [spec, {"type": "null"}]}
        props[f.name] = spec
    return {"type": "object", "properties": props, "additionalProperties": False}


GENERATOR_SCHEMA = {
    "type": "object",
    "required": ["system"],
    "additionalProperties": False,
    "properties": {
        "system": {"enum": ["lv", "lorenz", "actin"]},
        "regime": {"enum": ["over_damped", "spiral", "limit_cycle"]},
        "kind": {"enum": ["data_driven", "physical"]},
        "salt": {"enum": ["KCl", "MgCl2"]},
        "eps": {"type": "number", "minimum": 0},
        "dt": {"anyOf": [_POS, {"type": "array", "items": _NUM, "minItems": 3}]},
        "horizon": _POS,
        "initial_conditions": {"type": "array", "items": {"type": "array", "items": _NUM}, "minItems": 1},
    },
}

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "basis"],
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"path": {"type": "string"}, "generator": GENERATOR_SCHEMA},
            "minProperties": 1,
            "maxProperties": 1,
        },
        "basis": {
            "type": "object",
            "additionalProperties": False,
            "required": ["d", "p"],
            "properties": {
                "d": {"type": "integer", "minimum": 1},
                "p": {"type": "integer", "minimum": 0},
                "names": {"type": "array", "items": {"type": "string"}},
            },
        },
        "train": _dataclass_schema(TrainConfig, skip=("integrator", "seed")),
        "integrator": _dataclass_schema(IntegratorConfig),
        "mode": {"enum": ["odenet", "sindy"]},
        "output": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "structure": {"enum": ["dense", "system"]},
        "hidden": {
            "type": "object",
            "additionalProperties": False,
            "required": ["elongation_guess"],
            "properties": {"elongation_guess": _POS, "observed_index": {"type": "integer", "minimum": 0}},
        },
        "initial_coefficients": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["equation", "term", "value"],
                "properties": {"equation": {"type": "string"}, "term": {"type": "string"}, "value": _NUM},
            },
        },
        "sindy": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambdas": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "max_rounds": {"type": "integer", "minimum": 1},
                "selection": {"enum": ["simulation", "derivative"]},
            },
        },
    },
}


def validate_config(cfg: dict) -> dict:
    """Schema-check a run config and the dataclasses it feeds; return it unchanged."""
    try:
        jsonschema.validate(cfg, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid run config at {where}: {exc.message}") from None
    try:
        IntegratorConfig(**cfg.get("integrator", {}))
        TrainConfig(**cfg.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid run config: {exc}") from None
    return cfg


def load_config(source) -> dict:
    if isinstance(source, dict):
        return validate_config(json.loads(json.dumps(source)))
    try:
        with open(source, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {source}: {exc}") from None
    return validate_config(cfg)


def system_from_spec(gen: dict) -> ReferenceSystem:
    name = gen["system"]
    if name == "lv":
        return make_lv(gen.get("regime", "limit_cycle"))
    if name == "lorenz":
        return make_lorenz()
    return make_actin(gen.get("kind", "physical"), gen.get("salt", "MgCl2"))


def _dump_json(path: Path, obj):
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- generate -------------------------------------------------------------------


def cmd_generate(gen: dict, out, seed: int = 0) -> Path:
    """Simulate a reference system; write one CSV per trajectory and a manifest.

    Hidden components are left out of the CSV columns and listed in the
    manifest.  Noise-free copies go to ``clean_*.csv`` for evaluation.
    """
    jsonschema.validate(gen, GENERATOR_SCHEMA)
    system = system_from_spec(gen)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    noisy, clean = generate_dataset(
        system,
        initial_conditions=gen.get("initial_conditions"),
        horizon=gen.get("horizon"),
        dt=gen.get("dt"),
        eps=gen.get("eps", 0.0),
        rng=np.random.default_rng(seed),
    )
    names = list(system.basis.names)
    obs = system.observed
    obs_names = [n for n, o in zip(names, obs) if o]
    files, clean_files = [], []
    for i, (tr, cl) in enumerate(zip(noisy, clean)):
        f, c = f"traj_{i:03d}.csv", f"clean_{i:03d}.csv"
        write_csv(out / f, tr.times, tr.values[:, obs], obs_names)
        write_csv(out / c, cl.times, cl.values, names)
        files.append(f)
        clean_files.append(c)
    manifest = {
        "generator": gen,
        "seed": seed,
        "system": system.name,
        "model": system.model.to_dict(),
        "names": names,
        "observed": [bool(o) for o in obs],
        "hidden": [n for n, o in zip(names, obs) if not o],
        "conserved_totals": system.conserved_totals,
        "initial_conditions": np.asarray(
            gen.get("initial_conditions", system.initial_conditions), float).tolist(),
        "files": files,
        "clean_files": clean_files,
    }
    path = out / "manifest.json"
    _dump_json(path, manifest)
    return path


def _read_dataset(paths, names, observed, totals, directory: Path) -> Dataset:
    trajs = []
    for i, f in enumerate(paths):
        cols, t, v = read_csv(directory / f)
        full = np.full((t.size, len(names)), np.nan)
        for j, c in enumerate(cols):
            if c not in names:
                raise ConfigError(f"{f}: unexpected column {c!r}")
            full[:, names.index(c)] = v[:, j]
        total = totals[i] if totals else None
        trajs.append(Trajectory(t, full, observed, total))
    return Dataset(trajs)


def load_dataset(path) -> tuple[Dataset, dict | None, Dataset | None]:
    """``(dataset, manifest or None, clean dataset or None)`` from a manifest, directory or CSV."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise ConfigError(f"dataset not found: {path}")
    if path.suffix == ".csv":
        cols, t, v = read_csv(path)
        return Dataset([Trajectory(t, v)]), None, None
    with path.open(encoding="utf-8") as fh:
        man = json.load(fh)
    names, observed = man["names"], np.array(man["observed"], bool)
    totals = man.get("conserved_totals")
    data = _read_dataset(man["files"], names, observed, totals, path.parent)
    clean = None
    if man.get("clean_files"):
        clean = _read_dataset(man["clean_files"], names, observed, totals, path.parent)
    return data, man, clean


# -- fit ------------------------------------------------------------------------


@dataclass
class FitOutcome:
    model: ODEModel
    fitted: FittedModel | None
    dataset: Dataset
    clean: Dataset | None
    manifest: dict | None
    runtime: float
    output: Path
    sindy_lambda: float | None = None


def _apply_initial_coefficients(theta: CoefficientMatrix, basis, entries) -> CoefficientMatrix:
    labels = [term_label(basis, j) for j in range(basis.size)]
    for e in entries:
        if e["equation"] not in basis.names:
            raise ConfigError(f"unknown equation {e['equation']!r}")
        if e["term"] not in labels:
            raise ConfigError(f"unknown term {e['term']!r}")
        i, j = basis.names.index(e["equation"]), labels.index(e["term"])
        if not theta.free_mask[i, j]:
            raise ConfigError(f"d{e['equation']}/dt term {e['term']} is not a free coefficient")
        theta.values[i, j] = e["value"]
    theta.set_free(theta.values[theta.free_mask])
    return theta


def cmd_fit(cfg: dict, out=None, seed: int | None = None, mode: str | None = None) -> FitOutcome:
    """Fit a model as described by ``cfg`` and write its artifacts to ``out``.

    Files: ``model.json``, ``equations.txt``, ``run.json``; ODENet mode adds
    ``train.log`` and ``sidecar.json`` (plus ``noise_report.csv`` when the
    noise field is learned); SINDy mode adds ``sindy.json``.
    """
    cfg = validate_config(cfg)
    seed = cfg.get("seed", 0) if seed is None else seed
    mode = mode or cfg.get("mode", "odenet")
    out = Path(out or cfg.get("output", "odenet-run"))
    out.mkdir(parents=True, exist_ok=True)

    ds_spec = cfg["dataset"]
    if "generator" in ds_spec:
        cmd_generate(ds_spec["generator"], out / "data", seed)
        data_path = out / "data"
    else:
        data_path = ds_spec["path"]
    data, manifest, clean = load_dataset(data_path)

    b = cfg["basis"]
    names = b.get("names") or (manifest["names"] if manifest else None)
    basis = build_basis(b["d"], b["p"], names)
    if basis.dimension != data.dimension:
        raise ConfigError(f"basis dimension {basis.dimension} but data has {data.dimension} components")

    template = None
    if cfg.get("structure", "dense") == "system":
        if not manifest:
            raise ConfigError("structure 'system' needs a generated dataset with a manifest")
        template = system_from_spec(manifest["generator"]).fit_template()

    run_record = {"config": cfg, "seed": seed, "mode": mode}
    _dump_json(out / "run.json", run_record)
    t_start = time.perf_counter()
    fitted = None
    lam = None
    if mode == "sindy":
        opts = cfg.get("sindy", {})
        fit = sindy_fit(data, basis, opts.get("lambdas", DEFAULT_LAMBDAS), seed,
                        opts.get("val_fraction", 0.2), opts.get("max_rounds", 20),
                        opts.get("selection", "simulation"))
        model, lam = fit.model, fit.lambda_cut
        _dump_json(out / "sindy.json", {"lambda": fit.lambda_cut,
                                        "validation": {f"{k:.6g}": v for k, v in fit.validation.items()}})
    else:
        tc = dict(cfg.get("train", {}))
        tcfg = TrainConfig(seed=seed, integrator=IntegratorConfig(**cfg.get("integrator", {})), **tc)
        theta0 = None
        if cfg.get("initial_coefficients"):
            theta0 = template.copy() if template is not None else CoefficientMatrix(np.zeros((basis.dimension, basis.size)))
            theta0 = _apply_initial_coefficients(theta0, basis, cfg["initial_coefficients"])
        hidden = None
        if data.hidden.size:
            h = cfg.get("hidden")
            if not h:
                raise ConfigError("dataset has hidden components; add a 'hidden' section with elongation_guess")
            idx = h.get("observed_index", int(np.flatnonzero(data.observed)[0]))
            hidden = np.array([[estimate_hidden_initial(tr, h["elongation_guess"], idx)] * data.hidden.size
                               for tr in data])
        with (out / "train.log").open("w", encoding="utf-8", newline="\n") as logf:
            fitted = train(data, basis, tcfg, theta0=theta0, hidden_init=hidden, template=template,
                           log_sink=lambda line: logf.write(line + "\n"))
        model = fitted.model
        fitted.save(out / "model.json", out / "sidecar.json")
        if fitted.noise is not None:
            write_report_csv(out / "noise_report.csv", noise_gaussianity_report(fitted.noise))
    runtime = time.perf_counter() - t_start
    with (out / "model.json").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(model.to_json() + "\n")
    (out / "equations.txt").write_text("\n".join(model.render_equations(4)) + "\n", encoding="utf-8")
    return FitOutcome(model, fitted, data, clean, manifest, runtime, out, lam)


# -- simulate -------------------------------------------------------------------


def load_model(path) -> ODEModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model {path}: {exc}") from None
    if "model" in doc and "files" in doc:  # a generation manifest
        doc = doc["model"]
    return ODEModel.from_dict(doc)


def cmd_simulate(model: ODEModel, x0, horizon: float, dt: float, out, t0: float = 0.0,
                 cfg: IntegratorConfig | None = None) -> Path:
    """Integrate ``model`` from ``x0`` and write ``trajectory.csv``.

    On divergence the rows computed before the failure are still written and
    the integration error is re-raised.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    x0 = np.asarray(x0, float)
    if x0.shape != (model.dimension,):
        raise ConfigError(f"x0 needs {model.dimension} components")
    grid = TimeGrid.uniform(t0, t0 + horizon, dt)
    sol = integrate_batch(model, x0[None], grid.intervals[None], cfg or IntegratorConfig(), t0=t0)
    states = np.concatenate([x0[None], sol.states[0]])
    path = out / "trajectory.csv"
    err = sol.errors[0] if sol.errors else None
    keep = grid.times.size
    if err is not None:
        keep = int(np.searchsorted(grid.times, err.time, side="left"))
        keep = max(1, min(keep, int(np.argmax(~np.all(np.isfinite(states), axis=1))) or keep))
    write_csv(path, grid.times[:keep], states[:keep], model.basis.names)
    if err is not None:
        raise err
    return path


# -- compare --------------------------------------------------------------------


def coefficient_table(truth: ODEModel, fitted: ODEModel, precision: int = 3) -> str:
    """Side-by-side coefficients of every term active in either model."""
    b = truth.basis
    t = np.where(truth.theta.active, truth.theta.values, 0.0)
    f = np.where(fitted.theta.active, fitted.theta.values, 0.0)
    cols = [(i, j) for i in range(b.dimension) for j in range(b.size) if t[i, j] != 0 or f[i, j] != 0]
    heads = [f"d{b.names[i]}:{term_label(b, j)}" for i, j in cols]
    width = max([12] + [len(h) + 2 for h in heads])
    lines = ["".ljust(8) + "".join(h.rjust(width) for h in heads)]
    for label, v in (("Model", t), ("Fitted", f)):
        cells = [f"{v[i, j]:.{precision}g}" if v[i, j] != 0 else "0" for i, j in cols]
        lines.append(label.ljust(8) + "".join(c.rjust(width) for c in cells))
    return "\n".join(lines)


def cmd_compare(truth: ODEModel, fitted: ODEModel, out=None) -> dict:
    if truth.basis.terms != fitted.basis.terms:
        raise ConfigError("truth and fitted models use different bases")
    metrics = compare_models(truth, fitted)
    text = coefficient_table(truth, fitted)
    notes = []
    if metrics["precision"] < 1:
        notes.append(f"WARNING: precision {metrics['precision']:.3f} < 1 ({metrics['spurious']} spurious terms)")
    if metrics["recall"] < 1:
        notes.append(f"WARNING: recall {metrics['recall']:.3f} < 1 ({metrics['missed']} missed terms)")
    notes.append(f"max relative error {metrics['max_relative_error']:.4g}; "
                 f"exact active set: {metrics['exact_active_set']}; failed: {metrics['failed']}")
    text = text + "\n" + "\n".join(notes) + "\n"
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "metrics.json", metrics)
        (out / "comparison.txt").write_text(text, encoding="utf-8")
    metrics["text"] = text
    return metrics


# -- entry point ----------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odenet", description="Sparse ODE discovery from time series.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="run config JSON")
        sp.add_argument("--seed", type=int, default=None, help="RNG seed (overrides the config)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")

    g = sub.add_parser("generate", help="simulate a reference system to CSV")
    common(g, True)
    f = sub.add_parser("fit", help="fit a sparse model to a dataset")
    common(f, True)
    f.add_argument("--mode", choices=["odenet", "sindy"], default=None)
    s = sub.add_parser("simulate", help="integrate a stored model")
    common(s)
    s.add_argument("--model", required=True, help="model JSON (or a generation manifest)")
    s.add_argument("--x0", required=True, help="comma-separated initial state")
    s.add_argument("--horizon", type=float, required=True)
    s.add_argument("--dt", type=float, required=True)
    s.add_argument("--t0", type=float, default=0.0)
    c = sub.add_parser("compare", help="compare a fitted model with the truth")
    common(c)
    c.add_argument("--truth", required=True, help="truth model JSON or generation manifest")
    c.add_argument("--fitted", required=True, help="fitted model JSON")
    r = sub.add_parser("report", help="run reproduction recipes and summarise them in Markdown")
    common(r)
    r.add_argument("--run", default=None, help="comma-separated recipe ids to run first, or 'all'")
    r.add_argument("--list", action="store_true", help="list recipe ids and exit")
    return p


def _generator_from_config(cfg: dict) -> dict:
    if "dataset" in cfg:
        cfg = validate_config(cfg)
        if "generator" not in cfg["dataset"]:
            raise ConfigError("generate needs dataset.generator in the run config")
        return cfg["dataset"]["generator"]
    try:
        jsonschema.validate(cfg, GENERATOR_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid generator spec: {exc.message}") from None
    return cfg


def _run(args) -> int:
    if args.verb == "generate":
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
        gen = _generator_from_config(raw)
        seed = args.seed if args.seed is not None else raw.get("seed", 0)
        path = cmd_generate(gen, args.out or raw.get("output", "odenet-data"), seed)
        print(path)
    elif args.verb == "fit":
        res = cmd_fit(load_config(args.config), args.out, args.seed, args.mode)
        print("\n".join(res.model.render_equations(4)))
    elif args.verb == "simulate":
        model = load_model(args.model)
        try:
            x0 = [float(v) for v in args.x0.split(",")]
        except ValueError:
            raise ConfigError(f"cannot parse --x0 {args.x0!r}") from None
        print(cmd_simulate(model, x0, args.horizon, args.dt, args.out or ".", args.t0))
    elif args.verb == "compare":
        res = cmd_compare(load_model(args.truth), load_model(args.fitted), args.out)
        print(res["text"], end="")
    elif args.verb == "report":
        from . import recipes

        if args.list:
            for rid, rec in recipes.RECIPES.items():
                print(f"{rid}\tcriterion {rec.criterion}\t{rec.title}")
            return EXIT_OK
        out = Path(args.out or "odenet-report")
        ok = True
        if args.run:
            ids = list(recipes.RECIPES) if args.run == "all" else args.run.split(",")
            for rid in ids:
                result = recipes.run_recipe(rid.strip(), out, seed=args.seed)
                print(result.summary_line())
                ok &= result.passed
        path = recipes.write_report(out)
        print(path)
        if not ok:
            return EXIT_RECIPE
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    if args.threads:
        try:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(args.threads)
        except ImportError:  # pragma: no cover - threadpoolctl ships with scikit-learn
            log.warning("threadpoolctl not installed; --threads ignored")
    try:
        return _run(args)
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except IntegrationError as exc:
        print(f"simulation diverged: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except (ConfigError, OdenetError, jsonschema.ValidationError, OSError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        if limiter is not None:
            limiter.unregister() if hasattr(limiter, "unregister") else None


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
