"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
``CHAOSBENCH_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .autoencoders import (
    AETrainingError,
    default_autoencoder,
    encode_dataset,
    load_autoencoder,
    reconstruction_report,
    save_autoencoder,
    train_autoencoder,
)
from .config import ConfigError, ExperimentConfig, from_dict, load_config, smoke_config
from .container import ContainerError
from .diagnostics import run_diagnostics, write_diagnostics
from .evaluation import evaluate_model, write_evaluation
from .models.dopri5 import StiffnessError
from .models.registry import ALL_TAGS, build_model, load_model, save_model
from .pipeline import LockError, Pipeline, pending_stages, resolve_spec, training_overrides, write_reconstruction
from .report import ReportError, format_tables, report
from .systems.dataset import GenerationError, TrajectoryDataset, generate_dataset
from .systems.pendulum import NumericalError
from .training import NormStats, TrainingError, compute_norm_stats, train_model, write_log_csv

log = logging.getLogger("chaosbench")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL_ERRORS = (TrainingError, AETrainingError, NumericalError, GenerationError, StiffnessError, FloatingPointError)
CONFIG_ERRORS = (ConfigError, ContainerError, ReportError, LockError, FileNotFoundError, KeyError, ValueError)


def _raw_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: expected a JSON object")
    return raw


def _experiment(path, system: str, seed: int | None = None) -> ExperimentConfig:
    raw = _raw_config(path)
    if raw.setdefault("benchmark", system) != system:
        raise ConfigError(f"config is for benchmark {raw['benchmark']!r} but the data is {system!r}")
    if seed is not None:
        raw["seed"] = seed
    return from_dict(raw)


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p} does not exist")
    return p


def cmd_generate(a) -> None:
    cfg = _experiment(a.config, a.system, a.seed)
    ds = generate_dataset(a.system, cfg.dataset, cfg.seed)
    ds.save(a.out)
    print(f"wrote {ds.n_trajectories} trajectories x {ds.n_snapshots} snapshots to {a.out}")


def cmd_train_ae(a) -> None:
    ds = TrajectoryDataset.load(_require(a.data))
    if ds.system != a.system:
        raise ConfigError(f"dataset holds {ds.system!r}, not {a.system!r}")
    if a.system not in ("ks", "kf"):
        raise ConfigError("autoencoders exist only for ks and kf")
    cfg = _experiment(a.config, a.system, a.seed)
    ae, hist = train_autoencoder(ds, cfg.ae_config(), default_autoencoder(a.system, cfg.seed))
    out = Path(a.out)
    save_autoencoder(out, ae, {"best_epoch": ae.best_epoch, "train_config": ae.train_config})
    write_log_csv(out.with_suffix(".log.csv"), hist)
    write_reconstruction(out.parent, reconstruction_report(ae, ds))
    print(f"autoencoder saved to {out} (best epoch {ae.best_epoch})")


def cmd_train(a) -> None:
    ds = TrajectoryDataset.load(_require(a.data))
    cfg = _experiment(a.config, ds.system)
    seed = a.seed if a.seed is not None else cfg.seeds[0]
    ae = load_autoencoder(_require(a.ae)) if a.ae else None
    if ds.system in ("ks", "kf") and ae is None:
        raise ConfigError(f"{ds.system} models train in latent space; pass --ae")
    data = ds if ae is None else encode_dataset(ae, ds)
    spec = resolve_spec(cfg, a.model)
    stats = compute_norm_stats(data, "train")
    model = build_model(spec, data.state_shape[-1], seed)
    res = train_model(model, data, cfg.train_config(seed, training_overrides(cfg, a.model)), stats)
    out = Path(a.out)
    save_model(out, model, stats.arrays(), {
        "system": ds.system, "seed": seed, "best_epoch": res.best_epoch, "best_val": res.best_val,
        "train_config": res.config, "source_split": stats.source_split, "n_samples": stats.n_samples,
        "n_parameters": model.num_parameters(),
    })
    write_log_csv(out.with_suffix(".log.csv"), res.history)
    print(f"{a.model}: {model.num_parameters()} parameters, best val {res.best_val:.4e} at epoch {res.best_epoch}")


def _load_ckpt(path):
    model, arrays, meta = load_model(_require(path))
    return model, NormStats.from_arrays(arrays, meta)


def cmd_evaluate(a) -> None:
    model, stats = _load_ckpt(a.model)
    ds = TrajectoryDataset.load(_require(a.data))
    ae = load_autoencoder(_require(a.ae)) if a.ae else None
    res = evaluate_model(model, ds, stats, ae, a.split)
    write_evaluation(a.out, res)
    print(json.dumps(res.aggregate(), default=float))


def cmd_diagnose(a) -> None:
    ds = TrajectoryDataset.load(_require(a.data))
    ae = load_autoencoder(_require(a.ae)) if a.ae else None
    cfg = _experiment(a.config, ds.system)
    models = {}
    for p in a.models:
        m, stats = _load_ckpt(p)
        key = m.tag if m.tag not in models else f"{m.tag}_{len(models)}"
        models[key] = (m, stats)
    rep = run_diagnostics(models, ds, ae, cfg.diag_config())
    write_diagnostics(a.out, rep)
    print(json.dumps(rep.summary()["models"], default=float, indent=1))


def _pipeline_config(a) -> ExperimentConfig:
    if getattr(a, "smoke", False):
        cfg = smoke_config(a.out or "runs", a.seed or 0)
    else:
        if not a.config:
            raise ConfigError("--config is required")
        cfg = load_config(a.config)
        if a.seed is not None:
            cfg.seed = a.seed
            cfg.seeds = [a.seed]
    return cfg


def cmd_run(a) -> None:
    cfg = _pipeline_config(a)
    if a.dry_run:
        pending = pending_stages(cfg, a.out, a.stages)
        print("\n".join(pending) if pending else "all stages up to date")
        return
    p = Pipeline(cfg, a.out).run(a.stages)
    print(f"{len(p.ran)} stages run, {len(p.skipped)} skipped; artifacts in {p.root}")


def cmd_ablate(a) -> None:
    cfg = _pipeline_config(a)
    cfg.ablation["enabled"] = True
    p = Pipeline(cfg, a.out).run(["generate", "train-ae", "ablate"])
    print((p.root / "ablation" / "summary.json").read_text())


def cmd_report(a) -> None:
    summary = report(_require(a.dir), a.models)
    print(format_tables(summary), end="")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chaosbench", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a trajectory dataset")
    g.add_argument("--system", choices=("dp", "ks", "kf"), required=True)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train-ae", help="train and freeze a field autoencoder")
    t.add_argument("--system", choices=("ks", "kf"), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_train_ae)

    t = sub.add_parser("train", help="train one temporal model")
    t.add_argument("--model", choices=ALL_TAGS, required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--ae")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", help="closed-loop rollouts and error metrics")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ae")
    e.add_argument("--split", default="val", choices=("val", "train", "all"))
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_evaluate)

    d = sub.add_parser("diagnose", help="Jacobian, bias, FTLE and attractor diagnostics")
    d.add_argument("--models", nargs="+", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--ae")
    d.add_argument("--config")
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_diagnose)

    for name, fn, help_ in (("run", cmd_run, "run the pipeline stages of a config"),
                            ("ablate", cmd_ablate, "train and compare the ablation variants")):
        r = sub.add_parser(name, help=help_)
        r.add_argument("--config")
        r.add_argument("--out", help="output root (overrides the config)")
        r.add_argument("--seed", type=int)
        r.add_argument("--smoke", action="store_true", help="use the built-in smoke configuration")
        if name == "run":
            r.add_argument("--stages", nargs="+")
            r.add_argument("--dry-run", action="store_true", help="list the stages that would run and exit")
        r.set_defaults(fn=fn)

    r = sub.add_parser("report", help="summary tables from evaluation outputs")
    r.add_argument("dir")
    r.add_argument("--models", nargs="+")
    r.set_defaults(fn=cmd_report)
    return ap


def _limit_threads():
    n = os.environ.get("CHAOSBENCH_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(int(n))
    except ValueError as exc:
        raise ConfigError(f"CHAOSBENCH_THREADS must be an integer, got {n!r}") from exc


def main(argv=None) -> int:
    ap = build_parser()
    try:
        a = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _limit_threads()
        a.fn(a)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
