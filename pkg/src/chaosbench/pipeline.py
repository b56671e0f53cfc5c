"""Stage runner: generate -> train-ae -> train -> evaluate -> diagnose -> ablate -> report.

Artifacts live under ``<output_root>/<benchmark>/`` with fixed names::

    data/dataset.chbk
    ae/autoencoder.chbk, ae/train_log.csv, ae/reconstruction.json, ae/spectrum.csv, ae/relative_error.csv
    <model>/seed<s>/model.chbk, train_log.csv, per_trajectory.csv, rmse_vs_time.csv, aggregate.json
    diagnostics/seed<s>/samples_<model>.csv, summary.json [, kde.csv, pca.csv]
    ablation/<variant>/seed<s>/...   ablation/summary.json, ablation/log_ratios.csv
    report/summary.json, report/tables.txt
    manifest.json

Every stage is recorded in the manifest with the hash of the configuration it
depends on and the hashes of its input and output files; a stage whose record
still matches is skipped.
"""

from __future__ import annotations

import csv
import fcntl
import hashlib
import json
import logging
import platform
import time
from contextlib import contextmanager, nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .autoencoders import (
    default_autoencoder,
    encode_dataset,
    load_autoencoder,
    reconstruction_report,
    save_autoencoder,
    train_autoencoder,
)
from .config import ExperimentConfig, config_hash, default_depth
from .diagnostics import run_diagnostics, write_diagnostics
from .evaluation import evaluate_model, percentile, read_per_trajectory, write_evaluation, write_json
from .models.registry import ABLATION_VARIANTS, REFERENCE_SIZES, benchmark_specs, build_model, load_model, save_model, variant_spec
from .report import write_report
from .systems.dataset import TrajectoryDataset, generate_dataset
from .training import NormStats, compute_norm_stats, train_model, write_log_csv

log = logging.getLogger(__name__)

ARCH_KEYS = ("width", "depth", "hidden", "layers", "channels", "blocks", "kernel", "substeps", "dt", "h_ode",
             "rtol", "atol", "max_steps")
TRAIN_KEYS = ("lr", "weight_decay", "epochs", "batch_size")


class LockError(RuntimeError):
    pass


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Manifest:
    def __init__(self, path: Path):
        self.path = path
        self.entries: dict = {}
        if path.exists():
            self.entries = json.loads(path.read_text()).get("stages", {})

    def save(self) -> None:
        doc = {
            "versions": {"chaosbench": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "stages": self.entries,
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.path)


@contextmanager
def run_lock(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    fh = open(root / ".lock", "w")
    try:
        fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
    except OSError as exc:
        fh.close()
        raise LockError(f"{root} is locked by another run") from exc
    try:
        yield
    finally:
        fcntl.flock(fh, fcntl.LOCK_UN)
        fh.close()


def resolve_spec(cfg: ExperimentConfig, tag: str) -> dict:
    ov = cfg.model_overrides.get(tag, {})
    if tag in ("cord_v1", "cord_v2", "cord_v3", "mlp_v1", "mlp_v2"):
        spec = variant_spec(tag, cfg.width or REFERENCE_SIZES[cfg.benchmark]["mlp"][0], default_depth(cfg.benchmark))
    else:
        spec = benchmark_specs(cfg.benchmark, cfg.width)[tag]
    spec.update({k: v for k, v in ov.items() if k in ARCH_KEYS})
    return spec


def ablation_spec(cfg: ExperimentConfig, tag: str) -> dict:
    width = cfg.ablation.get("width") or cfg.width or REFERENCE_SIZES[cfg.benchmark]["mlp"][0]
    depth = cfg.ablation.get("depth") or default_depth(cfg.benchmark)
    return variant_spec(tag, width, depth)


def training_overrides(cfg: ExperimentConfig, tag: str) -> dict:
    return {k: v for k, v in cfg.model_overrides.get(tag, {}).items() if k in TRAIN_KEYS}


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, output_root=None, dry_run: bool = False):
        self.cfg = cfg
        self.dry_run = dry_run
        self._dirty: set = set()  # outputs a dry run would rewrite
        self.root = Path(output_root or cfg.output_root) / cfg.benchmark
        self.manifest = Manifest(self.root / "manifest.json")
        self.ran: list = []
        self.skipped: list = []

    # bookkeeping --------------------------------------------------------------
    def rel(self, p: Path) -> str:
        return str(Path(p).relative_to(self.root))

    def _fresh(self, key: str, h: str, inputs, outputs) -> bool:
        entry = self.manifest.entries.get(key)
        if entry is None or entry.get("status") != "ok" or entry["config_hash"] != h:
            return False
        if not all(p.exists() and p not in self._dirty for p in inputs):
            return False
        return (
            entry["inputs"] == {self.rel(p): file_hash(p) for p in inputs}
            and set(entry["outputs"]) == {self.rel(p) for p in outputs}
            and all(p.exists() and file_hash(p) == entry["outputs"][self.rel(p)] for p in outputs)
        )

    def _stage(self, key: str, stage: str, cfg_obj, inputs, outputs, fn) -> bool:
        h = config_hash(cfg_obj)
        if self._fresh(key, h, inputs, outputs):
            self.skipped.append(key)
            log.info("skip %s (up to date)", key)
            return False
        if self.dry_run:
            self.ran.append(key)
            self._dirty.update(outputs)
            log.info("would run %s", key)
            return False
        in_h = {self.rel(p): file_hash(p) for p in inputs}
        log.info("run %s", key)
        t0 = time.perf_counter()
        try:
            fn()
        except Exception as exc:
            self.manifest.entries[key] = {
                "stage": stage, "status": "failed", "config_hash": h, "inputs": in_h, "outputs": {},
                "error": f"{type(exc).__name__}: {exc}", "wall_time": time.perf_counter() - t0,
            }
            self.manifest.save()
            raise
        missing = [self.rel(p) for p in outputs if not p.exists()]
        if missing:
            raise RuntimeError(f"stage {key} did not produce {missing}")
        self.manifest.entries[key] = {
            "stage": stage, "status": "ok", "config_hash": h, "inputs": in_h,
            "outputs": {self.rel(p): file_hash(p) for p in outputs}, "wall_time": time.perf_counter() - t0,
        }
        self.manifest.save()
        self.ran.append(key)
        return True

    # paths ----------------------------------------------------------------------
    @property
    def data_path(self) -> Path:
        return self.root / "data" / "dataset.chbk"

    @property
    def ae_path(self) -> Path:
        return self.root / "ae" / "autoencoder.chbk"

    def model_dir(self, tag: str, seed: int, ablation: bool = False) -> Path:
        return (self.root / "ablation" / tag if ablation else self.root / tag) / f"seed{seed}"

    def eval_outputs(self, d: Path) -> list:
        return [d / "per_trajectory.csv", d / "rmse_vs_time.csv", d / "aggregate.json"]

    # data helpers ---------------------------------------------------------------
    def load_data(self) -> TrajectoryDataset:
        return TrajectoryDataset.load(self.data_path)

    def load_ae(self):
        return load_autoencoder(self.ae_path) if self.cfg.is_latent else None

    def training_data(self, ds, ae):
        return encode_dataset(ae, ds) if ae is not None else ds

    def upstream(self) -> list:
        return [self.data_path] + ([self.ae_path] if self.cfg.is_latent else [])

    # stages ---------------------------------------------------------------------
    def stage_generate(self) -> None:
        c = self.cfg

        def fn():
            generate_dataset(c.benchmark, c.dataset, c.seed).save(self.data_path)

        self._stage("generate", "generate", {"benchmark": c.benchmark, "seed": c.seed, "dataset": c.dataset},
                    [], [self.data_path], fn)

    def stage_train_ae(self) -> None:
        c = self.cfg
        if not c.is_latent:
            return
        d = self.ae_path.parent
        outs = [self.ae_path, d / "train_log.csv", d / "reconstruction.json", d / "spectrum.csv", d / "relative_error.csv"]

        def fn():
            ds = self.load_data()
            ae, hist = train_autoencoder(ds, c.ae_config(), default_autoencoder(c.benchmark, c.seed))
            save_autoencoder(self.ae_path, ae, {"best_epoch": ae.best_epoch, "train_config": ae.train_config})
            write_log_csv(d / "train_log.csv", hist)
            write_reconstruction(d, reconstruction_report(ae, ds))

        self._stage("train-ae", "train-ae", {"autoencoder": c.autoencoder, "seed": c.seed},
                    [self.data_path], outs, fn)

    def _train_one(self, tag: str, spec: dict, seed: int, train_over: dict, ablation: bool) -> None:
        c = self.cfg
        d = self.model_dir(tag, seed, ablation)
        ckpt = d / "model.chbk"
        tcfg = c.train_config(seed, train_over)

        def fn():
            ds = self.training_data(self.load_data(), self.load_ae())
            stats = compute_norm_stats(ds, "train")
            model = build_model(spec, ds.state_shape[-1], seed)
            res = train_model(model, ds, tcfg, stats)
            save_model(ckpt, model, res.stats.arrays(), {
                "system": c.benchmark, "seed": seed, "best_epoch": res.best_epoch, "best_val": res.best_val,
                "train_config": res.config, "source_split": stats.source_split, "n_samples": stats.n_samples,
                "n_parameters": model.num_parameters(),
            })
            write_log_csv(d / "train_log.csv", res.history)

        key = f"train/{'ablation/' if ablation else ''}{tag}/seed{seed}"
        self._stage(key, "train", {"spec": spec, "training": tcfg.__dict__}, self.upstream(),
                    [ckpt, d / "train_log.csv"], fn)

    def _evaluate_one(self, tag: str, seed: int, ablation: bool) -> None:
        d = self.model_dir(tag, seed, ablation)
        ckpt = d / "model.chbk"
        split = self.cfg.evaluation.get("split", "val")

        def fn():
            model, arrays, meta = load_model(ckpt)
            stats = NormStats.from_arrays(arrays, meta)
            res = evaluate_model(model, self.load_data(), stats, self.load_ae(), split)
            write_evaluation(d, res)

        key = f"evaluate/{'ablation/' if ablation else ''}{tag}/seed{seed}"
        self._stage(key, "evaluate", {"split": split}, self.upstream() + [ckpt], self.eval_outputs(d), fn)

    def stage_train(self) -> None:
        for tag in self.cfg.models:
            for s in self.cfg.seeds:
                self._train_one(tag, resolve_spec(self.cfg, tag), s, training_overrides(self.cfg, tag), False)

    def stage_evaluate(self) -> None:
        for tag in self.cfg.models:
            for s in self.cfg.seeds:
                self._evaluate_one(tag, s, False)

    def stage_diagnose(self) -> None:
        c = self.cfg
        if not c.diagnostics_enabled:
            return
        dcfg = c.diag_config()
        for s in c.seeds:
            d = self.root / "diagnostics" / f"seed{s}"
            ckpts = [self.model_dir(t, s) / "model.chbk" for t in c.models]
            outs = [d / f"samples_{t}.csv" for t in c.models] + [d / "summary.json"]
            if c.is_latent:
                outs += [d / "kde.csv", d / "pca.csv"]

            def fn(ckpts=ckpts, d=d):
                models = {}
                for t, p in zip(c.models, ckpts):
                    m, arrays, meta = load_model(p)
                    models[t] = (m, NormStats.from_arrays(arrays, meta))
                rep = run_diagnostics(models, self.load_data(), self.load_ae(), dcfg)
                write_diagnostics(d, rep)

            self._stage(f"diagnose/seed{s}", "diagnose", {"diagnostics": dcfg.__dict__, "models": c.models},
                        self.upstream() + ckpts, outs, fn)

    def stage_ablate(self) -> None:
        c = self.cfg
        if not c.ablation_enabled:
            return
        variants = list(c.ablation.get("variants", ABLATION_VARIANTS))
        over = dict(c.ablation.get("training", {}))
        for v in variants:
            for s in c.seeds:
                self._train_one(v, ablation_spec(c, v), s, over, True)
                self._evaluate_one(v, s, True)
        d = self.root / "ablation"
        inputs = [self.model_dir(v, s, True) / "per_trajectory.csv" for v in variants for s in c.seeds]

        def fn():
            write_ablation_summary(d, variants, c.seeds, lambda v, s: self.model_dir(v, s, True) / "per_trajectory.csv")

        self._stage("ablate/summary", "ablate", {"variants": variants, "seeds": c.seeds}, inputs,
                    [d / "summary.json", d / "log_ratios.csv"], fn)

    def stage_report(self) -> None:
        c = self.cfg
        inputs = [self.model_dir(t, s) / "per_trajectory.csv" for t in c.models for s in c.seeds]
        d = self.root / "report"

        def fn():
            write_report(self.root, d, c.models, c.seeds, c.benchmark)

        self._stage("report", "report", {"models": c.models, "seeds": c.seeds}, inputs,
                    [d / "summary.json", d / "tables.txt"], fn)

    def run(self, stages=None) -> "Pipeline":
        order = {
            "generate": self.stage_generate, "train-ae": self.stage_train_ae, "train": self.stage_train,
            "evaluate": self.stage_evaluate, "diagnose": self.stage_diagnose, "ablate": self.stage_ablate,
            "report": self.stage_report,
        }
        wanted = list(stages or self.cfg.stages)
        with nullcontext() if self.dry_run else run_lock(self.root):
            for name, fn in order.items():
                if name in wanted:
                    fn()
        return self


def pending_stages(cfg: ExperimentConfig, output_root=None, stages=None) -> list:
    """Stage keys that a run would execute; nothing is computed or written."""
    return Pipeline(cfg, output_root, dry_run=True).run(stages).ran


def run_pipeline(cfg: ExperimentConfig, output_root=None, stages=None) -> Pipeline:
    return Pipeline(cfg, output_root).run(stages)


def write_reconstruction(d: Path, rep) -> None:
    write_json(d / "reconstruction.json", {
        "mean_relative_error": rep.mean_relative_error,
        "parseval_convention": "sum of spectrum equals grid mean of squared field",
    })
    with open(d / "spectrum.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "data", "reconstruction"])
        for k, a, b in zip(rep.wavenumbers, rep.spectrum_true, rep.spectrum_recon):
            w.writerow([int(k), repr(float(a)), repr(float(b))])
    with open(d / "relative_error.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "relative_error"])
        for i, e in enumerate(rep.relative_error):
            w.writerow([i, repr(float(e))])


def write_ablation_summary(d: Path, variants, seeds, per_traj_path) -> dict:
    """Median log10 MSE with IQR per variant and per-trajectory log10(MSE_variant / MSE_cord)."""
    summary: dict = {"variants": {}, "seeds": list(seeds)}
    rows = []
    for v in variants:
        pooled, per_seed, ratios = [], {}, []
        for s in seeds:
            mse = read_per_trajectory(per_traj_path(v, s))["full_mse"]
            base = read_per_trajectory(per_traj_path("cord", s))["full_mse"]
            with np.errstate(divide="ignore", invalid="ignore"):
                lg = np.log10(mse)
                lr = np.log10(mse / base)
            pooled.append(lg)
            per_seed[str(s)] = percentile(mse, 50)
            ratios.append(lr)
            rows += [(v, s, i, float(x)) for i, x in enumerate(lr)]
        lg = np.concatenate(pooled)
        lr = np.concatenate(ratios)
        fin = lg[np.isfinite(lg)]
        q1, med, q3 = np.percentile(fin, [25, 50, 75]) if fin.size else (np.nan,) * 3
        rf = lr[np.isfinite(lr)]
        r1, rmed, r3 = np.percentile(rf, [25, 50, 75]) if rf.size else (np.nan,) * 3
        summary["variants"][v] = {
            "median_log10_mse": float(med), "iqr_log10_mse": float(q3 - q1), "q1": float(q1), "q3": float(q3),
            "median_mse_per_seed": per_seed, "n_diverged": int(np.sum(~np.isfinite(lg))),
            "log_ratio_median": float(rmed), "log_ratio_iqr": float(r3 - r1),
        }
    write_json(d / "summary.json", summary)
    with open(d / "log_ratios.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "traj_index", "log10_ratio_vs_cord"])
        for v, s, i, x in rows:
            w.writerow([v, s, i, repr(x)])
    return summary
