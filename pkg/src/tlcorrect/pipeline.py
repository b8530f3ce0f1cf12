"""Staged experiment runner with a hashed manifest.

Stages run in order ``generate -> train-prior -> correct -> evaluate``. Each
stage records a key (hash of the config values it reads plus the hashes of
its input artifacts) and the hashes of what it wrote; a stage whose key and
outputs still match is skipped.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import logging
import os
import platform
import time
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import scipy

from . import nnet
from .config import ExperimentConfig, derive_seed, scaled, validate
from .correction import (
    gresnet_correct,
    last_layer_lsq,
    load_gresnet,
    load_posterior,
    save_gresnet,
    save_posterior,
    transfer_learn,
    transfer_learn_recurrent,
)
from .evaluation import (
    _n_steps,
    as_predictor,
    error_curve,
    export_csv,
    initial_conditions,
    reference_trajectories,
    rollout,
    Trajectory,
)
from .fml import generate_dataset, read_dataset, train_prior, write_dataset

log = logging.getLogger(__name__)

STAGES = ("generate", "train-prior", "correct", "evaluate")
MANIFEST = "manifest.json"
LOCK = ".tlcorrect.lock"
SEED_LABELS = ("lf-data", "hf-data", "prior", "correction", "evaluation")


class StageDependencyError(RuntimeError):
    pass


class LockedError(RuntimeError):
    pass


def file_hash(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


def derived_seeds(master: int) -> dict:
    return {label: derive_seed(master, label) for label in SEED_LABELS}


def artifact_names(cfg: ExperimentConfig) -> dict:
    stem = cfg.name
    return {
        "generate": ["lf_data.csv", "lf_data.json", "hf_data.csv", "hf_data.json"],
        "train-prior": ["prior.json"],
        "correct": ["posterior.json"],
        "evaluate": [
            f"{stem}_prior_error.csv",
            f"{stem}_posterior_error.csv",
            f"{stem}_truth_trajectory.csv",
            f"{stem}_prior_trajectory.csv",
            f"{stem}_posterior_trajectory.csv",
            "summary.json",
        ],
    }


@contextmanager
def _locked(out: Path):
    fh = (out / LOCK).open("w")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise LockedError(f"another run holds the lock on {out}") from None
        yield
    finally:
        fcntl.flock(fh, fcntl.LOCK_UN)
        fh.close()


def _write_json(path: Path, doc) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_manifest(out) -> dict:
    path = Path(out) / MANIFEST
    if not path.exists():
        return {}
    return json.loads(path.read_text())


def verify_manifest(out) -> list[str]:
    """Names of artifacts whose current hash differs from the manifest."""
    out = Path(out)
    bad = []
    for stage in load_manifest(out).get("stages", {}).values():
        for name, digest in stage["artifacts"].items():
            p = out / name
            if not p.exists() or file_hash(p) != digest:
                bad.append(name)
    return bad


# ---------------------------------------------------------------------------
# stages

class _Run:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.seeds = derived_seeds(cfg.seed)
        self.true_sys, self.prior_sys = cfg.systems()
        self.names = artifact_names(cfg)

    def need(self, stage: str, names) -> dict:
        owner = {n: s for s, ns in self.names.items() for n in ns}
        hashes = {}
        for name in names:
            p = self.out / name
            if not p.exists():
                raise StageDependencyError(
                    f"stage {stage!r} needs {p}, produced by stage {owner[name]!r}; run that stage first"
                )
            hashes[name] = file_hash(p)
        return hashes

    def key(self, stage: str) -> str:
        c = self.cfg
        if stage == "generate":
            return _key(stage, c.true_system, c.prior_system, c.domain.to_dict(), c.fine_step, c.substeps,
                        asdict(c.lf_data), asdict(c.hf_data), self.seeds["lf-data"], self.seeds["hf-data"])
        if stage == "train-prior":
            return _key(stage, asdict(c.architecture), asdict(c.prior_training), self.seeds["prior"],
                        self.need(stage, ["lf_data.csv", "lf_data.json"]))
        if stage == "correct":
            return _key(stage, asdict(c.correction), c.split_index(), asdict(c.architecture), c.prior_system,
                        c.fine_step, c.substeps, self.seeds["correction"],
                        self.need(stage, ["prior.json", "hf_data.csv", "hf_data.json"]))
        if stage == "evaluate":
            return _key(stage, c.name, asdict(c.evaluation), c.true_system, c.domain.to_dict(), c.fine_step,
                        c.substeps, self.seeds["evaluation"], self.need(stage, ["prior.json", "posterior.json"]))
        raise ValueError(stage)

    def generate(self) -> dict:
        c = self.cfg
        info = {}
        for label, spec, system, fidelity, seed in (
            ("lf_data", c.lf_data, self.prior_sys, "low", self.seeds["lf-data"]),
            ("hf_data", c.hf_data, self.true_sys, "high", self.seeds["hf-data"]),
        ):
            data = generate_dataset(
                system, c.domain, spec.count, c.fine_step, lag_steps=spec.lag_steps, substeps=c.substeps,
                seed=seed, mode=spec.mode, horizon=spec.horizon, fidelity=fidelity,
            )
            write_dataset(data, self.out / f"{label}.csv")
            info[label] = {"count": len(data), "seed": seed}
        return info

    def train_prior(self) -> dict:
        c = self.cfg
        lf = read_dataset(self.out / "lf_data.csv")
        tcfg = c.prior_training
        params, hist = train_prior(lf, c.arch(lf.dim), tcfg)
        prov = {"stage": "train-prior", "lf_count": len(lf), "epochs_run": hist.epochs_run,
                "best_epoch": hist.best_epoch, "loss_history_tail": hist.tail()}
        nnet.save_checkpoint(self.out / "prior.json", params, tcfg.seed, prov)
        return {"epochs_run": hist.epochs_run, "final_loss": hist.train_loss[-1] if hist.train_loss else None}

    def correct(self) -> dict:
        c = self.cfg
        prior, _ = nnet.load_checkpoint(self.out / "prior.json")
        hf = read_dataset(self.out / "hf_data.csv")
        method = c.correction.method
        tcfg = c.correction.training
        freeze = nnet.FreezeSpec(c.split_index())
        path = self.out / "posterior.json"
        if method == "tl-lsq":
            model = last_layer_lsq(prior, hf, c.correction.ridge)
        elif method == "tl-adam":
            model = transfer_learn(prior, hf, freeze, tcfg, c.correction.cold_start)
        elif method == "tl-recurrent":
            model = transfer_learn_recurrent(prior, hf, freeze, tcfg, c.correction.cold_start)
        elif method == "gresnet":
            g = gresnet_correct(self.prior_sys, c.fine_step, hf, prior.arch, tcfg, c.substeps)
            save_gresnet(path, g, tcfg.seed)
            return {"method": method}
        else:
            raise ValueError(f"unknown method {method!r}")
        save_posterior(path, model, tcfg.seed)
        return {"method": method, "split_index": freeze.split_index}

    def _load_posterior(self):
        doc = json.loads((self.out / "posterior.json").read_text())
        if doc.get("provenance", {}).get("method") == "gresnet":
            return load_gresnet(self.out / "posterior.json")
        return load_posterior(self.out / "posterior.json")

    def evaluate(self) -> dict:
        c = self.cfg
        ev = c.evaluation
        prior, _ = nnet.load_checkpoint(self.out / "prior.json")
        post = self._load_posterior()
        seed = self.seeds["evaluation"]
        curves = {}
        for label, model in (("prior", prior), ("posterior", post)):
            curves[label] = error_curve(model, self.true_sys, c.domain, ev.n_traj, ev.horizon, c.fine_step,
                                        seed, c.substeps, contain=ev.contain)
            export_csv(curves[label], self.out / f"{c.name}_{label}_error.csv")

        # one example trajectory per model
        n_steps = _n_steps(ev.horizon, c.fine_step)
        if ev.example_x0 is not None:
            x0 = self.true_sys.complete(np.asarray(ev.example_x0, dtype=np.float64))
        else:
            x0 = initial_conditions(self.true_sys, c.domain, 1, seed)[0]
        ref = reference_trajectories(self.true_sys, x0[None, :], n_steps, c.fine_step, c.substeps)[:, 0]
        times = np.arange(n_steps + 1) * c.fine_step
        export_csv(Trajectory(times, ref, False, n_steps), self.out / f"{c.name}_truth_trajectory.csv")
        truncated = {}
        for label, model in (("prior", prior), ("posterior", post)):
            traj = rollout(as_predictor(model, c.fine_step, c.substeps), x0, n_steps, c.domain)
            truncated[label] = bool(traj.truncated)
            export_csv(traj, self.out / f"{c.name}_{label}_trajectory.csv")

        p, q = curves["prior"].mean_l2, curves["posterior"].mean_l2
        summary = {
            "experiment": c.name,
            "n_traj": ev.n_traj,
            "horizon": ev.horizon,
            "contained_initial_conditions": ev.contain,
            "prior_time_average": curves["prior"].time_average(),
            "posterior_time_average": curves["posterior"].time_average(),
            "ratio": curves["posterior"].time_average() / curves["prior"].time_average(),
            "fraction_posterior_below": float(np.mean(q[1:] < p[1:])) if len(p) > 1 else 0.0,
            "truncated_rollouts": {k: v.truncated for k, v in curves.items()},
            "example_truncated": truncated,
        }
        _write_json(self.out / "summary.json", summary)
        return summary


def run_pipeline(cfg: ExperimentConfig, out, stages=None, scale: float | None = None) -> dict:
    """Run (or resume) ``stages`` of ``cfg`` into directory ``out``.

    ``scale`` overrides ``cfg.scale``. Returns the manifest.
    """
    cfg = scaled(cfg, scale)
    validate(cfg)
    seeds = derived_seeds(cfg.seed)
    # the echo should show the seeds actually used
    cfg.prior_training = replace(cfg.prior_training, seed=seeds["prior"])
    cfg.correction.training = replace(cfg.correction.training, seed=seeds["correction"])
    stages = list(STAGES) if stages is None else list(stages)
    for s in stages:
        if s not in STAGES:
            raise ValueError(f"unknown stage {s!r}; choose from {', '.join(STAGES)}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, out)
    with _locked(out):
        manifest = load_manifest(out)
        if manifest.get("config_digest") not in (None, cfg.digest()):
            log.info("config changed since the last run in %s", out)
        manifest.update({
            "format_version": 1,
            "experiment": cfg.name,
            "config": cfg.to_dict(),
            "config_digest": cfg.digest(),
            "seeds": {"master": cfg.seed, **run.seeds},
            "environment": {"python": platform.python_version(), "numpy": np.__version__,
                            "scipy": scipy.__version__},
        })
        records = manifest.setdefault("stages", {})
        for stage in STAGES:
            if stage not in stages:
                continue
            key = run.key(stage)
            names = run.names[stage]
            old = records.get(stage)
            if old and old["key"] == key and all(
                (out / n).exists() and file_hash(out / n) == old["artifacts"].get(n) for n in names
            ):
                log.info("%s: up to date", stage)
                continue
            log.info("%s: running", stage)
            t0 = time.perf_counter()
            info = getattr(run, stage.replace("-", "_"))()
            records[stage] = {
                "key": key,
                "artifacts": {n: file_hash(out / n) for n in names},
                "wall_time_s": round(time.perf_counter() - t0, 3),
                "info": info,
            }
            _write_json(out / MANIFEST, manifest)
        _write_json(out / MANIFEST, manifest)
    return manifest


__all__ = ["STAGES", "StageDependencyError", "LockedError", "run_pipeline", "load_manifest",
           "verify_manifest", "file_hash", "derived_seeds", "artifact_names"]
