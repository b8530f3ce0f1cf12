"""Flow-map data generation and training of the network prior."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import nnet
from .dynsys import Domain, IntegrationError, SystemSpec, flow_map

log = logging.getLogger(__name__)

WORKERS_ENV = "TLCORRECT_WORKERS"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObservationPair:
    x1: np.ndarray
    x2: np.ndarray
    k: int = 1


@dataclass
class Dataset:
    """Pairs stored column-wise: row ``j`` of ``x1``/``x2``/``k`` is pair ``j``."""

    x1: np.ndarray
    x2: np.ndarray
    k: np.ndarray
    fine_step: float
    domain: Domain
    fidelity: str = "low"
    source_system: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        self.x2 = np.asarray(self.x2, dtype=np.float64)
        self.k = np.asarray(self.k, dtype=np.int64)
        if self.x1.ndim != 2 or self.x1.shape != self.x2.shape or self.k.shape != (len(self.x1),):
            raise ValueError(
                f"inconsistent dataset shapes x1={self.x1.shape} x2={self.x2.shape} k={self.k.shape}"
            )
        if len(self.k) and self.k.min() < 1:
            raise ValueError("every pair needs k >= 1")
        if self.fidelity not in ("low", "high"):
            raise ValueError(f"fidelity must be 'low' or 'high', got {self.fidelity!r}")

    def __len__(self) -> int:
        return len(self.x1)

    @property
    def dim(self) -> int:
        return self.x1.shape[1]

    @property
    def pairs(self) -> list[ObservationPair]:
        return list(self)

    def __iter__(self) -> Iterator[ObservationPair]:
        for a, b, k in zip(self.x1, self.x2, self.k):
            yield ObservationPair(a, b, int(k))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, x1=self.x1[idx], x2=self.x2[idx], k=self.k[idx], meta=dict(self.meta))

    def metadata(self) -> dict:
        return {
            "system": self.source_system,
            "fine_step": self.fine_step,
            "domain": self.domain.to_dict(),
            "seed": self.seed,
            "J": len(self),
            "n": self.dim,
            "fidelity": self.fidelity,
            **self.meta,
        }


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10_000
    batch_size: int = 100
    lr: float = 1e-3
    patience: int | None = None
    seed: int = 0
    shuffle: bool = True
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError(f"invalid training config {self}")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 when given")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_loss: float = float("inf")
    epochs_run: int = 0
    stopped_early: bool = False

    def tail(self, n: int = 10) -> list:
        return [float(v) for v in self.train_loss[-n:]]


# ---------------------------------------------------------------------------
# data generation

def _lag_choices(lag_steps) -> np.ndarray:
    choices = np.atleast_1d(np.asarray(lag_steps, dtype=np.int64))
    if choices.size == 0 or choices.min() < 1:
        raise ValueError(f"lag steps must be positive integers, got {lag_steps!r}")
    return choices


def _draw_samples(domain, system, choices, seed, indices, n_traj_steps):
    """Per-sample draws seeded by (seed, index) so chunking cannot change them."""
    x0 = np.empty((len(indices), system.dim))
    ks = np.empty(len(indices), dtype=np.int64)
    starts = np.zeros(len(indices), dtype=np.int64)
    for row, j in enumerate(indices):
        rng = np.random.default_rng([seed, int(j)])
        x0[row] = system.complete(domain.sample(rng))
        ks[row] = choices[rng.integers(len(choices))] if len(choices) > 1 else choices[0]
        if n_traj_steps is not None:
            starts[row] = rng.integers(0, n_traj_steps - ks[row] + 1)
    return x0, ks, starts


def _integrate_windows(system, x0, starts, ks, fine_step, substeps, indices):
    """Integrate each sample to ``start + k`` steps, recording both window ends."""
    x1 = x0.copy()
    x2 = np.empty_like(x0)
    ends = starts + ks
    cur = x0.copy()
    for step in range(1, int(ends.max()) + 1 if len(ends) else 0):
        active = np.nonzero(ends >= step)[0]
        try:
            cur[active] = flow_map(system, cur[active], fine_step, substeps)
        except IntegrationError:
            for a in active:
                try:
                    flow_map(system, cur[a], fine_step, substeps)
                except IntegrationError:
                    raise IntegrationError(
                        f"{system.name}: integration blew up for sample {indices[a]} at step {step}"
                    ) from None
            raise
        hit = active[starts[active] == step]
        x1[hit] = cur[hit]
        hit = active[ends[active] == step]
        x2[hit] = cur[hit]
    return x1, x2


def _worker_count(workers):
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def generate_dataset(
    system: SystemSpec,
    domain: Domain,
    count: int,
    fine_step: float,
    lag_steps=1,
    substeps: int = 10,
    seed: int = 0,
    mode: str = "direct",
    horizon: float | None = None,
    fidelity: str = "low",
    workers: int | None = None,
) -> Dataset:
    """Sample ``count`` pairs ``(x1, x2, k)`` with ``x2`` ``k`` fine steps after ``x1``.

    ``mode="direct"`` draws ``x1`` uniformly in ``domain``. ``mode="trajectory"``
    draws an initial condition in ``domain``, integrates a trajectory of length
    ``horizon`` and takes a uniformly placed window of ``k`` steps from it.
    ``lag_steps`` is a constant or a collection drawn from uniformly.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if not fine_step > 0:
        raise ValueError("fine_step must be positive")
    if domain.dim not in (system.dim, system.diff_dim):
        raise ValueError(f"domain has {domain.dim} components, system {system.name} has {system.dim}")
    choices = _lag_choices(lag_steps)
    n_traj_steps = None
    if mode == "trajectory":
        if horizon is None:
            raise ValueError("trajectory mode needs a horizon")
        n_traj_steps = int(round(horizon / fine_step))
        if n_traj_steps < choices.max():
            raise ValueError(f"horizon {horizon} shorter than the largest lag {choices.max()} steps")
    elif mode != "direct":
        raise ValueError(f"unknown sampling mode {mode!r}")

    meta = {
        "mode": mode,
        "lag_steps": [int(c) for c in choices],
        "substeps": substeps,
        "horizon": horizon,
    }
    if count == 0:
        empty = np.empty((0, system.dim))
        return Dataset(empty, empty.copy(), np.empty(0, dtype=np.int64), fine_step, domain,
                       fidelity, system.name, seed, meta)

    def work(indices):
        x0, ks, starts = _draw_samples(domain, system, choices, seed, indices, n_traj_steps)
        x1, x2 = _integrate_windows(system, x0, starts, ks, fine_step, substeps, indices)
        return x1, x2, ks

    n_workers = _worker_count(workers)
    chunks = np.array_split(np.arange(count), n_workers)
    if n_workers == 1:
        results = [work(chunks[0])]
    else:
        with ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(work, chunks))
    x1 = np.concatenate([r[0] for r in results])
    x2 = np.concatenate([r[1] for r in results])
    ks = np.concatenate([r[2] for r in results])
    return Dataset(x1, x2, ks, fine_step, domain, fidelity, system.name, seed, meta)


def split_holdout(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < fraction < 1:
        raise ValueError(f"holdout fraction must lie in (0, 1), got {fraction}")
    n_hold = int(round(fraction * len(data)))
    if n_hold == 0 or n_hold == len(data):
        raise ValueError(f"fraction {fraction} of {len(data)} pairs leaves one side empty")
    perm = np.random.default_rng(seed).permutation(len(data))
    hold = np.sort(perm[:n_hold])
    train = np.sort(perm[n_hold:])
    return data.subset(train), data.subset(hold)


# ---------------------------------------------------------------------------
# objectives and the training loop

def mse_loss_and_grad(params: nnet.NetParams, x1, x2, start: int = 0):
    """Mean over samples and components of the squared one-step error."""
    y, cache = nnet.forward(params, x1)
    r = y - x2
    scale = 1.0 / r.size
    loss = float(np.sum(r * r) * scale)
    grads, _ = nnet.backward(params, cache, (2.0 * scale) * r, start=start, need_input_grad=False)
    return loss, grads


def mse_loss(params: nnet.NetParams, x1, x2) -> float:
    r = nnet.predict(params, x1) - x2
    return float(np.sum(r * r) * (1.0 / r.size))


Objective = Callable[[nnet.NetParams, np.ndarray], tuple]


def fit(
    params: nnet.NetParams,
    objective: Objective,
    n_samples: int,
    cfg: TrainConfig,
    freeze: nnet.FreezeSpec,
    val_loss: Callable[[nnet.NetParams], float] | None = None,
) -> tuple[nnet.NetParams, TrainHistory]:
    """Adam over mini-batches of sample indices.

    ``objective(params, idx)`` returns ``(loss, grads)`` with gradients for the
    trainable layers. With ``cfg.patience`` and ``val_loss`` the run stops once
    the validation loss has not improved for ``patience`` epochs and the best
    parameters seen are returned.
    """
    freeze.check(params)
    if n_samples < 1:
        raise ValueError("cannot train on an empty dataset")
    state = nnet.adam_init(params, freeze, lr=cfg.lr)
    hist = TrainHistory()
    best = params
    full = np.arange(n_samples)
    batch = min(cfg.batch_size, n_samples)
    early = cfg.patience is not None and val_loss is not None
    since_best = 0
    for epoch in range(cfg.epochs):
        if batch >= n_samples:
            batches = [full]
        else:
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n_samples) if cfg.shuffle else full
            batches = [order[i:i + batch] for i in range(0, n_samples, batch)]
        total = 0.0
        for idx in batches:
            loss, grads = objective(params, idx)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
            total += loss * len(idx)
            params, state = nnet.adam_step(state, params, grads, freeze)
        hist.train_loss.append(total / n_samples)
        hist.epochs_run = epoch + 1
        monitored = hist.train_loss[-1]
        if val_loss is not None:
            monitored = val_loss(params)
            if not np.isfinite(monitored):
                raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
            hist.val_loss.append(monitored)
        if monitored < hist.best_loss:
            hist.best_loss = monitored
            hist.best_epoch = epoch
            best = params
            since_best = 0
        else:
            since_best += 1
        if early and since_best >= cfg.patience:
            hist.stopped_early = True
            log.info("early stop at epoch %d (best %d)", epoch, hist.best_epoch)
            break
    return (best if early else params), hist


def train_network(
    params: nnet.NetParams, data: Dataset, cfg: TrainConfig, freeze: nnet.FreezeSpec
) -> tuple[nnet.NetParams, TrainHistory]:
    """One-step MSE training of layers ``freeze.split_index..M`` on ``data``."""
    start = freeze.split_index
    val = None
    train = data
    if cfg.patience is not None:
        train, hold = split_holdout(data, cfg.holdout_fraction, cfg.seed)
        val = lambda p: mse_loss(p, hold.x1, hold.x2)  # noqa: E731
    x1, x2 = train.x1, train.x2
    n = len(train)

    def objective(p, idx):
        if len(idx) == n:
            return mse_loss_and_grad(p, x1, x2, start)
        return mse_loss_and_grad(p, x1[idx], x2[idx], start)

    return fit(params, objective, n, cfg, freeze, val)


def train_prior(
    lf_data: Dataset, arch: nnet.Architecture, cfg: TrainConfig, init: nnet.NetParams | None = None
) -> tuple[nnet.NetParams, TrainHistory]:
    """Fit all layers of a fresh network to the low-fidelity pairs."""
    if lf_data.fidelity != "low":
        raise ValueError("train_prior expects a low-fidelity dataset")
    if arch.input_dim != lf_data.dim:
        raise ValueError(f"architecture input_dim {arch.input_dim} != data dimension {lf_data.dim}")
    if np.any(lf_data.k != lf_data.k[0]):
        raise ValueError("prior data must share a single lag")
    params = init if init is not None else nnet.init_params(arch, cfg.seed)
    return train_network(params, lf_data, cfg, nnet.FreezeSpec(0))


def default_lf_count(arch: nnet.Architecture) -> int:
    return 5 * arch.n_params()


# ---------------------------------------------------------------------------
# CSV files

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_dataset(data: Dataset, path) -> Path:
    """CSV of pairs plus a ``.json`` sidecar with the metadata."""
    path = Path(path)
    n = data.dim
    header = ["j", "k"] + [f"x1_{i}" for i in range(n)] + [f"x2_{i}" for i in range(n)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for j in range(len(data)):
            w.writerow([j, int(data.k[j])] + [_fmt(v) for v in data.x1[j]] + [_fmt(v) for v in data.x2[j]])
    path.with_suffix(".json").write_text(json.dumps(data.metadata(), indent=1, sort_keys=True) + "\n")
    return path


def read_dataset(path) -> Dataset:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n = sum(1 for h in header if h.startswith("x1_"))
    arr = np.array([[float(v) for v in row] for row in body]).reshape(len(body), 2 + 2 * n)
    d = meta["domain"]
    extra = {k: v for k, v in meta.items()
             if k not in ("system", "fine_step", "domain", "seed", "J", "n", "fidelity")}
    data = Dataset(
        arr[:, 2:2 + n], arr[:, 2 + n:], arr[:, 1].astype(np.int64), meta["fine_step"],
        Domain(tuple(d["lower"]), tuple(d["upper"]), d.get("kind", "box")),
        meta["fidelity"], meta["system"], meta["seed"], extra,
    )
    if len(data) != meta["J"]:
        raise ValueError(f"{path}: sidecar declares J={meta['J']} but file has {len(data)} rows")
    return data

