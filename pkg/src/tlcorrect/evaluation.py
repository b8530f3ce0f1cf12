"""Rollouts, ensemble error curves and CSV export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nnet
from .correction import GResNetModel, PosteriorModel
from .dynsys import Domain, IntegrationError, SystemSpec, flow_map

GUARD_FACTOR = 10.0


@dataclass(frozen=True)
class Predictor:
    """One-step map over ``step`` time units.

    ``kind`` is ``"net"`` (``model`` is ``NetParams``), ``"gresnet"``
    (``GResNetModel``) or ``"reference"`` (``SystemSpec`` integrated with
    ``substeps`` RK4 steps).
    """

    kind: str
    model: object
    step: float
    substeps: int = 10

    def __call__(self, x) -> np.ndarray:
        if self.kind == "net":
            return nnet.predict(self.model, x)
        if self.kind == "gresnet":
            return self.model(x)
        if self.kind == "reference":
            return flow_map(self.model, x, self.step, self.substeps)
        raise ValueError(f"unknown predictor kind {self.kind!r}")


def as_predictor(model, step: float, substeps: int = 10) -> Predictor:
    if isinstance(model, Predictor):
        return model
    if isinstance(model, nnet.NetParams):
        return Predictor("net", model, step)
    if isinstance(model, PosteriorModel):
        return Predictor("net", model.params, step)
    if isinstance(model, GResNetModel):
        return Predictor("gresnet", model, model.lag)
    if isinstance(model, SystemSpec):
        return Predictor("reference", model, step, substeps)
    raise TypeError(f"cannot make a predictor from {type(model).__name__}")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (steps + 1, n) or (steps + 1, B, n)
    truncated: np.ndarray | bool
    valid_steps: np.ndarray | int


@dataclass
class ErrorCurve:
    times: np.ndarray
    mean_l2: np.ndarray
    per_component: np.ndarray | None = None
    truncated: int = 0
    n_traj: int = 0

    def time_average(self) -> float:
        return float(np.mean(self.mean_l2)) if len(self.mean_l2) else 0.0


def _guard_bounds(guard):
    if guard is None:
        return None
    if isinstance(guard, Domain):
        return guard.guard_box(GUARD_FACTOR)
    lo, hi = guard
    return np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)


def rollout_batch(p: Predictor, x0, n_steps: int, guard=None) -> Trajectory:
    """Iterate ``p`` from each row of ``x0``.

    A trajectory that turns non-finite or leaves the guard box is frozen at
    its last valid state and flagged.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    B = x0.shape[0]
    bounds = _guard_bounds(guard)
    states = np.empty((n_steps + 1,) + x0.shape)
    states[0] = x0
    alive = np.ones(B, dtype=bool)
    valid = np.full(B, n_steps, dtype=np.int64)
    cur = x0
    for i in range(n_steps):
        nxt = cur.copy()
        idx = np.nonzero(alive)[0]
        if idx.size:
            with np.errstate(all="ignore"):
                stepped = p(cur if idx.size == B else cur[idx])
            ok = np.all(np.isfinite(stepped), axis=1)
            if bounds is not None:
                lo, hi = bounds
                sub = stepped[:, : lo.size]
                ok &= np.all((sub >= lo) & (sub <= hi), axis=1)
            nxt[idx[ok]] = stepped[ok]
            dead = idx[~ok]
            alive[dead] = False
            valid[dead] = i
        states[i + 1] = nxt
        cur = nxt
    times = np.arange(n_steps + 1) * p.step
    return Trajectory(times, states, ~alive, valid)


def rollout(p: Predictor, x0, n_steps: int, guard=None) -> Trajectory:
    """Single trajectory; stops early (and flags it) when the guard trips."""
    x0 = np.asarray(x0, dtype=np.float64)
    batch = rollout_batch(p, x0[None, :], n_steps, guard)
    valid = int(batch.valid_steps[0])
    truncated = bool(batch.truncated[0])
    keep = valid + 1 if truncated else n_steps + 1
    return Trajectory(batch.times[:keep], batch.states[:keep, 0], truncated, valid)


def _draw_ic(truth: SystemSpec, domain: Domain, seed: int, index: int, attempt: int) -> np.ndarray:
    key = [seed, index] if attempt == 0 else [seed, index, attempt]
    return truth.complete(domain.sample(np.random.default_rng(key)))


def initial_conditions(truth: SystemSpec, domain: Domain, n_traj: int, seed: int,
                       start_index: int = 0) -> np.ndarray:
    x0 = np.empty((n_traj, truth.dim))
    for row in range(n_traj):
        x0[row] = _draw_ic(truth, domain, seed, start_index + row, 0)
    return x0


MAX_REDRAWS = 1000


def contained_initial_conditions(truth: SystemSpec, domain: Domain, n_traj: int, seed: int,
                                 n_steps: int, step: float, substeps: int = 10,
                                 start_index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Initial conditions whose true trajectory stays in ``domain`` for ``n_steps``.

    Index ``j`` first tries the same draw as ``initial_conditions``; rejected
    indices are redrawn from a generator keyed on ``(seed, j, attempt)``, so
    each row is independent of ``n_traj``. Returns ``(x0, reference states)``.
    """
    x0 = initial_conditions(truth, domain, n_traj, seed, start_index)
    ref = reference_trajectories(truth, x0, n_steps, step, substeps)
    attempt = 0
    while True:
        flat = ref.reshape(-1, truth.dim)[:, : domain.dim]
        inside = np.all(domain.contains(flat).reshape(n_steps + 1, n_traj), axis=0)
        bad = np.nonzero(~inside)[0]
        if bad.size == 0:
            return x0, ref
        attempt += 1
        if attempt > MAX_REDRAWS:
            raise RuntimeError(
                f"{truth.name}: no contained trajectory after {MAX_REDRAWS} redraws for index "
                f"{start_index + int(bad[0])}"
            )
        for row in bad:
            x0[row] = _draw_ic(truth, domain, seed, start_index + int(row), attempt)
        ref[:, bad] = reference_trajectories(truth, x0[bad], n_steps, step, substeps)


def reference_trajectories(truth: SystemSpec, x0, n_steps: int, step: float,
                           substeps: int = 10) -> np.ndarray:
    states = np.empty((n_steps + 1,) + x0.shape)
    states[0] = x0
    cur = x0
    for i in range(n_steps):
        try:
            cur = flow_map(truth, cur, step, substeps)
        except IntegrationError:
            for row in range(len(x0)):
                try:
                    reference_trajectories(truth, x0[row:row + 1], n_steps, step, substeps)
                except IntegrationError:
                    raise IntegrationError(
                        f"{truth.name}: reference integration blew up from initial condition {x0[row].tolist()}"
                    ) from None
            raise
        states[i + 1] = cur
    return states


def _n_steps(horizon: float, step: float) -> int:
    n = int(round(horizon / step))
    if n < 0 or abs(n * step - horizon) > 1e-9 * max(abs(horizon), step):
        raise ValueError(f"horizon {horizon} is not a multiple of the step {step}")
    return n


def error_curve(
    model,
    truth: SystemSpec,
    domain: Domain,
    n_traj: int,
    horizon: float,
    step: float,
    seed: int,
    substeps: int = 10,
    start_index: int = 0,
    guard="domain",
    contain: bool = False,
) -> ErrorCurve:
    """Mean Euclidean error of ``model`` rollouts against the true system.

    Initial conditions are drawn uniformly in ``domain``, one generator per
    trajectory index. With ``contain`` only those whose true trajectory stays
    in ``domain`` up to ``horizon`` are kept. Truncated model trajectories keep
    their last valid state.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    n_steps = _n_steps(horizon, step)
    p = as_predictor(model, step, substeps)
    if contain:
        x0, ref = contained_initial_conditions(truth, domain, n_traj, seed, n_steps, step, substeps,
                                               start_index)
    else:
        x0 = initial_conditions(truth, domain, n_traj, seed, start_index)
        ref = reference_trajectories(truth, x0, n_steps, step, substeps)
    traj = rollout_batch(p, x0, n_steps, domain if guard == "domain" else guard)
    diff = traj.states - ref
    l2 = np.sqrt(np.sum(diff * diff, axis=-1))
    return ErrorCurve(
        times=np.arange(n_steps + 1) * step,
        mean_l2=l2.mean(axis=1),
        per_component=np.abs(diff).mean(axis=1),
        truncated=int(np.count_nonzero(traj.truncated)),
        n_traj=n_traj,
    )


# ---------------------------------------------------------------------------
# CSV

def _fmt(v) -> str:
    return format(float(v), ".17g")


def export_csv(obj, path) -> Path:
    """Write a single ``Trajectory`` or an ``ErrorCurve`` as CSV."""
    path = Path(path)
    if isinstance(obj, ErrorCurve):
        comps = obj.per_component
        ncomp = 0 if comps is None else comps.shape[1] if comps.ndim == 2 else 0
        header = ["t", "mean_l2"] + [f"comp_{i}" for i in range(ncomp)]
        rows = []
        for i, t in enumerate(obj.times):
            row = [_fmt(t), _fmt(obj.mean_l2[i])]
            if ncomp:
                row += [_fmt(v) for v in comps[i]]
            rows.append(row)
    elif isinstance(obj, Trajectory):
        states = np.asarray(obj.states)
        if states.ndim != 2:
            raise ValueError("export one trajectory at a time")
        header = ["t"] + [f"x_{i}" for i in range(states.shape[1])]
        rows = [[_fmt(t)] + [_fmt(v) for v in s] for t, s in zip(obj.times, states)]
    else:
        raise TypeError(f"cannot export {type(obj).__name__}")
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc.strerror or exc}") from exc
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(len(rows) - 1, len(header))
    return header, data
