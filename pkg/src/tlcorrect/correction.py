"""Posterior models from scarce high-fidelity pairs.

Four routes, all starting from a trained network prior (except the additive
baseline, which starts from the prior ODE):

* ``transfer_learn``: Adam on layers ``split_index..M`` with one-step MSE.
* ``last_layer_lsq``: the ``split_index = M`` case solved exactly. The frozen
  layers turn each input into a feature row ``[1, a(x)]`` and the output layer
  is the least-squares solution of ``A W_M = B``.
* ``transfer_learn_recurrent``: pairs ``k`` fine steps apart are matched by
  composing the network ``k`` times, backpropagating through the chain.
* ``gresnet_correct``: prior flow map plus a separately trained additive
  correction network.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from . import nnet
from .dynsys import SystemSpec, flow_map, make_system
from .fml import Dataset, TrainConfig, TrainHistory, fit, split_holdout, train_network

METHODS = ("tl-adam", "tl-lsq", "tl-recurrent", "gresnet")


class RankDeficiencyWarning(UserWarning):
    pass


class NonFiniteStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class PosteriorModel:
    params: nnet.NetParams
    freeze: nnet.FreezeSpec
    provenance: dict = field(default_factory=dict)

    def __call__(self, x):
        return nnet.predict(self.params, x)


def _posterior(prior, params, freeze, method, hf, **extra) -> PosteriorModel:
    for i in range(freeze.split_index):
        if params.layers[i].tobytes() != prior.layers[i].tobytes():
            raise AssertionError(f"frozen layer {i} changed during {method}")
    prov = {
        "method": method,
        "split_index": freeze.split_index,
        "hf_count": len(hf),
        "prior_id": nnet.params_hash(prior),
        **extra,
    }
    return PosteriorModel(params, freeze, prov)


def _require_unit_lag(hf: Dataset, what: str):
    if len(hf) and np.any(hf.k != 1):
        raise ValueError(
            f"{what} needs pairs one fine step apart; found k up to {int(hf.k.max())}. "
            "Use transfer_learn_recurrent for coarse pairs."
        )


def _starting_point(prior, freeze, cfg, cold_start):
    freeze.check(prior)
    if not cold_start:
        return prior
    fresh = nnet.init_params(prior.arch, cfg.seed)
    return prior.replace_layers(freeze.split_index, fresh.layers[freeze.split_index:])


def _history_extra(hist: TrainHistory) -> dict:
    return {
        "epochs_run": hist.epochs_run,
        "best_epoch": hist.best_epoch,
        "loss_history_tail": hist.tail(),
    }


def transfer_learn(
    prior: nnet.NetParams,
    hf: Dataset,
    freeze: nnet.FreezeSpec,
    cfg: TrainConfig,
    cold_start: bool = False,
) -> PosteriorModel:
    """Retrain layers ``freeze.split_index..M`` of ``prior`` on one-step pairs."""
    _require_unit_lag(hf, "transfer_learn")
    if hf.dim != prior.arch.input_dim:
        raise nnet.ShapeError(f"data dimension {hf.dim} != network input {prior.arch.input_dim}")
    start = _starting_point(prior, freeze, cfg, cold_start)
    params, hist = train_network(start, hf, cfg, freeze)
    return _posterior(prior, params, freeze, "tl-adam", hf, **_history_extra(hist))


# ---------------------------------------------------------------------------
# least squares on the output layer

def build_feature_matrix(prior: nnet.NetParams, inputs) -> np.ndarray:
    """Rows ``[1, a(x)]`` where ``a`` is the last hidden layer of ``prior``."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[0] == 0:
        return np.ones((0, prior.arch.hidden_width + 1))
    feats = nnet.hidden_features(prior, x)
    return np.hstack([np.ones((feats.shape[0], 1)), feats])


def build_target_matrix(prior: nnet.NetParams, hf: Dataset) -> np.ndarray:
    """Second entries of the pairs, minus the first when the net has a skip."""
    if prior.arch.residual:
        return hf.x2 - hf.x1
    return hf.x2.copy()


def solve_lsq(A: np.ndarray, B: np.ndarray, ridge: float = 0.0):
    """Minimize ``||A W - B||_F^2 + ridge ||W||_F^2``.

    Uses column-pivoted QR. When ``A`` (or its ridge augmentation) is
    numerically rank deficient the minimum-norm SVD solution is returned
    instead, together with a warning carrying the numerical rank.
    Returns ``(W, rank)``.
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    m, p = A.shape
    if ridge > 0:
        A = np.vstack([A, np.sqrt(ridge) * np.eye(p)])
        B = np.vstack([B, np.zeros((p, B.shape[1]))])
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(A.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < p:
        W, _, svd_rank, _ = np.linalg.lstsq(A, B, rcond=None)
        warnings.warn(
            RankDeficiencyWarning(
                f"feature matrix is rank deficient (numerical rank {svd_rank} of {p} columns); "
                "returning the minimum-norm solution"
            ),
            stacklevel=3,
        )
        return W, int(svd_rank)
    z = scipy.linalg.solve_triangular(R, Q.T @ B)
    W = np.empty_like(z)
    W[piv] = z
    return W, rank


def last_layer_lsq(prior: nnet.NetParams, hf: Dataset, ridge: float = 0.0) -> PosteriorModel:
    """Exact output-layer retraining via linear least squares."""
    _require_unit_lag(hf, "last_layer_lsq")
    A = build_feature_matrix(prior, hf.x1)
    B = build_target_matrix(prior, hf)
    W, rank = solve_lsq(A, B, ridge)
    params = prior.replace_layers(prior.M, [W])
    return _posterior(
        prior, params, nnet.FreezeSpec(prior.M), "tl-lsq", hf, ridge=ridge, rank=rank
    )


def lsq_objective(params: nnet.NetParams, hf: Dataset) -> float:
    """Sum of squared one-step errors, the objective both TL routes minimize."""
    r = nnet.predict(params, hf.x1) - hf.x2
    return float(np.sum(r * r))


# ---------------------------------------------------------------------------
# composed (recurrent) objective for coarse pairs

def compose(params: nnet.NetParams, x, k: int) -> np.ndarray:
    """Apply the network ``k`` times."""
    y = np.asarray(x, dtype=np.float64)
    for _ in range(k):
        y = nnet.predict(params, y)
    return y


def recurrent_loss_and_grad(params: nnet.NetParams, x1, x2, k, start: int = 0):
    """MSE between ``x2`` and the ``k``-fold composition applied to ``x1``.

    Rows must be sorted by ``k`` in non-increasing order so that the samples
    still being advanced at each depth form a leading slice. With every
    ``k == 1`` this performs exactly the operations of the one-step MSE.
    """
    k = np.asarray(k)
    if np.any(np.diff(k) > 0):
        raise ValueError("rows must be sorted by k in non-increasing order")
    kmax = int(k.max())
    counts = [int(np.count_nonzero(k >= depth)) for depth in range(1, kmax + 1)]
    caches = []
    cur = x1
    for depth, c in enumerate(counts, start=1):
        inp = cur if c == len(cur) else cur[:c]
        y, cache = nnet.forward(params, inp)
        if not np.all(np.isfinite(y)):
            bad = int(np.nonzero(~np.all(np.isfinite(y), axis=1))[0][0])
            raise NonFiniteStateError(f"non-finite state for sample {bad} at composition depth {depth}")
        caches.append(cache)
        if c == len(cur):
            cur = y
        else:
            cur = cur.copy()
            cur[:c] = y
    r = cur - x2
    scale = 1.0 / r.size
    loss = float(np.sum(r * r) * scale)
    g = (2.0 * scale) * r
    grads = None
    for depth in range(kmax, 0, -1):
        c = counts[depth - 1]
        gin = g if c == len(g) else g[:c]
        layer_grads, dx = nnet.backward(params, caches[depth - 1], gin, start=start,
                                        need_input_grad=depth > 1)
        if grads is None:
            grads = layer_grads
        else:
            grads = [a + b for a, b in zip(grads, layer_grads)]
        if depth > 1:
            if c == len(g):
                g = dx
            else:
                g = g.copy()
                g[:c] = dx
    return loss, grads


def _sort_by_lag(hf: Dataset) -> Dataset:
    order = np.argsort(-hf.k, kind="stable")
    if np.array_equal(order, np.arange(len(hf))):
        return hf
    return hf.subset(order)


def recurrent_loss(params: nnet.NetParams, data: Dataset) -> float:
    """Forward-only value of the composed objective."""
    data = _sort_by_lag(data)
    cur = data.x1
    for depth in range(1, int(data.k.max()) + 1):
        c = int(np.count_nonzero(data.k >= depth))
        if c == len(cur):
            cur = nnet.predict(params, cur)
        else:
            cur = cur.copy()
            cur[:c] = nnet.predict(params, cur[:c])
    r = cur - data.x2
    return float(np.sum(r * r) * (1.0 / r.size))


def transfer_learn_recurrent(
    prior: nnet.NetParams,
    hf: Dataset,
    freeze: nnet.FreezeSpec,
    cfg: TrainConfig,
    cold_start: bool = False,
) -> PosteriorModel:
    """Retrain layers ``split_index..M`` so that ``k``-fold compositions match coarse pairs."""
    if hf.dim != prior.arch.input_dim:
        raise nnet.ShapeError(f"data dimension {hf.dim} != network input {prior.arch.input_dim}")
    start = freeze.split_index
    params = _starting_point(prior, freeze, cfg, cold_start)
    train = hf
    val = None
    if cfg.patience is not None:
        train, hold = split_holdout(hf, cfg.holdout_fraction, cfg.seed)
        hold = _sort_by_lag(hold)
        val = lambda p: recurrent_loss(p, hold)  # noqa: E731
    train = _sort_by_lag(train)
    x1, x2, k = train.x1, train.x2, train.k
    n = len(train)

    def objective(p, idx):
        if len(idx) == n:
            return recurrent_loss_and_grad(p, x1, x2, k, start)
        idx = idx[np.argsort(-k[idx], kind="stable")]
        return recurrent_loss_and_grad(p, x1[idx], x2[idx], k[idx], start)

    params, hist = fit(params, objective, n, cfg, freeze, val)
    return _posterior(prior, params, freeze, "tl-recurrent", hf, max_lag=int(hf.k.max()),
                      **_history_extra(hist))


# ---------------------------------------------------------------------------
# additive baseline

@dataclass(frozen=True)
class GResNetModel:
    """Prior ODE flow map plus a learned additive correction."""

    prior_system: SystemSpec
    lag: float
    corrector: nnet.NetParams
    substeps: int = 10
    provenance: dict = field(default_factory=dict)

    def prior_part(self, x) -> np.ndarray:
        return flow_map(self.prior_system, x, self.lag, self.substeps)

    def correction(self, x) -> np.ndarray:
        return nnet.predict(self.corrector, x)

    def __call__(self, x):
        return self.prior_part(x) + self.correction(x)


def gresnet_correct(
    prior_system: SystemSpec,
    lag: float,
    hf: Dataset,
    arch: nnet.Architecture,
    cfg: TrainConfig,
    substeps: int = 10,
) -> GResNetModel:
    """Fit a correction network to ``x2 - prior_flow(x1)``.

    The correction net never carries an identity skip; the prior flow map
    already plays that role. Its output layer starts at zero.
    """
    _require_unit_lag(hf, "gresnet_correct")
    base = flow_map(prior_system, hf.x1, lag, substeps)
    residual_data = Dataset(hf.x1, hf.x2 - base, hf.k, hf.fine_step, hf.domain, hf.fidelity,
                            hf.source_system, hf.seed, dict(hf.meta))
    arch = nnet.Architecture(arch.input_dim, arch.hidden_layers, arch.hidden_width,
                             arch.activation, residual=False)
    params = nnet.init_params(arch, cfg.seed)
    # zero output layer: training starts from the prior flow map itself
    params = params.replace_layers(arch.hidden_layers, [np.zeros_like(params.layers[-1])])
    corrector, hist = train_network(params, residual_data, cfg, nnet.FreezeSpec(0))
    prov = {"method": "gresnet", "hf_count": len(hf), **_history_extra(hist)}
    return GResNetModel(prior_system, lag, corrector, substeps, prov)


# ---------------------------------------------------------------------------
# checkpoints

def save_posterior(path, model: PosteriorModel, seed=None) -> Path:
    return nnet.save_checkpoint(path, model.params, seed, model.provenance)


def load_posterior(path) -> PosteriorModel:
    params, doc = nnet.load_checkpoint(path)
    prov = doc.get("provenance", {})
    return PosteriorModel(params, nnet.FreezeSpec(int(prov.get("split_index", params.M))), prov)


def save_gresnet(path, model: GResNetModel, seed=None) -> Path:
    doc = nnet.params_to_dict(model.corrector, seed, model.provenance)
    doc["prior_system"] = {"name": model.prior_system.name, "params": dict(model.prior_system.params)}
    doc["lag"] = float(model.lag).hex()
    doc["substeps"] = model.substeps
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_gresnet(path) -> GResNetModel:
    doc = json.loads(Path(path).read_text())
    corrector = nnet.params_from_dict(doc)
    system = make_system(doc["prior_system"]["name"], doc["prior_system"]["params"])
    return GResNetModel(system, float.fromhex(doc["lag"]), corrector, int(doc["substeps"]),
                        doc.get("provenance", {}))
