"""Catalog of benchmark dynamical systems and a fixed-step RK4 integrator.

States are numpy arrays whose last axis holds the state components, so every
routine here works on a single state ``(n,)`` or a batch ``(B, n)`` alike.
All arithmetic is elementwise per sample, which makes batched and one-at-a-time
integration bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class SystemSpecError(ValueError):
    """Bad system name, parameters, or state shape."""


class IntegrationError(RuntimeError):
    """A non-finite value appeared while integrating."""


@dataclass(frozen=True)
class SystemSpec:
    """A right-hand side together with the parameters it is evaluated with.

    ``rhs(x, params)`` returns the derivative of the first
    ``dim - algebraic_dim`` components. When ``algebraic_dim > 0`` the trailing
    components are recomputed from the differential ones by ``algebraic``.
    """

    name: str
    dim: int
    params: Mapping[str, float]
    rhs: Callable[[np.ndarray, Mapping[str, float]], np.ndarray] = field(repr=False)
    algebraic_dim: int = 0
    algebraic: Callable[[np.ndarray, Mapping[str, float]], np.ndarray] | None = field(
        default=None, repr=False
    )
    state_names: tuple[str, ...] = ()

    @property
    def diff_dim(self) -> int:
        return self.dim - self.algebraic_dim

    def complete(self, x: np.ndarray) -> np.ndarray:
        """Fill in the algebraic components of ``x`` from its differential part."""
        x = np.array(x, dtype=np.float64)
        if self.algebraic_dim == 0:
            return x
        if x.shape[-1] == self.diff_dim:
            x = np.concatenate([x, np.zeros(x.shape[:-1] + (self.algebraic_dim,))], axis=-1)
        x[..., self.diff_dim:] = self.algebraic(x[..., : self.diff_dim], self.params)
        return x


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box used for sampling initial conditions.

    For systems with algebraic components the box covers only the
    differential components. ``kind="simplex"`` samples the probability
    simplex instead (uniform Dirichlet), clipped to the box.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    kind: str = "box"

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
            raise SystemSpecError(f"domain bounds must be equal-length vectors, got {self.lower} / {self.upper}")
        if not np.all(lo < hi):
            raise SystemSpecError(f"empty domain: need lower < upper componentwise, got {self.lower} / {self.upper}")
        if self.kind not in ("box", "simplex"):
            raise SystemSpecError(f"unknown domain kind {self.kind!r}")
        object.__setattr__(self, "lower", tuple(float(v) for v in lo))
        object.__setattr__(self, "upper", tuple(float(v) for v in hi))

    @property
    def dim(self) -> int:
        return len(self.lower)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        if self.kind == "simplex":
            return np.clip(rng.dirichlet(np.ones(self.dim)), lo, hi)
        return lo + (hi - lo) * rng.random(self.dim)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)[..., : self.dim]
        return np.all((x >= np.asarray(self.lower)) & (x <= np.asarray(self.upper)), axis=-1)

    def guard_box(self, factor: float = 10.0) -> tuple[np.ndarray, np.ndarray]:
        """Box with the same center whose side lengths are ``factor`` times larger."""
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        center = 0.5 * (lo + hi)
        half = 0.5 * factor * (hi - lo)
        return center - half, center + half

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper), "kind": self.kind}


# ---------------------------------------------------------------------------
# right-hand sides

def _harmonic(x, p):
    return np.stack([x[..., 1], -p["beta"] * x[..., 0]], axis=-1)


def _damped_pendulum(x, p):
    return np.stack([x[..., 1], -p["alpha"] * x[..., 1] - p["beta"] * np.sin(x[..., 0])], axis=-1)


def _duffing(x, p):
    x1 = x[..., 0]
    return np.stack([x[..., 1], -x1 - p["epsilon"] * x1**3], axis=-1)


def _van_der_pol(x, p):
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x2, p["mu"] * (1.0 - x1**2) * x2 - x1], axis=-1)


def _seir(x, p):
    s, e, i, r = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    mu, beta, sigma, gamma = p["mu"], p["beta"], p["sigma"], p["gamma"]
    # infection_source 1.0 reads sigma*I in the infected equation, 0.0 reads sigma*E
    source = i if p.get("infection_source", 0.0) else e
    return np.stack(
        [
            mu * (1.0 - s) - beta * s * i,
            beta * s * i - (mu + sigma) * e,
            sigma * source - (mu + gamma) * i,
            gamma * i - mu * r,
        ],
        axis=-1,
    )


def _hill_transcription(p, idx, activator):
    return p[f"V{idx}"] / (
        1.0
        + (p["P"] / p[f"Ki{idx}"]) ** p[f"ni{idx}"]
        + (p[f"Ka{idx}"] / activator) ** p[f"na{idx}"]
    )


def _metabolic(x, p, linearized=False):
    g1, g2, g3, e1, e2, e3, m1, m2 = (x[..., i] for i in range(8))
    S, P = p["S"], p["P"]
    with np.errstate(divide="ignore"):
        dg1 = _hill_transcription(p, 1, S) - p["k1"] * g1
        dg2 = _hill_transcription(p, 2, m1) - p["k2"] * g2
        dg3 = _hill_transcription(p, 3, m2) - p["k3"] * g3
    if linearized:
        de1 = p["V4"] * g1 + p["k4"] * e1
        de2 = p["V5"] * g2 + p["k5"] * e2
        de3 = p["V6"] * g3 + p["k6"] * e3
        flux1 = p["kcat1"] * e1 / p["Km1"] * (S - m1)
        flux2 = p["kcat2"] * e2 / p["Km3"] * (m1 - m2)
        flux3 = p["kcat3"] * e3 / p["Km5"] * (m2 - P)
    else:
        de1 = p["V4"] * g1 / (p["K4"] + g1) + p["k4"] * e1
        de2 = p["V5"] * g2 / (p["K5"] + g2) + p["k5"] * e2
        de3 = p["V6"] * g3 / (p["K6"] + g3) + p["k6"] * e3
        flux1 = p["kcat1"] * e1 / p["Km1"] * (S - m1) / (1.0 + S / p["Km1"] + m1 / p["Km2"])
        flux2 = p["kcat2"] * e2 / p["Km3"] * (m1 - m2) / (1.0 + m1 / p["Km3"] + m2 / p["Km4"])
        flux3 = p["kcat3"] * e3 / p["Km5"] * (m2 - P) / (1.0 + m2 / p["Km5"] + P / p["Km6"])
    return np.stack([dg1, dg2, dg3, de1, de2, de3, flux1 - flux2, flux2 - flux3], axis=-1)


def _dae_rhs(x, p):
    u1, u2 = x[..., 0], x[..., 1]
    v = _dae_algebraic(x, p)
    v2 = v[..., 1]
    return np.stack([v2 / p["C"], u1 / p["L"]], axis=-1)


def _dae_algebraic(x, p):
    u1, u2 = x[..., 0], x[..., 1]
    if p.get("cubic", 0.0):
        nonlin = u1 - u1**3
    else:
        nonlin = np.tanh(u1)
    v1 = (p["G0"] - p["Ginf"]) * p["U0"] * nonlin + p["Ginf"] * u1
    v2 = -u2 - v1
    return np.stack([v1, v2], axis=-1)


def dae_residuals(system: SystemSpec, x: np.ndarray) -> np.ndarray:
    """Residuals of the two algebraic constraints of the circuit."""
    p = system.params
    u1, u2, v1, v2 = (x[..., i] for i in range(4))
    nonlin = u1 - u1**3 if p.get("cubic", 0.0) else np.tanh(u1)
    r1 = v1 - (p["G0"] - p["Ginf"]) * p["U0"] * nonlin - p["Ginf"] * u1
    r2 = v2 + u2 + v1
    return np.stack([r1, r2], axis=-1)


METABOLIC_DEFAULTS = {
    "S": 1.0, "P": 0.5,
    "V1": 1.0, "V2": 1.0, "V3": 1.0,
    "Ki1": 1.0, "Ki2": 1.0, "Ki3": 1.0,
    "Ka1": 1.0, "Ka2": 1.0, "Ka3": 1.0,
    "ni1": 2.0, "ni2": 2.0, "ni3": 2.0,
    "na1": 2.0, "na2": 2.0, "na3": 2.0,
    "k1": 1.0, "k2": 1.0, "k3": 1.0,
    "V4": 0.1, "V5": 0.1, "V6": 0.1,
    "K4": 1.0, "K5": 1.0, "K6": 1.0,
    "k4": 0.1, "k5": 0.1, "k6": 0.1,
    "kcat1": 1.0, "kcat2": 1.0, "kcat3": 1.0,
    "Km1": 1.0, "Km2": 1.0, "Km3": 1.0, "Km4": 1.0, "Km5": 1.0, "Km6": 1.0,
}

# name -> (dim, algebraic_dim, rhs, algebraic, default params, state names)
_CATALOG = {
    "harmonic-oscillator": (2, 0, _harmonic, None, {"beta": 9.0}, ("x1", "x2")),
    "damped-pendulum": (2, 0, _damped_pendulum, None, {"alpha": 0.1, "beta": 9.0}, ("x1", "x2")),
    "duffing": (2, 0, _duffing, None, {"epsilon": 0.05}, ("x1", "x2")),
    "van-der-pol": (2, 0, _van_der_pol, None, {"mu": 1.0}, ("x1", "x2")),
    "seir": (
        4, 0, _seir, None,
        {"mu": 0.1792, "beta": 0.8669, "sigma": 0.3562, "gamma": 0.2235, "infection_source": 0.0},
        ("S", "E", "I", "R"),
    ),
    "metabolic": (
        8, 0, _metabolic, None, METABOLIC_DEFAULTS,
        ("G1", "G2", "G3", "E1", "E2", "E3", "M1", "M2"),
    ),
    "metabolic-linearized": (
        8, 0, lambda x, p: _metabolic(x, p, linearized=True), None,
        {**METABOLIC_DEFAULTS, **{f"n{t}{i}": 1.0 for t in "ia" for i in (1, 2, 3)}},
        ("G1", "G2", "G3", "E1", "E2", "E3", "M1", "M2"),
    ),
    "dae-circuit": (
        4, 2, _dae_rhs, _dae_algebraic,
        {"C": 1e-9, "L": 1e-6, "U0": 1.0, "G0": -0.1, "Ginf": 0.25, "cubic": 0.0},
        ("u1", "u2", "v1", "v2"),
    ),
    "dae-circuit-cubic": (
        4, 2, _dae_rhs, _dae_algebraic,
        {"C": 1e-9, "L": 1e-6, "U0": 1.0, "G0": -0.1, "Ginf": 0.25, "cubic": 1.0},
        ("u1", "u2", "v1", "v2"),
    ),
}


def system_names() -> list[str]:
    return sorted(_CATALOG)


def default_params(name: str) -> dict[str, float]:
    if name not in _CATALOG:
        raise SystemSpecError(f"unknown system {name!r}; known: {', '.join(system_names())}")
    return dict(_CATALOG[name][4])


def make_system(name: str, params: Mapping[str, float] | None = None) -> SystemSpec:
    """Build a catalog system, overriding defaults with ``params``.

    Unknown parameter names are rejected so typos do not silently fall back
    to defaults.
    """
    if name not in _CATALOG:
        raise SystemSpecError(f"unknown system {name!r}; known: {', '.join(system_names())}")
    dim, alg_dim, rhs, alg, defaults, names = _CATALOG[name]
    merged = dict(defaults)
    for key, value in (params or {}).items():
        if key not in defaults:
            raise SystemSpecError(f"system {name!r} has no parameter {key!r}")
        merged[key] = float(value)
    return SystemSpec(name, dim, merged, rhs, alg_dim, alg, names)


def _check_state(system: SystemSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != system.dim:
        raise SystemSpecError(
            f"{system.name}: state has {x.shape[-1] if x.ndim else 0} components, expected {system.dim}"
        )
    return x


def eval_rhs(system: SystemSpec, x) -> np.ndarray:
    """Time derivative of the differential components at ``x``."""
    x = _check_state(system, x)
    try:
        return system.rhs(x, system.params)
    except KeyError as exc:
        raise SystemSpecError(f"{system.name}: missing parameter {exc.args[0]!r}") from None


def step_rk4(system: SystemSpec, x, h: float) -> np.ndarray:
    """One classical RK4 step of size ``h``."""
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = _check_state(system, x)
    nd = system.diff_dim
    u = x[..., :nd]

    def f(y):
        if system.algebraic_dim:
            # the rhs reconstructs algebraic components itself
            y = np.concatenate([y, np.zeros(y.shape[:-1] + (system.algebraic_dim,))], axis=-1)
        return system.rhs(y, system.params)

    with np.errstate(over="ignore", invalid="ignore"):
        k1 = f(u)
        k2 = f(u + 0.5 * h * k1)
        k3 = f(u + 0.5 * h * k2)
        k4 = f(u + h * k3)
        u_new = u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(u_new)):
        raise IntegrationError(f"{system.name}: non-finite state after RK4 step of size {h:g}")
    if system.algebraic_dim:
        return system.complete(u_new)
    return u_new


def flow_map(system: SystemSpec, x0, lag: float, substeps: int = 10) -> np.ndarray:
    """Advance ``x0`` by ``lag`` using ``substeps`` RK4 steps of equal size."""
    if not lag > 0:
        raise ValueError(f"lag must be positive, got {lag}")
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    h = lag / substeps
    x = _check_state(system, x0)
    for _ in range(substeps):
        x = step_rk4(system, x, h)
    return x
