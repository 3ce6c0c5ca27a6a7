"""Network parameters, initial conditions and experiment configuration.

All types are immutable after validation and safe to share across workers.
The weight matrix orientation is ``mu[j][i]`` = jump caused on neuron ``i``'s
intensity by a spike of neuron ``j`` (row = sender).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    BadDimension,
    ConfigInvalid,
    HorizonNonPositive,
    NegativeWeight,
    NonPositiveRate,
    ResetAboveBase,
    SupportBelowFloor,
)

INFINITE = math.inf

_GRID_TOL = 1e-12


@dataclass(frozen=True)
class NetworkParams:
    """Raw network parameters; build a ValidatedParams via validate_params."""

    k: int
    mu: tuple[tuple[float, ...], ...]
    b: tuple[float, ...]
    r: tuple[float, ...]
    tau: tuple[float, ...]

    @staticmethod
    def from_arrays(mu, b, r, tau=None) -> "NetworkParams":
        mu = np.asarray(mu, dtype=float)
        b = np.asarray(b, dtype=float)
        k = len(b)
        if tau is None:
            tau = [INFINITE] * k
        return NetworkParams(
            k=k,
            mu=tuple(tuple(float(x) for x in row) for row in mu),
            b=tuple(float(x) for x in b),
            r=tuple(float(x) for x in np.asarray(r, dtype=float)),
            tau=tuple(float(x) for x in tau),
        )


@dataclass(frozen=True)
class ValidatedParams:
    """NetworkParams certified against all invariants.

    ``convergence_eligible`` is True iff every tau is infinite, which is the
    regime every convergence experiment requires.
    """

    k: int
    mu: tuple[tuple[float, ...], ...]
    b: tuple[float, ...]
    r: tuple[float, ...]
    tau: tuple[float, ...]
    convergence_eligible: bool

    def mu_array(self) -> np.ndarray:
        return np.asarray(self.mu, dtype=float)

    def floor(self) -> np.ndarray:
        """Lowest admissible initial intensity per neuron: max(r_i, b_i)."""
        return np.maximum(np.asarray(self.r), np.asarray(self.b))

    def as_params(self) -> NetworkParams:
        return NetworkParams(self.k, self.mu, self.b, self.r, self.tau)


def validate_params(raw: NetworkParams | ValidatedParams) -> ValidatedParams:
    """Certify raw parameters; idempotent on an already validated value."""
    if isinstance(raw, ValidatedParams):
        raw = raw.as_params()
    k = raw.k
    if k < 1:
        raise BadDimension(f"neuron count must be positive, got {k}")
    if len(raw.mu) != k or any(len(row) != k for row in raw.mu):
        raise BadDimension(f"mu must be {k}x{k}")
    for name, vec in (("b", raw.b), ("r", raw.r), ("tau", raw.tau)):
        if len(vec) != k:
            raise BadDimension(f"{name} must have length {k}, got {len(vec)}")
    for j, row in enumerate(raw.mu):
        for i, w in enumerate(row):
            if i != j and w < 0:
                raise NegativeWeight(f"mu[{j}][{i}] = {w} < 0")
    for i in range(k):
        if raw.b[i] <= 0 or raw.r[i] <= 0:
            raise NonPositiveRate(f"b[{i}]={raw.b[i]}, r[{i}]={raw.r[i]}")
        if raw.tau[i] <= 0:
            raise NonPositiveRate(f"tau[{i}]={raw.tau[i]} must be positive")
        if raw.r[i] > raw.b[i]:
            raise ResetAboveBase(f"r[{i}]={raw.r[i]} > b[{i}]={raw.b[i]}")
    eligible = all(math.isinf(t) for t in raw.tau)
    return ValidatedParams(k, raw.mu, raw.b, raw.r, raw.tau, eligible)


@dataclass(frozen=True)
class InitialCondition:
    """Bounded-support law of the initial intensity vector.

    Support is restricted to bounded sets so that exponential moments of the
    initial state exist unconditionally.  Kinds:

    - ``deterministic``: fixed K-vector (``values``)
    - ``uniform_interval``: independent Uniform[lo_i, hi_i]
    - ``truncated_exponential``: rate_i exponential truncated to [lo_i, hi_i]
    """

    kind: str
    values: tuple[float, ...] = ()
    lo: tuple[float, ...] = ()
    hi: tuple[float, ...] = ()
    rate: tuple[float, ...] = ()

    KINDS = ("deterministic", "uniform_interval", "truncated_exponential")

    @staticmethod
    def deterministic(values: Sequence[float]) -> "InitialCondition":
        return InitialCondition(kind="deterministic", values=tuple(float(v) for v in values))

    @staticmethod
    def uniform(lo: Sequence[float], hi: Sequence[float]) -> "InitialCondition":
        return InitialCondition(
            kind="uniform_interval",
            lo=tuple(float(v) for v in lo),
            hi=tuple(float(v) for v in hi),
        )

    @staticmethod
    def truncated_exponential(rate, lo, hi) -> "InitialCondition":
        return InitialCondition(
            kind="truncated_exponential",
            rate=tuple(float(v) for v in rate),
            lo=tuple(float(v) for v in lo),
            hi=tuple(float(v) for v in hi),
        )

    @staticmethod
    def default_for(params: ValidatedParams) -> "InitialCondition":
        # b_i + r_i clears the max(r_i, b_i) floor for every parameter set.
        return InitialCondition.deterministic(
            [params.b[i] + params.r[i] for i in range(params.k)]
        )

    def validate_against(self, params: ValidatedParams) -> None:
        """Check shape and that the whole support sits on or above the floor."""
        k = params.k
        floor = params.floor()
        if self.kind == "deterministic":
            if len(self.values) != k:
                raise BadDimension("deterministic init needs a K-vector")
            low = np.asarray(self.values)
            hivals = low
        elif self.kind == "uniform_interval":
            if len(self.lo) != k or len(self.hi) != k:
                raise BadDimension("uniform init needs K pairs lo/hi")
            low = np.asarray(self.lo)
            hivals = np.asarray(self.hi)
        elif self.kind == "truncated_exponential":
            if len(self.lo) != k or len(self.hi) != k or len(self.rate) != k:
                raise BadDimension("truncated exponential init needs K triples")
            if any(x <= 0 for x in self.rate):
                raise NonPositiveRate("truncation rates must be positive")
            low = np.asarray(self.lo)
            hivals = np.asarray(self.hi)
        else:
            raise ConfigInvalid(f"unknown initial condition kind {self.kind!r}")
        if np.any(hivals < low):
            raise ConfigInvalid("initial condition support is empty (hi < lo)")
        bad = np.nonzero(low < floor - 1e-15)[0]
        if bad.size:
            i = int(bad[0])
            raise SupportBelowFloor(
                f"initial support of neuron {i+1} reaches {low[i]} below "
                f"max(r,b)={floor[i]}"
            )

    def mean(self) -> np.ndarray:
        """Exact mean of the initial intensity vector."""
        if self.kind == "deterministic":
            return np.asarray(self.values, dtype=float)
        if self.kind == "uniform_interval":
            return (np.asarray(self.lo) + np.asarray(self.hi)) / 2.0
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        a = np.asarray(self.rate)
        # mean of Exp(a) conditioned on [lo, hi]
        z = np.exp(-a * lo) - np.exp(-a * hi)
        num = (lo + 1 / a) * np.exp(-a * lo) - (hi + 1 / a) * np.exp(-a * hi)
        return num / z


def sample_initial(
    init: InitialCondition, params: ValidatedParams, stream: np.random.Generator
) -> np.ndarray:
    """Draw one initial intensity vector; deterministic given the stream state."""
    init.validate_against(params)
    k = params.k
    if init.kind == "deterministic":
        return np.asarray(init.values, dtype=float)
    u = stream.random(k)
    lo = np.asarray(init.lo)
    hi = np.asarray(init.hi)
    if init.kind == "uniform_interval":
        return lo + u * (hi - lo)
    a = np.asarray(init.rate)
    # inverse-cdf of Exp(a) restricted to [lo, hi]
    flo = -np.expm1(-a * lo)
    fhi = -np.expm1(-a * hi)
    return -np.log1p(-(flo + u * (fhi - flo))) / a


ENGINES = ("direct", "embedded")

_CONFIG_KEYS = {
    "params", "init", "horizon", "m_list", "paths", "seed",
    "grid_step", "engine", "output_dir",
}
_PARAM_KEYS = {"k", "mu", "b", "r", "tau"}
_INIT_KEYS = {"kind", "values", "lo", "hi", "rate"}


@dataclass(frozen=True)
class ExperimentConfig:
    """One batch experiment: network, horizon, replica sweep, path budget."""

    params: ValidatedParams
    init: InitialCondition
    horizon: float
    m_list: tuple[int, ...]
    paths: int
    seed: int
    grid_step: float
    engine: str = "direct"
    output_dir: str = "out"

    def __post_init__(self):
        if self.horizon <= 0:
            raise HorizonNonPositive(f"horizon {self.horizon} must be positive")
        if any(m < 2 for m in self.m_list):
            raise ConfigInvalid("every replica count must be >= 2")
        if self.paths < 1:
            raise ConfigInvalid("paths must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigInvalid("seed must be a 64-bit unsigned integer")
        if self.grid_step <= 0:
            raise ConfigInvalid("grid_step must be positive")
        steps = self.horizon / self.grid_step
        if abs(steps - round(steps)) > _GRID_TOL * max(1.0, steps):
            raise ConfigInvalid(
                f"grid_step {self.grid_step} does not divide horizon {self.horizon}"
            )
        if self.engine not in ENGINES:
            raise ConfigInvalid(f"engine must be one of {ENGINES}")
        self.init.validate_against(self.params)

    def grid_times(self) -> np.ndarray:
        n = int(round(self.horizon / self.grid_step))
        return np.linspace(0.0, self.horizon, n + 1)

    def to_json_dict(self) -> dict:
        tau = [None if math.isinf(t) else t for t in self.params.tau]
        init: dict = {"kind": self.init.kind}
        if self.init.kind == "deterministic":
            init["values"] = list(self.init.values)
        elif self.init.kind == "uniform_interval":
            init["lo"] = list(self.init.lo)
            init["hi"] = list(self.init.hi)
        else:
            init["rate"] = list(self.init.rate)
            init["lo"] = list(self.init.lo)
            init["hi"] = list(self.init.hi)
        return {
            "params": {
                "k": self.params.k,
                "mu": [list(row) for row in self.params.mu],
                "b": list(self.params.b),
                "r": list(self.params.r),
                "tau": tau,
            },
            "init": init,
            "horizon": self.horizon,
            "m_list": list(self.m_list),
            "paths": self.paths,
            "seed": self.seed,
            "grid_step": self.grid_step,
            "engine": self.engine,
            "output_dir": self.output_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    @staticmethod
    def from_json_dict(doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigInvalid("config document must be a JSON object")
        unknown = set(doc) - _CONFIG_KEYS
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        missing = _CONFIG_KEYS - set(doc)
        if missing:
            raise ConfigInvalid(f"missing config keys: {sorted(missing)}")
        praw = doc["params"]
        unknown = set(praw) - _PARAM_KEYS
        if unknown:
            raise ConfigInvalid(f"unknown params keys: {sorted(unknown)}")
        tau = [INFINITE if t in (None, "inf") else float(t) for t in praw["tau"]]
        params = validate_params(
            NetworkParams(
                k=int(praw["k"]),
                mu=tuple(tuple(float(x) for x in row) for row in praw["mu"]),
                b=tuple(float(x) for x in praw["b"]),
                r=tuple(float(x) for x in praw["r"]),
                tau=tuple(tau),
            )
        )
        iraw = doc["init"]
        unknown = set(iraw) - _INIT_KEYS
        if unknown:
            raise ConfigInvalid(f"unknown init keys: {sorted(unknown)}")
        kind = iraw.get("kind")
        if kind == "deterministic":
            init = InitialCondition.deterministic(iraw["values"])
        elif kind == "uniform_interval":
            init = InitialCondition.uniform(iraw["lo"], iraw["hi"])
        elif kind == "truncated_exponential":
            init = InitialCondition.truncated_exponential(
                iraw["rate"], iraw["lo"], iraw["hi"]
            )
        else:
            raise ConfigInvalid(f"unknown init kind {kind!r}")
        try:
            return ExperimentConfig(
                params=params,
                init=init,
                horizon=float(doc["horizon"]),
                m_list=tuple(int(m) for m in doc["m_list"]),
                paths=int(doc["paths"]),
                seed=int(doc["seed"]),
                grid_step=float(doc["grid_step"]),
                engine=str(doc["engine"]),
                output_dir=str(doc["output_dir"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from exc

    @staticmethod
    def from_json(text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"config is not valid JSON: {exc}") from exc
        return ExperimentConfig.from_json_dict(doc)
