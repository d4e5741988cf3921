"""Synthetic benchmark of target series driven by one external covariate.

A dataset crosses a main signal family with a covariate family and a
combination operator (``z = signal + x`` or ``z = signal * x``). Every
series draws fresh signal and covariate parameters from its own random
stream keyed by ``(dataset seed, series index)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .nn import RngStream

FULL_LENGTH = 1827
SPIKE_COUNT = 500
STEP_COUNT = 125
BELL_COUNT = 125
MAX_STEP_DURATION = 30
STEP_RETRIES = 10_000
PERIODS = (7.0, 30.0, 365.0)


class GenerationError(RuntimeError):
    pass


class SignalKind(str, Enum):
    Single = "Single"
    Simple = "Simple"
    Diverse = "Diverse"
    Noisy = "Noisy"


class CovariateKind(str, Enum):
    Spikes = "Spikes"
    Steps = "Steps"
    Bells = "Bells"
    ARP = "ARP"


class Operator(str, Enum):
    Add = "Add"
    Mult = "Mult"


@dataclass(frozen=True)
class DatasetSpec:
    signal: SignalKind
    covariate: CovariateKind
    operator: Operator
    n_series: int = 100
    length: int = FULL_LENGTH
    prediction_length: int = 30
    seed: int = 0
    freq: str = "1D"

    def __post_init__(self):
        object.__setattr__(self, "signal", SignalKind(self.signal))
        object.__setattr__(self, "covariate", CovariateKind(self.covariate))
        object.__setattr__(self, "operator", Operator(self.operator))
        if self.length <= self.prediction_length:
            raise ValueError("length must exceed prediction_length")
        if self.n_series < 1:
            raise ValueError("n_series must be positive")

    @property
    def dataset_id(self) -> str:
        return f"{self.signal.value.lower()}_{self.covariate.value.lower()}_{self.operator.value.lower()}"

    @property
    def group(self) -> str:
        return "simple" if self.signal in (SignalKind.Single, SignalKind.Simple) else "complex"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(signal=self.signal.value, covariate=self.covariate.value, operator=self.operator.value)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


@dataclass
class TimeSeriesRecord:
    series_id: str
    target: np.ndarray
    covariates: np.ndarray  # (length, c)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "series_id": self.series_id,
            "target": [float(v) for v in self.target],
            "covariates": [[float(v) for v in row] for row in self.covariates],
        }

    @classmethod
    def from_json(cls, d: dict, metadata: dict | None = None) -> "TimeSeriesRecord":
        return cls(
            d["series_id"],
            np.asarray(d["target"], dtype=np.float64),
            np.asarray(d["covariates"], dtype=np.float64).reshape(len(d["target"]), -1),
            metadata or {},
        )


# ----------------------------------------------------------------------
# Scaling of event counts
# ----------------------------------------------------------------------


def scaled_count(full_count: int, length: int) -> int:
    """Event count preserving the density of the full-length benchmark."""
    if length == FULL_LENGTH:
        return full_count
    return max(1, int(round(full_count * length / FULL_LENGTH)))


def max_step_duration(length: int) -> int:
    return scaled_count(MAX_STEP_DURATION, length)


# ----------------------------------------------------------------------
# Main signal
# ----------------------------------------------------------------------


def _sinusoids(t, amps, phases):
    return sum(a * np.sin(2.0 * np.pi * t / per + ph) for a, per, ph in zip(amps, PERIODS, phases))


def gen_main_signal(kind: SignalKind | str, length: int, rng: RngStream, trace: dict | None = None) -> np.ndarray:
    """Main signal on ``t = 0..length-1``. Sampled parameters are written into ``trace`` if given."""
    kind = SignalKind(kind)
    if length < 1:
        raise ValueError("length must be positive")
    t = np.arange(length, dtype=np.float64)
    trace = trace if trace is not None else {}
    if kind is SignalKind.Single:
        return np.sin(2.0 * np.pi * t / 7.0)
    amps = rng.uniform(1.0, 5.0, 3)
    trace["amplitudes"] = amps
    if kind is SignalKind.Simple:
        return _sinusoids(t, amps, (0.0, 0.0, 0.0))
    phases = rng.uniform(-np.pi, np.pi, 3)
    b1, b2 = rng.uniform(-1.0, 1.0, 2)
    trace.update(phases=phases, b1=b1, b2=b2)
    z = _sinusoids(t, amps, phases) + b1 * t / 365.0 + b2
    if kind is SignalKind.Diverse:
        return z
    s = series_scale(z)
    trace["noise_std"] = s / 4.0
    return z + rng.normal(0.0, s / 4.0, length)


def series_scale(series) -> float:
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty series")
    return float(np.mean(np.abs(x)))


# ----------------------------------------------------------------------
# Covariates
# ----------------------------------------------------------------------


def _gamma(s: float, rng: RngStream) -> float:
    hi = 5.0 * s
    if hi <= 1.0:
        # U(1, 5s) is empty or a point; collapse onto 1
        return 1.0
    return float(rng.uniform(1.0, hi))


def _step_intervals(length: int, n: int, max_dur: int, rng: RngStream) -> list[tuple[int, int]]:
    """``n`` pairwise disjoint ``[start, start + dur)`` intervals inside ``[0, length)``."""
    occupied = np.zeros(length, dtype=bool)
    out = []
    for _ in range(n):
        for _ in range(STEP_RETRIES):
            start = int(np.floor(rng.uniform(0.0, length)))
            dur = int(rng.integers(1, max_dur + 1))
            stop = min(start + dur, length)
            if stop - start == dur and not occupied[start:stop].any():
                occupied[start:stop] = True
                out.append((start, dur))
                break
        else:
            raise GenerationError(f"could not place {n} disjoint steps in length {length}")
    return sorted(out)


def gen_covariate(kind: CovariateKind | str, length: int, s: float, rng: RngStream, trace: dict | None = None) -> np.ndarray:
    kind = CovariateKind(kind)
    trace = trace if trace is not None else {}
    if kind is CovariateKind.Spikes:
        n = scaled_count(SPIKE_COUNT, length)
        idx = rng.choice(length, n)
        gamma = _gamma(s, rng)
        x = np.ones(length)
        x[idx] = gamma
        trace.update(gamma=gamma, active=np.sort(idx))
        return x
    if kind is CovariateKind.Steps:
        n = scaled_count(STEP_COUNT, length)
        intervals = _step_intervals(length, n, max_step_duration(length), rng)
        gamma = _gamma(s, rng)
        x = np.ones(length)
        for start, dur in intervals:
            x[start : start + dur] = gamma
        trace.update(gamma=gamma, intervals=intervals)
        return x
    if kind is CovariateKind.Bells:
        n = scaled_count(BELL_COUNT, length)
        mu = rng.uniform(0.0, length, n)
        sigma = rng.uniform(1.0, 15.0, n)
        gamma = _gamma(s, rng)
        t = np.arange(length, dtype=np.float64)[:, None]
        x = gamma * np.exp(-((t - mu) ** 2) / sigma**2).sum(axis=1)
        trace.update(gamma=gamma, mu=mu, sigma=sigma)
        return x
    a1 = float(rng.uniform(0.0, 1.0))
    a2 = 1.0 - a1
    noise = rng.normal(0.0, 1.0, length)
    x = arp_path(a1, a2, noise)
    gamma = _gamma(s, rng)
    m = float(np.mean(np.abs(x)))
    if m > 0:
        x = gamma * x / m
    trace.update(gamma=gamma, a1=a1, a2=a2)
    return x


def arp_path(a1: float, a2: float, noise: np.ndarray) -> np.ndarray:
    """AR(2) recursion from ``x_0 = x_1 = 0`` driven by ``noise``."""
    x = np.zeros(len(noise))
    for t in range(2, len(noise)):
        x[t] = a1 * x[t - 1] + a2 * x[t - 2] + noise[t]
    return x


def combine(signal, covariate, operator: Operator | str) -> np.ndarray:
    a = np.asarray(signal, dtype=np.float64)
    b = np.asarray(covariate, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"signal length {a.shape} != covariate length {b.shape}")
    return a + b if Operator(operator) is Operator.Add else a * b


# ----------------------------------------------------------------------
# Datasets
# ----------------------------------------------------------------------


def generate_series(spec: DatasetSpec, index: int, trace: dict | None = None) -> TimeSeriesRecord:
    rng = RngStream(spec.seed, index)
    trace = trace if trace is not None else {}
    sig_trace: dict = {}
    cov_trace: dict = {}
    signal = gen_main_signal(spec.signal, spec.length, rng, sig_trace)
    x = gen_covariate(spec.covariate, spec.length, series_scale(signal), rng, cov_trace)
    trace.update(signal=sig_trace, covariate=cov_trace, scale=series_scale(signal))
    z = combine(signal, x, spec.operator)
    return TimeSeriesRecord(f"{spec.dataset_id}_{index:04d}", z, x[:, None], {"dataset_id": spec.dataset_id})


def generate_dataset(spec: DatasetSpec, indices=None) -> list[TimeSeriesRecord]:
    """All series of ``spec`` (or the given subset of indices), in index order."""
    idx = range(spec.n_series) if indices is None else sorted(indices)
    return [generate_series(spec, i) for i in idx]


PROFILES = {
    "paper": dict(length=FULL_LENGTH, n_series=100, prediction_length=30),
    "desk": dict(length=512, n_series=20, prediction_length=24),
}


def dataset_seed(base_seed: int, spec_key: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{spec_key}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def generate_benchmark(base_seed: int = 0, scale_profile: str = "desk", **overrides) -> list[DatasetSpec]:
    """The 32 dataset specs (4 signals x 4 covariates x 2 operators) of a profile."""
    if scale_profile not in PROFILES:
        raise ValueError(f"unknown profile {scale_profile!r}; expected one of {sorted(PROFILES)}")
    prof = {**PROFILES[scale_profile], **overrides}
    specs = []
    for sig in SignalKind:
        for cov in CovariateKind:
            for op in Operator:
                key = f"{sig.value}_{cov.value}_{op.value}"
                specs.append(DatasetSpec(sig, cov, op, seed=dataset_seed(base_seed, key), **prof))
    return specs


def records_checksum(records: list[TimeSeriesRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(r.series_id.encode())
        h.update(np.ascontiguousarray(r.target, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(r.covariates, dtype="<f8").tobytes())
    return h.hexdigest()
