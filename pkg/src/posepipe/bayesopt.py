"""Gaussian-process surrogate and budgeted hyperparameter tuning.

Zero-mean GP with a squared-exponential kernel over unit-cube coordinates,
closed-form posterior updates, expected-improvement and mean+lambda*std
acquisitions, argmax proposal over a seeded low-discrepancy candidate set,
and a tuning loop that stops on budget exhaustion or a run of proposals
with no improvement. Maximization convention throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import qmc

ACQUISITION_KINDS = ("expected_improvement", "mean_plus_std")

_JITTER_INITIAL = 1e-10
_JITTER_MAX = 1e-4


class GpFactorizationError(RuntimeError):
    """Raised when the kernel matrix stays indefinite after max jitter."""


@dataclass(frozen=True)
class DimSpec:
    """One tunable dimension with finite bounds; log scale needs lower > 0."""

    name: str
    lower: float
    upper: float
    scale: str = "linear"

    def __post_init__(self):
        if self.scale not in ("linear", "log"):
            raise ValueError(f"scale must be 'linear' or 'log', got {self.scale!r}")
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ValueError(f"bounds must be finite for {self.name!r}")
        if not self.lower < self.upper:
            raise ValueError(
                f"lower {self.lower} must be < upper {self.upper} for {self.name!r}"
            )
        if self.scale == "log" and self.lower <= 0:
            raise ValueError(f"log-scale dim {self.name!r} requires lower > 0")

    def to_unit(self, value: float) -> float:
        if self.scale == "log":
            return (math.log(value) - math.log(self.lower)) / (
                math.log(self.upper) - math.log(self.lower)
            )
        return (value - self.lower) / (self.upper - self.lower)

    def from_unit(self, u: float) -> float:
        if self.scale == "log":
            return math.exp(
                math.log(self.lower) + u * (math.log(self.upper) - math.log(self.lower))
            )
        return self.lower + u * (self.upper - self.lower)


@dataclass(frozen=True)
class HyperparamSpace:
    dims: tuple[DimSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        if not self.dims:
            raise ValueError("space needs at least one dimension")
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise ValueError("dimension names must be unique")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    def to_unit(self, values) -> tuple[float, ...]:
        return tuple(d.to_unit(float(v)) for d, v in zip(self.dims, values, strict=True))

    def from_unit(self, unit) -> tuple[float, ...]:
        return tuple(d.from_unit(float(u)) for d, u in zip(self.dims, unit, strict=True))


@dataclass(frozen=True)
class Observation:
    """An evaluated point in unit-cube coordinates; larger y is better."""

    x: tuple[float, ...]
    y: float

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        if any(not (-1e-9 <= v <= 1.0 + 1e-9) for v in self.x):
            raise ValueError(f"point {self.x} outside the unit cube")


class GpModel:
    """Zero-mean GP surrogate with k(x,x') = sf2 * exp(-|x-x'|^2 / (2 l^2))."""

    def __init__(
        self,
        length_scale: float = 0.2,
        signal_variance: float = 1.0,
        noise_variance: float = 1e-6,
        observations=(),
    ):
        if length_scale <= 0:
            raise ValueError("length_scale must be > 0")
        if signal_variance <= 0:
            raise ValueError("signal_variance must be > 0")
        if noise_variance < 0:
            raise ValueError("noise_variance must be >= 0")
        self.length_scale = float(length_scale)
        self.signal_variance = float(signal_variance)
        self.noise_variance = float(noise_variance)
        self.observations: list[Observation] = list(observations)
        self._factor_cache = None

    def add_observation(self, obs: Observation) -> None:
        self.observations.append(obs)
        self._factor_cache = None

    def kernel_matrix(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        sq = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
        return self.signal_variance * np.exp(-sq / (2.0 * self.length_scale**2))

    def _points(self) -> np.ndarray:
        return np.array([o.x for o in self.observations], dtype=float)

    def _values(self) -> np.ndarray:
        return np.array([o.y for o in self.observations], dtype=float)

    def factorization(self):
        """Cholesky of K + sigma_n^2 I with jitter escalation, cached."""
        if self._factor_cache is not None:
            return self._factor_cache
        xs = self._points()
        ys = self._values()
        k = self.kernel_matrix(xs, xs)
        k = (k + k.T) / 2.0  # enforce exact symmetry
        n = k.shape[0]
        jitter = _JITTER_INITIAL
        base = k + self.noise_variance * np.eye(n)
        while True:
            try:
                factor = cho_factor(base + jitter * np.eye(n), lower=True)
                break
            except np.linalg.LinAlgError:
                jitter *= 10.0
                if jitter > _JITTER_MAX:
                    eigs = np.linalg.eigvalsh(base)
                    raise GpFactorizationError(
                        "kernel matrix not positive definite after jitter "
                        f"{_JITTER_MAX:g}; eigenvalue range "
                        f"[{eigs.min():.3e}, {eigs.max():.3e}], "
                        f"condition ~{abs(eigs.max() / eigs.min()):.3e}"
                    ) from None
        alpha = cho_solve(factor, ys)
        self._factor_cache = (xs, factor, alpha)
        return self._factor_cache


def gp_posterior(model: GpModel, x) -> tuple[float, float]:
    """Posterior (mean, variance) at x; the prior (0, sf2) with no data."""
    if not model.observations:
        return 0.0, model.signal_variance
    xs, factor, alpha = model.factorization()
    q = np.asarray(x, dtype=float).reshape(1, -1)
    if q.shape[1] != xs.shape[1]:
        raise ValueError(
            f"query has {q.shape[1]} dims, observations have {xs.shape[1]}"
        )
    kx = model.kernel_matrix(q, xs)[0]
    mu = float(kx @ alpha)
    var = float(model.signal_variance - kx @ cho_solve(factor, kx))
    return mu, max(var, 0.0)


def _norm_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def _norm_pdf(z: float) -> float:
    return math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def expected_improvement(model: GpModel, x, f_best: float) -> float:
    """Closed-form E[max(0, f(x) - f_best)] under the GP posterior."""
    mu, var = gp_posterior(model, x)
    sigma = math.sqrt(var)
    if sigma < 1e-12:
        return max(0.0, mu - f_best)
    z = (mu - f_best) / sigma
    return max(0.0, (mu - f_best) * _norm_cdf(z) + sigma * _norm_pdf(z))


def mean_plus_std(model: GpModel, x, lam: float) -> float:
    """Posterior mean plus lam times the posterior standard deviation."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    mu, var = gp_posterior(model, x)
    return mu + lam * math.sqrt(var)


@dataclass(frozen=True)
class AcquisitionSpec:
    """Which acquisition to maximize and how candidates are drawn."""

    kind: str = "expected_improvement"
    lam: float = 1.0
    candidate_count: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ACQUISITION_KINDS:
            raise ValueError(
                f"kind must be one of {ACQUISITION_KINDS}, got {self.kind!r}"
            )
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.candidate_count < 1:
            raise ValueError("candidate_count must be >= 1")


def acquisition_value(model: GpModel, x, acq: AcquisitionSpec, f_best: float) -> float:
    if acq.kind == "expected_improvement":
        return expected_improvement(model, x, f_best)
    return mean_plus_std(model, x, acq.lam)


def halton_points(ndim: int, n: int, seed: int) -> list[tuple[float, ...]]:
    """Seeded scrambled Halton sample in the unit cube."""
    sampler = qmc.Halton(d=ndim, scramble=True, seed=seed)
    pts = sampler.random(n)
    return [tuple(float(v) for v in row) for row in pts]


def proposal_candidates(
    model: GpModel, space: HyperparamSpace, acq: AcquisitionSpec, f_best: float
) -> list[tuple[float, ...]]:
    """Candidate list scanned by propose_next, in tie-break index order.

    The seeded low-discrepancy points come first; when there are at least
    two, the midpoints between the two acquisition-best candidates and the
    incumbent observation are appended.
    """
    cands = halton_points(space.ndim, acq.candidate_count, acq.seed)
    if len(cands) < 2:
        return cands
    values = [acquisition_value(model, c, acq, f_best) for c in cands]
    order = sorted(range(len(cands)), key=lambda i: (-values[i], i))
    top1 = np.asarray(cands[order[0]])
    top2 = np.asarray(cands[order[1]])

    def mid(a, b):
        return tuple(float(v) for v in (a + b) / 2.0)

    extras = [mid(top1, top2)]
    incumbent = None
    best_y = -math.inf
    for obs in model.observations:
        if obs.y > best_y:
            best_y = obs.y
            incumbent = np.asarray(obs.x)
    if incumbent is not None:
        extras.append(mid(top1, incumbent))
        extras.append(mid(top2, incumbent))
    return cands + extras


def propose_next(
    model: GpModel, space: HyperparamSpace, acq: AcquisitionSpec, f_best: float
) -> tuple[float, ...]:
    """Argmax of the acquisition over the candidate list; ties pick the
    lowest index."""
    cands = proposal_candidates(model, space, acq, f_best)
    best_idx = 0
    best_val = -math.inf
    for i, c in enumerate(cands):
        v = acquisition_value(model, c, acq, f_best)
        if v > best_val:
            best_val = v
            best_idx = i
    return cands[best_idx]


@dataclass(frozen=True)
class HistoryEntry:
    iteration: int
    x_unit: tuple[float, ...]
    values: tuple[float, ...]
    y: float  # nan when rejected
    f_star: float
    acq_value: float | None  # None for the initial design
    rejected: bool = False


@dataclass(frozen=True)
class TuneResult:
    x_star: tuple[float, ...]
    f_star: float
    history: tuple[HistoryEntry, ...]
    stop_reason: str


def tune_loop(
    space: HyperparamSpace,
    objective,
    acq: AcquisitionSpec,
    budget: int,
    patience: int = 10,
    initial_points=None,
) -> TuneResult:
    """Budgeted maximize-objective loop with a no-improvement stop.

    Starts from 2*dim seeded quasi-random evaluations (preceded by any
    caller-supplied points, all capped at the budget), then alternates
    propose/evaluate/append. Stops when the budget is exhausted or after
    ``patience`` consecutive proposals that fail to improve the incumbent.
    Objective failures are recorded as rejected samples, excluded from the
    surrogate, and count against the budget.
    """
    if budget < 2:
        raise ValueError("budget must be >= 2")
    if patience < 1:
        raise ValueError("patience must be >= 1")
    model = GpModel()
    history: list[HistoryEntry] = []
    f_star = -math.inf
    x_star_unit: tuple[float, ...] | None = None

    def evaluate(point_unit, acq_value):
        nonlocal f_star, x_star_unit
        values = space.from_unit(point_unit)
        improved = False
        try:
            y = float(objective(values))
        except Exception:
            history.append(
                HistoryEntry(
                    iteration=len(history),
                    x_unit=tuple(point_unit),
                    values=values,
                    y=math.nan,
                    f_star=f_star,
                    acq_value=acq_value,
                    rejected=True,
                )
            )
            return False
        model.add_observation(Observation(x=point_unit, y=y))
        if y > f_star:
            f_star = y
            x_star_unit = tuple(point_unit)
            improved = True
        history.append(
            HistoryEntry(
                iteration=len(history),
                x_unit=tuple(point_unit),
                values=values,
                y=y,
                f_star=f_star,
                acq_value=acq_value,
            )
        )
        return improved

    init = [tuple(float(v) for v in p) for p in (initial_points or [])]
    init += halton_points(space.ndim, 2 * space.ndim, acq.seed)
    init = init[:budget]
    for point in init:
        evaluate(point, None)

    stop_reason = "budget_exhausted"
    no_improve = 0
    iteration = 0
    while len(history) < budget:
        iteration += 1
        step_acq = AcquisitionSpec(
            kind=acq.kind,
            lam=acq.lam,
            candidate_count=acq.candidate_count,
            seed=acq.seed + iteration,
        )
        point = propose_next(model, space, step_acq, f_best=f_star)
        value = acquisition_value(model, point, step_acq, f_star)
        improved = evaluate(point, value)
        no_improve = 0 if improved else no_improve + 1
        if no_improve >= patience:
            stop_reason = "no_improvement"
            break

    if x_star_unit is None:
        raise RuntimeError("every objective evaluation failed")
    return TuneResult(
        x_star=space.from_unit(x_star_unit),
        f_star=f_star,
        history=tuple(history),
        stop_reason=stop_reason,
    )


def write_history_csv(path, space: HyperparamSpace, result: TuneResult) -> None:
    """History log: iter, denormalized dim values, y, f_star, acquisition
    value; the final row carries the stop reason."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        names = [d.name for d in space.dims]
        writer.writerow(["iter", *names, "y", "f_star", "acq_value", "stop_reason"])
        last = len(result.history) - 1
        for i, entry in enumerate(result.history):
            writer.writerow(
                [
                    entry.iteration,
                    *[repr(v) for v in entry.values],
                    "nan" if entry.rejected else repr(entry.y),
                    repr(entry.f_star) if math.isfinite(entry.f_star) else "nan",
                    "" if entry.acq_value is None else repr(entry.acq_value),
                    result.stop_reason if i == last else "",
                ]
            )
