"""Divergence steps, N-gram statistics, periodicity and sigma diagnostics."""

from __future__ import annotations

import csv
import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .net import LatentTrace, NetworkSpec
from .seqdata import DomainError

DEFAULT_THRESHOLD = 0.025
DEFAULT_EPSILON = 1e-6
ALPHABET = ("A", "B", "C")
APERIODIC_BELOW = 0.3


def _points(traj) -> np.ndarray:
    return np.asarray(getattr(traj, "points", traj), dtype=float)


def stepwise_mse(target, generated) -> np.ndarray:
    a, b = _points(target), _points(generated)
    if a.shape != b.shape:
        raise DomainError(f"length mismatch: target {a.shape} vs generated {b.shape}")
    return ((a - b) ** 2).mean(axis=1)


def divergence_step(target, generated, threshold: float = DEFAULT_THRESHOLD) -> int | None:
    """First 1-based step whose per-step MSE exceeds ``threshold``; None if never."""
    above = stepwise_mse(target, generated) > threshold
    if not above.any():
        return None
    return int(np.argmax(above)) + 1


@dataclass
class DivergenceReport:
    steps: list[int | None]
    lengths: list[int]
    threshold: float

    @property
    def effective_steps(self) -> list[int]:
        # a pair that never diverges counts its full length
        return [n if s is None else s for s, n in zip(self.steps, self.lengths)]

    @property
    def ads(self) -> float:
        return float(np.mean(self.effective_steps))

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sequence", "length", "divergence_step", "effective_step"])
            for i, (s, n, e) in enumerate(zip(self.steps, self.lengths, self.effective_steps)):
                w.writerow([i, n, "none" if s is None else s, e])
        return path


def average_divergence_step(pairs: Sequence[tuple], threshold: float = DEFAULT_THRESHOLD) -> DivergenceReport:
    if not pairs:
        raise DomainError("need at least one (target, generated) pair")
    steps, lengths = [], []
    for target, generated in pairs:
        steps.append(divergence_step(target, generated, threshold))
        lengths.append(len(_points(target)))
    return DivergenceReport(steps, lengths, threshold)


# -- N-grams ------------------------------------------------------------------

class NGramCounter:
    """Sliding-window N-gram counts that can be fed in chunks."""

    def __init__(self, n: int = 3):
        if n < 1:
            raise DomainError("N must be >= 1")
        self.n = n
        self.counts: Counter = Counter()
        self._tail: tuple = ()
        self.seen = 0

    def update(self, labels: Iterable[str]) -> "NGramCounter":
        window = list(self._tail)
        for lab in labels:
            window.append(lab)
            self.seen += 1
            if len(window) > self.n:
                window.pop(0)
            if len(window) == self.n:
                self.counts[tuple(window)] += 1
        self._tail = tuple(window[-(self.n - 1):]) if self.n > 1 else ()
        return self


@dataclass
class NGramDistribution:
    n: int
    counts: dict[tuple, int]
    epsilon: float
    alphabet: tuple[str, ...] = ALPHABET
    tuples: list[tuple] = field(init=False)
    probs: np.ndarray = field(init=False)

    def __post_init__(self):
        self.tuples = list(itertools.product(self.alphabet, repeat=self.n))
        total = sum(self.counts.values())
        freq = np.array([self.counts.get(t, 0) for t in self.tuples], dtype=float)
        if total:
            freq /= total
        smoothed = freq + self.epsilon
        self.probs = smoothed / smoothed.sum()

    @property
    def total(self) -> int:
        return int(sum(self.counts.values()))

    def prob(self, gram) -> float:
        return float(self.probs[self.tuples.index(tuple(gram))])

    def as_dict(self) -> dict[str, float]:
        return {"".join(t): float(p) for t, p in zip(self.tuples, self.probs)}


def _compressed(labels) -> list[str]:
    if hasattr(labels, "compressed"):
        return list(labels.compressed)
    return list(labels)


def ngram_distribution(labels, n: int = 3, epsilon: float = DEFAULT_EPSILON,
                       alphabet: tuple[str, ...] = ALPHABET) -> NGramDistribution:
    """Add-epsilon smoothed N-gram distribution over compressed prototype labels."""
    seq = _compressed(labels)
    if len(seq) < n:
        raise DomainError(f"need at least {n} labels, got {len(seq)}")
    unknown = set(seq) - set(alphabet)
    if unknown:
        raise DomainError(f"labels outside the alphabet: {sorted(unknown)}")
    counter = NGramCounter(n).update(seq)
    return NGramDistribution(n, dict(counter.counts), epsilon, tuple(alphabet))


def ngram_kl(p: NGramDistribution, q: NGramDistribution) -> float:
    """KL(p || q) in nats; p is the reference (target-generator) distribution."""
    if p.n != q.n or tuple(p.alphabet) != tuple(q.alphabet):
        raise DomainError("N-gram distributions have different supports")
    if np.any(p.probs <= 0) or np.any(q.probs <= 0):
        raise DomainError("N-gram distributions must be smoothed to full support")
    if np.array_equal(p.probs, q.probs):
        return 0.0
    return float(np.sum(p.probs * np.log(p.probs / q.probs)))


def write_ngram_csv(path, reference: NGramDistribution, others: dict[str, NGramDistribution]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ngram", "reference"] + list(others))
        for i, t in enumerate(reference.tuples):
            w.writerow(["".join(t), repr(float(reference.probs[i]))]
                       + [repr(float(d.probs[i])) for d in others.values()])
    return path


# -- periodicity ----------------------------------------------------------------

@dataclass
class PeriodicityResult:
    lag: int
    peak: float
    flag: str  # "periodic", "aperiodic" or "constant"


def autocorrelation(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Pearson correlation between x[:-k] and x[k:] for k = 0..max_lag."""
    x = np.asarray(x, dtype=float)
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    for k in range(1, max_lag + 1):
        a = x[:-k] - x[:-k].mean()
        b = x[k:] - x[k:].mean()
        denom = math.sqrt(float(a @ a) * float(b @ b))
        out[k] = float(a @ b) / denom if denom > 0 else 0.0
    return out


def periodicity_score(traj, max_lag: int) -> PeriodicityResult:
    """Dominant non-zero-lag autocorrelation peak, averaged over coordinates.

    The peak is searched after the first local minimum of the averaged
    autocorrelation; peaks below 0.3 are flagged aperiodic.
    """
    pts = _points(traj)
    if max_lag < 2 or len(pts) <= 2 * max_lag:
        raise DomainError("need max_lag >= 2 and length > 2 * max_lag")
    active = [d for d in range(pts.shape[1]) if np.ptp(pts[:, d]) > 1e-12]
    if not active:
        return PeriodicityResult(1, 1.0, "constant")
    acf = np.mean([autocorrelation(pts[:, d], max_lag) for d in active], axis=0)
    start = None
    for k in range(1, max_lag):
        if acf[k] <= acf[k - 1] and acf[k] < acf[k + 1]:
            start = k
            break
    if start is None:
        # monotone decay: no recurrence within max_lag
        return PeriodicityResult(0, 0.0, "aperiodic")
    lag = start + 1 + int(np.argmax(acf[start + 1:]))
    peak = float(acf[lag])
    return PeriodicityResult(lag, peak, "periodic" if peak >= APERIODIC_BELOW else "aperiodic")


# -- sigma ----------------------------------------------------------------------

@dataclass
class SigmaSummary:
    units: list[int]
    mean: float
    max: float
    series: np.ndarray  # (T-1, len(units)), steps 2..T


def layer_units(spec: NetworkSpec, layer: int, count: int = 2) -> list[int]:
    """Indices of the first ``count`` units of a (0-based) layer."""
    if not 0 <= layer < len(spec.layer_sizes):
        raise DomainError(f"layer {layer} out of range")
    sl = spec.layer_slices[layer]
    if count > sl.stop - sl.start:
        raise DomainError(f"layer {layer} has fewer than {count} units")
    return list(range(sl.start, sl.start + count))


def sigma_statistics(trace: LatentTrace, units: Sequence[int] | None = None) -> SigmaSummary:
    sigma = trace.sigma
    if sigma.ndim == 3:
        sigma = sigma.reshape(-1, sigma.shape[-1])
    C = sigma.shape[-1]
    units = list(range(C)) if units is None else [int(u) for u in units]
    bad = [u for u in units if not 0 <= u < C]
    if bad or not units:
        raise DomainError(f"invalid unit indices {bad or units} for {C} context units")
    series = sigma[:, units]
    return SigmaSummary(units, float(series.mean()), float(series.max()), series)
