"""Sliding-window Pearson correlation and instantaneous decoding decisions.

A reconstruction is compared against both speakers' envelopes over short
overlapping windows (5 s length, 0.5 s hop in the standard protocol). The
resulting per-window coefficient pairs feed either direct comparisons or
the state-space smoother.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dsp import SampledSignal
from .errors import ParameterError, UndefinedCorrelationError

__all__ = [
    "WindowSpec",
    "CorrelationSeries",
    "CorrelationQuality",
    "pearson",
    "windowed_correlations",
    "instantaneous_decision",
    "instantaneous_decisions",
    "attended_unattended_metrics",
]


@dataclass(frozen=True)
class WindowSpec:
    """Window geometry in samples; hop = length - overlap."""

    length_samples: int
    hop_samples: int
    rate: float

    def __post_init__(self):
        if not (0 < self.hop_samples <= self.length_samples):
            raise ParameterError(
                f"need 0 < hop ({self.hop_samples}) <= length ({self.length_samples})"
            )
        if self.rate <= 0:
            raise ParameterError("rate must be positive")

    @classmethod
    def from_seconds(cls, length_s: float, overlap_s: float, rate: float) -> "WindowSpec":
        length = int(round(length_s * rate))
        hop = length - int(round(overlap_s * rate))
        return cls(length_samples=length, hop_samples=hop, rate=rate)

    @property
    def length_s(self) -> float:
        return self.length_samples / self.rate

    @property
    def hop_s(self) -> float:
        return self.hop_samples / self.rate

    def window_count(self, n_samples: int) -> int:
        if n_samples < self.length_samples:
            return 0
        return (n_samples - self.length_samples) // self.hop_samples + 1

    def start_samples(self, n_samples: int) -> np.ndarray:
        return np.arange(self.window_count(n_samples)) * self.hop_samples


@dataclass(frozen=True)
class CorrelationSeries:
    """Per-window correlation pairs (rho1, rho2) with window geometry.

    ``degenerate`` flags windows where at least one correlation was
    undefined (a constant window) and was mapped to 0: a constant
    reconstruction carries no evidence either way.
    """

    rho1: np.ndarray
    rho2: np.ndarray
    start_samples: np.ndarray
    spec: WindowSpec
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.degenerate is None:
            object.__setattr__(
                self, "degenerate", np.zeros(len(self.rho1), dtype=bool)
            )
        if not (len(self.rho1) == len(self.rho2) == len(self.start_samples)):
            raise ParameterError("series arrays must have equal length")

    def __len__(self) -> int:
        return len(self.rho1)

    @property
    def t_start_s(self) -> np.ndarray:
        return self.start_samples / self.spec.rate

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["window_index", "t_start_s", "rho1", "rho2"])
            for i, (t, r1, r2) in enumerate(zip(self.t_start_s, self.rho1, self.rho2)):
                writer.writerow([i, repr(float(t)), repr(float(r1)), repr(float(r2))])

    @classmethod
    def from_csv(cls, path, spec: WindowSpec) -> "CorrelationSeries":
        rows = list(csv.DictReader(open(path, newline="")))
        rho1 = np.array([float(r["rho1"]) for r in rows])
        rho2 = np.array([float(r["rho2"]) for r in rows])
        starts = np.array(
            [int(round(float(r["t_start_s"]) * spec.rate)) for r in rows]
        )
        return cls(rho1=rho1, rho2=rho2, start_samples=starts, spec=spec)


def pearson(x, y) -> float:
    """Standard centered, normalized correlation of two equal-length windows."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ParameterError("pearson needs two equal-length 1-D windows")
    if len(x) < 2:
        raise ParameterError("pearson needs at least 2 samples")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(xc @ xc)
    sy = float(yc @ yc)
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for constant window")
    r = float(xc @ yc) / np.sqrt(sx * sy)
    return float(np.clip(r, -1.0, 1.0))


def _window_view(samples: np.ndarray, spec: WindowSpec) -> np.ndarray:
    return sliding_window_view(samples, spec.length_samples)[:: spec.hop_samples]


def _windowed_pearson(a: np.ndarray, b: np.ndarray):
    """Row-wise correlation of two window stacks; zero + flag where undefined."""
    ac = a - a.mean(axis=1, keepdims=True)
    bc = b - b.mean(axis=1, keepdims=True)
    sa = np.einsum("ij,ij->i", ac, ac)
    sb = np.einsum("ij,ij->i", bc, bc)
    cross = np.einsum("ij,ij->i", ac, bc)
    bad = (sa == 0.0) | (sb == 0.0)
    denom = np.sqrt(np.where(bad, 1.0, sa * sb))
    rho = np.where(bad, 0.0, cross / denom)
    return np.clip(rho, -1.0, 1.0), bad


def windowed_correlations(
    e_hat: SampledSignal, e1: SampledSignal, e2: SampledSignal, spec: WindowSpec
) -> CorrelationSeries:
    """One (rho1, rho2) pair per window position of the reconstruction."""
    n = len(e_hat)
    if len(e1) != n or len(e2) != n:
        raise ParameterError("envelopes must have equal length")
    if n < spec.length_samples:
        raise ParameterError(
            f"need at least one window ({spec.length_samples} samples), got {n}"
        )
    hat_w = _window_view(e_hat.samples, spec)
    rho1, bad1 = _windowed_pearson(_window_view(e1.samples, spec), hat_w)
    rho2, bad2 = _windowed_pearson(_window_view(e2.samples, spec), hat_w)
    return CorrelationSeries(
        rho1=rho1,
        rho2=rho2,
        start_samples=spec.start_samples(n),
        spec=spec,
        degenerate=bad1 | bad2,
    )


def instantaneous_decision(rho1: float, rho2: float) -> int:
    """Speaker 1 iff rho1 > rho2; ties go to speaker 2."""
    return 1 if rho1 > rho2 else 2


def instantaneous_decisions(series: CorrelationSeries) -> np.ndarray:
    return np.where(series.rho1 > series.rho2, 1, 2)


def _summary(values: np.ndarray) -> dict:
    q1, med, q3 = np.percentile(values, [25.0, 50.0, 75.0])
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "n": len(values)}


@dataclass(frozen=True)
class CorrelationQuality:
    """Windowed attended/unattended correlations plus box-plot summaries."""

    rho_attended: np.ndarray
    rho_unattended: np.ndarray
    start_samples: np.ndarray
    spec: WindowSpec
    summary: dict


def attended_unattended_metrics(
    e_hat: SampledSignal,
    e_attended: SampledSignal,
    e_unattended: SampledSignal,
    spec: WindowSpec,
) -> CorrelationQuality:
    """Correlation of a reconstruction against the true attended/unattended envelopes."""
    series = windowed_correlations(e_hat, e_attended, e_unattended, spec)
    return CorrelationQuality(
        rho_attended=series.rho1,
        rho_unattended=series.rho2,
        start_samples=series.start_samples,
        spec=spec,
        summary={
            "attended": _summary(series.rho1),
            "unattended": _summary(series.rho2),
        },
    )
