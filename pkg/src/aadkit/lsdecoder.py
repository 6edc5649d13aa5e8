"""Linear least-squares envelope reconstruction.

The decoder weight vector g minimizes

    (1/K) sum_k (e[k] - g^T r[k])^2 + beta * g^T D g

over lag-matrix rows r[k], where D penalizes roughness of the weights
across the lag axis within each channel. The closed-form solution is
g = (Q + beta D)^{-1} q with the sample moments Q = (1/K) sum r r^T and
q = (1/K) sum r e. Moments can be merged across folds, which makes k-fold
cross-validation of beta cheap: per-fold moments are accumulated once.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import linalg as sla

from .corrwin import pearson
from .dsp import SampledSignal
from .errors import (
    DataError,
    FormatError,
    ParameterError,
    SingularSystemError,
    UndefinedCorrelationError,
)
from .lagspace import LagMatrix

__all__ = [
    "LinearEstimator",
    "MomentPair",
    "DerivativeRegularizer",
    "accumulate_moments",
    "merge_moments",
    "build_derivative_regularizer",
    "default_beta_grid",
    "solve_estimator",
    "cross_validate_beta",
    "reconstruct",
    "save_estimator",
    "load_estimator",
]

COLUMN_ORDER_TAG = "channel-major-lag"


@dataclass(frozen=True)
class LinearEstimator:
    """Spatio-temporal weight vector with its fit-time metadata."""

    weights: np.ndarray
    delta: int
    channel_count: int
    beta: float
    solver: str = "cholesky"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        expected = self.channel_count * (self.delta + 1)
        if w.shape != (expected,):
            raise ParameterError(
                f"weight length {w.shape} inconsistent with C={self.channel_count}, "
                f"delta={self.delta}"
            )
        if not np.all(np.isfinite(w)):
            raise ParameterError("weights must be finite")


@dataclass(frozen=True)
class MomentPair:
    """Sample moments Q = (1/K) sum r r^T and q = (1/K) sum r e."""

    Q: np.ndarray
    q: np.ndarray
    sample_count: int
    delta: int
    channel_count: int

    def merge(self, other: "MomentPair") -> "MomentPair":
        if self.Q.shape != other.Q.shape:
            raise ParameterError("cannot merge moments of different dimension")
        total = self.sample_count + other.sample_count
        w1 = self.sample_count / total
        w2 = other.sample_count / total
        return MomentPair(
            Q=w1 * self.Q + w2 * other.Q,
            q=w1 * self.q + w2 * other.q,
            sample_count=total,
            delta=self.delta,
            channel_count=self.channel_count,
        )


def merge_moments(moments) -> MomentPair:
    """Sample-count-weighted merge of several MomentPairs (fixed order)."""
    moments = list(moments)
    if not moments:
        raise ParameterError("nothing to merge")
    out = moments[0]
    for m in moments[1:]:
        out = out.merge(m)
    return out


@dataclass(frozen=True)
class DerivativeRegularizer:
    """Block-diagonal Gram matrix of the per-channel first-difference operator."""

    D: np.ndarray


def accumulate_moments(lag: LagMatrix, env: SampledSignal) -> MomentPair:
    """Moments of one contiguous segment; env[k] pairs with lag row k."""
    e = env.samples
    if len(e) != lag.rows:
        raise ParameterError(
            f"envelope length {len(e)} must match lag rows {lag.rows}"
        )
    k = lag.rows
    Q = lag.values.T @ lag.values / k
    Q = 0.5 * (Q + Q.T)
    q = lag.values.T @ e / k
    return MomentPair(
        Q=Q, q=q, sample_count=k, delta=lag.delta, channel_count=lag.channel_count
    )


def build_derivative_regularizer(channels: int, delta: int) -> DerivativeRegularizer:
    """D = blockdiag_c(L^T L) with L the first-difference operator over lags.

    g^T D g equals the summed squared lag-to-lag weight differences within
    each channel; cross-channel differences are not penalized. delta = 0
    yields the zero matrix.
    """
    if channels < 1 or delta < 0:
        raise ParameterError("need channels >= 1 and delta >= 0")
    taps = delta + 1
    block = np.zeros((taps, taps))
    if delta > 0:
        diff = np.diff(np.eye(taps), axis=0)  # delta x (delta+1)
        block = diff.T @ diff
    D = np.kron(np.eye(channels), block)
    return DerivativeRegularizer(D=D)


def default_beta_grid(Q: np.ndarray, points: int = 13) -> np.ndarray:
    """Log-spaced grid 1e-6..1e6 scaled by trace(Q)/dim for scale invariance."""
    scale = np.trace(Q) / Q.shape[0]
    if scale <= 0:
        scale = 1.0
    return np.logspace(-6.0, 6.0, points) * scale


def solve_estimator(
    m: MomentPair, D: DerivativeRegularizer, beta: float
) -> LinearEstimator:
    """Solve (Q + beta D) g = q via Cholesky, with a clipped-eigenvalue fallback.

    A singular system at beta = 0 is reported as such; with beta > 0 an
    ill-conditioned system falls back to the pseudo-inverse (eigenvalues
    below 1e-10 of the maximum are dropped) and the estimator's ``solver``
    field records it.
    """
    if beta < 0:
        raise ParameterError("beta must be nonnegative")
    if D.D.shape != m.Q.shape:
        raise ParameterError("regularizer dimension does not match moments")
    A = m.Q + beta * D.D
    q = m.q
    g = None
    solver = "cholesky"
    try:
        c, low = sla.cho_factor(A, lower=True)
        g = sla.cho_solve((c, low), q)
    except sla.LinAlgError:
        g = None
    qnorm = np.linalg.norm(q)
    if g is not None and qnorm > 0:
        residual = np.linalg.norm(A @ g - q) / qnorm
        if residual >= 1e-8 or not np.all(np.isfinite(g)):
            g = None
    if g is None:
        if beta == 0.0:
            raise SingularSystemError(
                "moment matrix is singular at beta = 0; pass beta > 0"
            )
        evals, evecs = np.linalg.eigh(A)
        keep = evals > 1e-10 * evals.max()
        g = evecs[:, keep] @ ((evecs[:, keep].T @ q) / evals[keep])
        solver = "pseudo_inverse"
    return LinearEstimator(
        weights=g,
        delta=m.delta,
        channel_count=m.channel_count,
        beta=float(beta),
        solver=solver,
    )


def reconstruct(est: LinearEstimator, lag: LagMatrix) -> SampledSignal:
    """Apply the decoder row by row: e_hat[k] = g^T r[k]."""
    if lag.dim != est.weights.shape[0]:
        raise ParameterError(
            f"lag dimension {lag.dim} does not match weights {est.weights.shape[0]}"
        )
    return SampledSignal(lag.values @ est.weights, lag.rate)


def cross_validate_beta(folds, grid=None):
    """Pick beta by k-fold cross-validation.

    For each beta and each held-out fold, a decoder is fit on the merged
    moments of the remaining folds and scored by the Pearson correlation
    between its reconstruction and the attended envelope on the held-out
    fold. Returns (beta_star, mean held-out score per beta); ties resolve
    to the smaller beta. Folds with a constant envelope are skipped with a
    warning.
    """
    folds = list(folds)
    if len(folds) < 2:
        raise ParameterError("cross-validation needs at least 2 folds")
    moments = [accumulate_moments(lag, env) for lag, env in folds]
    D = build_derivative_regularizer(moments[0].channel_count, moments[0].delta)
    if grid is None:
        grid = default_beta_grid(merge_moments(moments).Q)
    grid = np.asarray(sorted(grid), dtype=np.float64)
    if grid.size == 0:
        raise ParameterError("beta grid is empty")

    scores = np.zeros((len(grid), len(folds)))
    usable = np.ones(len(folds), dtype=bool)
    for j, (lag, env) in enumerate(folds):
        if np.ptp(env.samples) == 0.0:
            usable[j] = False
            warnings.warn(f"fold {j} skipped: constant envelope", stacklevel=2)
    if not usable.any():
        raise DataError("all folds have constant envelopes")

    for j in range(len(folds)):
        if not usable[j]:
            continue
        train = merge_moments(m for i, m in enumerate(moments) if i != j)
        lag, env = folds[j]
        for i, beta in enumerate(grid):
            est = solve_estimator(train, D, beta)
            try:
                scores[i, j] = pearson(
                    reconstruct(est, lag).samples, env.samples
                )
            except UndefinedCorrelationError:
                scores[i, j] = 0.0
    mean_scores = scores[:, usable].mean(axis=1)
    beta_star = float(grid[int(np.argmax(mean_scores))])
    return beta_star, mean_scores


def save_estimator(est: LinearEstimator, path) -> None:
    """Write weights as little-endian float64 plus a JSON sidecar."""
    path = Path(path)
    path.with_suffix(".bin").write_bytes(
        est.weights.astype("<f8").tobytes()
    )
    meta = {
        "channel_count": est.channel_count,
        "delta": est.delta,
        "beta": est.beta,
        "solver": est.solver,
        "column_order": COLUMN_ORDER_TAG,
        "dtype": "<f8",
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_estimator(path) -> LinearEstimator:
    path = Path(path)
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read estimator sidecar: {exc}") from exc
    if meta.get("column_order") != COLUMN_ORDER_TAG:
        raise FormatError(
            f"unsupported column order {meta.get('column_order')!r}; "
            f"expected {COLUMN_ORDER_TAG!r}"
        )
    raw = path.with_suffix(".bin").read_bytes()
    expected = meta["channel_count"] * (meta["delta"] + 1) * 8
    if len(raw) != expected:
        raise FormatError(
            f"weight file has {len(raw)} bytes, expected {expected}"
        )
    weights = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return LinearEstimator(
        weights=weights,
        delta=meta["delta"],
        channel_count=meta["channel_count"],
        beta=meta["beta"],
        solver=meta.get("solver", "cholesky"),
    )
