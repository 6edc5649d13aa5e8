"""Stacked spatio-temporal regressor construction.

Row k of a lag matrix concatenates, channel by channel, the samples
x_c[k] .. x_c[k + delta]. Decoder weight vectors therefore follow the
channel-major-then-lag column order; that ordering is the compatibility
contract for serialized estimators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dsp import MultichannelSignal
from .errors import ParameterError

__all__ = ["LagMatrix", "build_lag_matrix"]


@dataclass(frozen=True)
class LagMatrix:
    """(N - delta) x (C * (delta + 1)) design matrix plus its geometry."""

    values: np.ndarray
    delta: int
    channel_count: int
    rate: float

    def __post_init__(self):
        expected = self.channel_count * (self.delta + 1)
        if self.values.ndim != 2 or self.values.shape[1] != expected:
            raise ParameterError(
                f"lag matrix has {self.values.shape} but expected {expected} columns"
            )

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def column_index(self, channel: int, tap: int) -> int:
        return channel * (self.delta + 1) + tap


def build_lag_matrix(x: MultichannelSignal, delta: int) -> LagMatrix:
    """Build the lag matrix for ``delta`` extra future taps per channel.

    Rows whose window would run past the end of the signal are dropped,
    so the result has N - delta rows. delta = 0 reduces to the plain
    transposed signal.
    """
    if delta < 0:
        raise ParameterError("delta must be nonnegative")
    n = x.sample_count
    if n <= delta:
        raise ParameterError(f"signal length {n} must exceed delta {delta}")
    # windows: (C, N - delta, delta + 1); row k needs channel-major layout
    windows = sliding_window_view(x.data, delta + 1, axis=1)
    values = windows.transpose(1, 0, 2).reshape(n - delta, -1)
    return LagMatrix(
        values=np.ascontiguousarray(values),
        delta=delta,
        channel_count=x.channel_count,
        rate=x.rate,
    )
