"""Non-linear envelope reconstruction with a one-hidden-layer conv net.

Per lag-matrix row r[k] the network computes

    h_f[k] = tanh(w_f . r[k] + b_f)          f = 1..F hidden filters
    e_hat[k] = sum_f v_f h_f[k] + b_out

which is a 1-D convolution over time with kernels spanning all channels
and delta+1 taps. Training minimizes 1 - rho(e, e_hat) per contiguous
60 s window with Nadam updates and inverted dropout on the hidden units.
The gradient engine is analytic and checked against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dsp import SampledSignal
from .errors import (
    DataError,
    FormatError,
    ParameterError,
    TrainingError,
    UndefinedCorrelationError,
)
from .lagspace import LagMatrix

__all__ = [
    "ConvEstimator",
    "TrainConfig",
    "TrainResult",
    "NadamState",
    "init_conv_estimator",
    "forward",
    "correlation_loss",
    "gradients",
    "nadam_step",
    "train",
    "save_network",
    "load_network",
]


@dataclass(frozen=True)
class ConvEstimator:
    """Hidden tanh filters (F x C*(delta+1)) plus a linear readout.

    ``input_mean`` and ``input_scale`` standardize each regressor column
    before the hidden layer; training on raw EEG amplitudes would saturate
    the tanh units. They default to identity.
    """

    hidden_weights: np.ndarray
    hidden_bias: np.ndarray
    output_weights: np.ndarray
    output_bias: float
    delta: int
    channel_count: int
    input_mean: np.ndarray = None
    input_scale: np.ndarray = None

    def __post_init__(self):
        f, dim = self.hidden_weights.shape
        if dim != self.channel_count * (self.delta + 1):
            raise ParameterError("hidden weight width inconsistent with C, delta")
        if self.hidden_bias.shape != (f,) or self.output_weights.shape != (f,):
            raise ParameterError("bias/readout shapes inconsistent with filter count")
        if self.input_mean is None:
            object.__setattr__(self, "input_mean", np.zeros(dim))
        if self.input_scale is None:
            object.__setattr__(self, "input_scale", np.ones(dim))
        if self.input_mean.shape != (dim,) or self.input_scale.shape != (dim,):
            raise ParameterError("input normalization shapes inconsistent")
        for arr in (
            self.hidden_weights,
            self.hidden_bias,
            self.output_weights,
            self.input_mean,
            self.input_scale,
        ):
            if not np.all(np.isfinite(arr)):
                raise ParameterError("network parameters must be finite")

    @property
    def filter_count(self) -> int:
        return self.hidden_weights.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.delta + 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.002
    iterations: int = 3000
    batch_samples: int = 3840  # one 60 s window at 64 Hz
    dropout_rate: float = 0.25
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    filters: int = 5
    eval_every: int = 100  # validation cadence, iterations

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ParameterError("dropout_rate must lie in [0, 1)")
        if self.iterations < 1 or self.batch_samples < 2 or self.filters < 1:
            raise ParameterError("iterations, batch_samples, filters must be positive")


def init_conv_estimator(
    channels: int, delta: int, filters: int, seed: int, normalization=None
) -> ConvEstimator:
    """Glorot-uniform weights, zero biases, seeded."""
    rng = np.random.default_rng(seed)
    dim = channels * (delta + 1)
    lim_h = np.sqrt(6.0 / (dim + filters))
    lim_o = np.sqrt(6.0 / (filters + 1))
    mean, scale = normalization if normalization is not None else (None, None)
    return ConvEstimator(
        hidden_weights=rng.uniform(-lim_h, lim_h, size=(filters, dim)),
        hidden_bias=np.zeros(filters),
        output_weights=rng.uniform(-lim_o, lim_o, size=filters),
        output_bias=0.0,
        delta=delta,
        channel_count=channels,
        input_mean=mean,
        input_scale=scale,
    )


def _forward_values(
    net: ConvEstimator, values: np.ndarray, dropout_mask=None, dropout_rate=0.0
) -> np.ndarray:
    values = (values - net.input_mean) / net.input_scale
    pre = values @ net.hidden_weights.T + net.hidden_bias
    h = np.tanh(pre)
    if dropout_mask is None:
        scale = net.output_weights
    else:
        mask = np.asarray(dropout_mask, dtype=np.float64)
        if mask.shape != (net.filter_count,):
            raise ParameterError("dropout mask must have one entry per filter")
        scale = net.output_weights * mask / (1.0 - dropout_rate)
    return h @ scale + net.output_bias


def forward(
    net: ConvEstimator, lag: LagMatrix, dropout_mask=None, dropout_rate: float = 0.0
) -> SampledSignal:
    """Evaluate the network on every lag row.

    With a mask, hidden outputs are zeroed per filter and the rest rescaled
    by 1/(1-p) (inverted dropout); without one, no scaling is applied.
    """
    if lag.dim != net.hidden_weights.shape[1]:
        raise ParameterError(
            f"lag dimension {lag.dim} does not match network input "
            f"{net.hidden_weights.shape[1]}"
        )
    return SampledSignal(
        _forward_values(net, lag.values, dropout_mask, dropout_rate), lag.rate
    )


def correlation_loss(e: np.ndarray, e_hat: np.ndarray) -> float:
    """1 - rho(e, e_hat): 0 at perfect correlation, above 1 when negative.

    If exactly one side is constant the correlation is taken as 0 (loss 1);
    if both are constant there is nothing to compare and an error is raised.
    """
    e = np.asarray(e, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    if e.shape != e_hat.shape or len(e) < 2:
        raise ParameterError("windows must share a length of at least 2")
    ec = e - e.mean()
    hc = e_hat - e_hat.mean()
    se = float(ec @ ec)
    sh = float(hc @ hc)
    if se == 0.0 and sh == 0.0:
        raise UndefinedCorrelationError("both windows are constant")
    if se == 0.0 or sh == 0.0:
        return 1.0
    return 1.0 - float(ec @ hc) / np.sqrt(se * sh)


def _loss_grad_wrt_output(e: np.ndarray, e_hat: np.ndarray):
    """Loss value and d(1 - rho)/d(e_hat) for one window."""
    ec = e - e.mean()
    hc = e_hat - e_hat.mean()
    se = float(ec @ ec)
    sh = float(hc @ hc)
    if sh == 0.0:
        # constant reconstruction: rho taken as 0, gradient direction undefined
        return 1.0, np.zeros_like(e_hat)
    denom = np.sqrt(se * sh)
    rho = float(ec @ hc) / denom
    grad = -(ec / denom - rho * hc / sh)
    return 1.0 - rho, grad


@dataclass
class Gradients:
    hidden_weights: np.ndarray
    hidden_bias: np.ndarray
    output_weights: np.ndarray
    output_bias: float


def gradients(net: ConvEstimator, windows, dropout_masks=None, dropout_rate=0.0):
    """Mean correlation loss over windows and its exact parameter gradients.

    ``windows`` is a sequence of (lag_values, envelope_values) pairs, each a
    contiguous stretch; dropout masks are per window. A constant envelope
    window has no learning signal and raises.
    """
    windows = list(windows)
    if not windows:
        raise ParameterError("need at least one window")
    if dropout_masks is None:
        dropout_masks = [None] * len(windows)
    dW = np.zeros_like(net.hidden_weights)
    db = np.zeros_like(net.hidden_bias)
    dv = np.zeros_like(net.output_weights)
    dbo = 0.0
    total_loss = 0.0
    for (values, env), mask in zip(windows, dropout_masks):
        env = np.asarray(env, dtype=np.float64)
        if np.ptp(env) == 0.0:
            raise DataError("constant envelope window carries no learning signal")
        if mask is None:
            scale = np.ones(net.filter_count)
        else:
            scale = np.asarray(mask, dtype=np.float64) / (1.0 - dropout_rate)
        values = (values - net.input_mean) / net.input_scale
        pre = values @ net.hidden_weights.T + net.hidden_bias
        h = np.tanh(pre)
        e_hat = h @ (net.output_weights * scale) + net.output_bias
        loss, du = _loss_grad_wrt_output(env, e_hat)
        total_loss += loss
        dv += (h.T @ du) * scale
        dbo += float(du.sum())
        dh = np.outer(du, net.output_weights * scale)
        dpre = dh * (1.0 - h * h)
        dW += dpre.T @ values
        db += dpre.sum(axis=0)
    n = len(windows)
    grads = Gradients(dW / n, db / n, dv / n, dbo / n)
    return total_loss / n, grads


@dataclass(frozen=True)
class NadamState:
    """First/second moment accumulators plus the step counter."""

    step: int
    m: dict
    v: dict

    @classmethod
    def zeros_like(cls, params: dict) -> "NadamState":
        return cls(
            step=0,
            m={k: np.zeros_like(np.asarray(p, dtype=np.float64)) for k, p in params.items()},
            v={k: np.zeros_like(np.asarray(p, dtype=np.float64)) for k, p in params.items()},
        )


def nadam_step(state: NadamState, params: dict, grads: dict, config: TrainConfig):
    """One Nesterov-accelerated Adam update; returns (new state, new params).

    Uses the common fixed-momentum form: with bias-corrected moments mhat
    and vhat at step t,

        p -= lr * (beta1 * mhat + (1 - beta1) * g / (1 - beta1^t))
             / (sqrt(vhat) + eps)
    """
    t = state.step + 1
    b1, b2, eps = config.beta1, config.beta2, config.epsilon
    new_m, new_v, new_p = {}, {}, {}
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        m = b1 * state.m[key] + (1.0 - b1) * g
        v = b2 * state.v[key] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        update = (b1 * m_hat + (1.0 - b1) * g / (1.0 - b1**t)) / (
            np.sqrt(v_hat) + eps
        )
        new_p[key] = np.asarray(p, dtype=np.float64) - config.learning_rate * update
        new_m[key] = m
        new_v[key] = v
    return NadamState(step=t, m=new_m, v=new_v), new_p


def _net_to_params(net: ConvEstimator) -> dict:
    return {
        "hidden_weights": net.hidden_weights,
        "hidden_bias": net.hidden_bias,
        "output_weights": net.output_weights,
        "output_bias": np.float64(net.output_bias),
    }


def _params_to_net(params: dict, template: ConvEstimator) -> ConvEstimator:
    return ConvEstimator(
        hidden_weights=params["hidden_weights"],
        hidden_bias=params["hidden_bias"],
        output_weights=params["output_weights"],
        output_bias=float(params["output_bias"]),
        delta=template.delta,
        channel_count=template.channel_count,
        input_mean=template.input_mean,
        input_scale=template.input_scale,
    )


@dataclass
class TrainResult:
    estimator: ConvEstimator
    loss_trace: np.ndarray
    val_trace: list
    best_iteration: int


def _segment_windows(folds, batch_samples):
    """(lag_values, env_values) per fold, keeping only folds long enough."""
    segments = []
    for lag, env in folds:
        if lag.rows >= batch_samples:
            segments.append((lag.values, np.asarray(env.samples, dtype=np.float64)))
    return segments


def train(folds, config: TrainConfig, validation=None) -> TrainResult:
    """Train a conv estimator on contiguous (LagMatrix, Envelope) folds.

    Each iteration draws one contiguous window of ``batch_samples`` rows
    from a random fold, applies a fresh dropout mask to the hidden units,
    and takes one Nadam step. With ``validation`` given (a (LagMatrix,
    Envelope) pair), the parameters with the best validation correlation
    are returned; otherwise the final ones. Deterministic given the seed.
    """
    folds = list(folds)
    if not folds:
        raise ParameterError("training data is empty")
    first_lag = folds[0][0]
    segments = _segment_windows(folds, config.batch_samples)
    if not segments:
        # fall back to whole folds when they are shorter than one batch
        segments = [(lag.values, env.samples) for lag, env in folds]
    all_values = np.concatenate([seg for seg, _ in segments], axis=0)
    norm = (all_values.mean(axis=0), np.maximum(all_values.std(axis=0), 1e-12))
    rng = np.random.default_rng(config.seed)
    net = init_conv_estimator(
        first_lag.channel_count,
        first_lag.delta,
        config.filters,
        config.seed,
        normalization=norm,
    )
    params = _net_to_params(net)
    state = NadamState.zeros_like(params)
    losses = np.zeros(config.iterations)
    val_trace = []
    best = (-np.inf, params, 0)

    for it in range(config.iterations):
        seg_values, seg_env = segments[rng.integers(len(segments))]
        span = min(config.batch_samples, seg_values.shape[0])
        start = int(rng.integers(seg_values.shape[0] - span + 1))
        window = (seg_values[start : start + span], seg_env[start : start + span])
        if config.dropout_rate > 0.0:
            mask = (rng.random(config.filters) >= config.dropout_rate).astype(float)
            if not mask.any():
                mask[int(rng.integers(config.filters))] = 1.0
        else:
            mask = None
        loss, grads = gradients(
            net, [window], [mask], dropout_rate=config.dropout_rate
        )
        losses[it] = loss
        if not np.isfinite(loss):
            raise TrainingError(
                f"training diverged at iteration {it}", trace=losses[: it + 1]
            )
        state, params = nadam_step(
            state,
            params,
            {
                "hidden_weights": grads.hidden_weights,
                "hidden_bias": grads.hidden_bias,
                "output_weights": grads.output_weights,
                "output_bias": grads.output_bias,
            },
            config,
        )
        net = _params_to_net(params, net)
        if validation is not None and (
            (it + 1) % config.eval_every == 0 or it + 1 == config.iterations
        ):
            val_lag, val_env = validation
            out = _forward_values(net, val_lag.values)
            score = 1.0 - correlation_loss(val_env.samples, out)
            val_trace.append((it + 1, score))
            if score > best[0]:
                best = (score, params, it + 1)

    if validation is not None and np.isfinite(best[0]):
        params, best_it = best[1], best[2]
        net = _params_to_net(params, net)
    else:
        best_it = config.iterations
    return TrainResult(
        estimator=net,
        loss_trace=losses,
        val_trace=val_trace,
        best_iteration=best_it,
    )


def save_network(net: ConvEstimator, path) -> None:
    """JSON header plus concatenated little-endian float64 parameter blocks."""
    path = Path(path)
    header = {
        "channel_count": net.channel_count,
        "delta": net.delta,
        "filters": net.filter_count,
        "hidden_activation": "tanh",
        "output_activation": "linear",
        "dtype": "<f8",
        "layout": [
            "hidden_weights",
            "hidden_bias",
            "output_weights",
            "output_bias",
            "input_mean",
            "input_scale",
        ],
    }
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))
    blob = b"".join(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()
        for arr in (
            net.hidden_weights,
            net.hidden_bias,
            net.output_weights,
            np.array([net.output_bias]),
            net.input_mean,
            net.input_scale,
        )
    )
    path.with_suffix(".bin").write_bytes(blob)


def load_network(path) -> ConvEstimator:
    path = Path(path)
    try:
        header = json.loads(path.with_suffix(".json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read network header: {exc}") from exc
    f = header["filters"]
    dim = header["channel_count"] * (header["delta"] + 1)
    raw = path.with_suffix(".bin").read_bytes()
    expected = (f * dim + f + f + 1 + 2 * dim) * 8
    if len(raw) != expected:
        raise FormatError(f"weight file has {len(raw)} bytes, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f8")
    w_end = f * dim
    bias_end = w_end + 2 * f + 1
    return ConvEstimator(
        hidden_weights=flat[:w_end].reshape(f, dim).astype(np.float64),
        hidden_bias=flat[w_end : w_end + f].astype(np.float64),
        output_weights=flat[w_end + f : w_end + 2 * f].astype(np.float64),
        output_bias=float(flat[bias_end - 1]),
        delta=header["delta"],
        channel_count=header["channel_count"],
        input_mean=flat[bias_end : bias_end + dim].astype(np.float64),
        input_scale=flat[bias_end + dim :].astype(np.float64),
    )
