"""State-space smoothing of windowed correlation evidence.

The attention state d_k in {1, 2} is linked to a latent random walk
z_k = c0 * z_{k-1} + w_k through a logistic function, p(d_k = 1) =
sigmoid(z_k). The process-noise variance eta_k carries an Inverse-Gamma
(a0, b0) prior that sets how much z may move per step. The magnitudes of
the two per-window correlation coefficients are modeled Log-Normally,
with one parameter set for the attended speaker and one for the
unattended speaker.

Per sliding smoothing window the latent quantities are fit by EM:

  E step    q_k = posterior of d_k = 1 given z and the correlation pair
  M step z  damped Newton ascent of the Bernoulli + transition terms,
            jointly over the window's z (tridiagonal Hessian), with the
            instant before the window as a fixed left anchor
  M step eta  conjugate update eta_k = (b0 + 0.5 s_k) / (a0 + 3/2),
            s_k the squared transition residual

The windowed MAP objective is non-decreasing across sweeps; each window
warm-starts from the previous one shifted by one instant.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solveh_banded
from scipy.special import expit, gammaln, log_expit

from .corrwin import CorrelationSeries
from .errors import DataError, NumericalError, ParameterError

__all__ = [
    "SsmHyper",
    "LogNormalParams",
    "SsmState",
    "AttentionPosterior",
    "OnlineDecodeResult",
    "attention_probability",
    "fit_lognormal",
    "observation_loglik",
    "em_smoother",
    "decode_window",
    "run_online",
]

RHO_CLAMP_LO = 1e-6
RHO_CLAMP_HI = 1.0
SIGMA_FLOOR = 1e-3
NEWTON_MAX_ITER = 100
NEWTON_GRAD_TOL = 1e-10
NEWTON_MAX_BACKTRACKS = 50


@dataclass(frozen=True)
class SsmHyper:
    """AR coefficient and Inverse-Gamma shape/scale for the noise variances."""

    c0: float = 1.0
    a0: float = 2.008
    b0: float = 0.2016

    def __post_init__(self):
        if abs(self.c0) > 1.0:
            raise ParameterError("|c0| must not exceed 1")
        if not self.a0 > 1.0:
            raise ParameterError("a0 must exceed 1")
        if not self.b0 > 0.0:
            raise ParameterError("b0 must be positive")

    @property
    def eta_prior_mode(self) -> float:
        return self.b0 / (self.a0 + 1.0)


@dataclass(frozen=True)
class LogNormalParams:
    """Location/scale of log |rho|."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise ParameterError("sigma must be positive")


@dataclass(frozen=True)
class SsmState:
    """Latent state over one smoothing window.

    ``z_anchor`` is the fixed smoothed state of the instant just before the
    window (0 for the very first window). ``objective_trace`` records the
    windowed MAP objective after each EM sweep.
    """

    z: np.ndarray
    eta: np.ndarray
    alpha_attended: LogNormalParams
    alpha_unattended: LogNormalParams
    hyper: SsmHyper
    z_anchor: float = 0.0
    objective_trace: tuple = ()

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        eta = np.asarray(self.eta, dtype=np.float64)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "eta", eta)
        if z.shape != eta.shape or z.ndim != 1 or len(z) == 0:
            raise ParameterError("z and eta must be equal-length 1-D arrays")
        if not np.all(np.isfinite(z)):
            raise ParameterError("z must be finite")
        if not np.all(eta > 0.0):
            raise ParameterError("eta must be positive elementwise")

    @classmethod
    def initial(
        cls,
        window_len: int,
        alpha_attended: LogNormalParams,
        alpha_unattended: LogNormalParams,
        hyper: SsmHyper,
    ) -> "SsmState":
        return cls(
            z=np.zeros(window_len),
            eta=np.full(window_len, hyper.eta_prior_mode),
            alpha_attended=alpha_attended,
            alpha_unattended=alpha_unattended,
            hyper=hyper,
            z_anchor=0.0,
        )


@dataclass(frozen=True)
class AttentionPosterior:
    """p(d = 1) per instant of a smoothing window, with hard decisions."""

    p1: np.ndarray
    decisions: np.ndarray

    @property
    def p2(self) -> np.ndarray:
        return 1.0 - self.p1


def attention_probability(z) -> float:
    """Logistic link from latent state to p(d = 1)."""
    return expit(z)


def fit_lognormal(samples) -> LogNormalParams:
    """Maximum-likelihood Log-Normal fit on clamped correlation magnitudes.

    mu is the mean and sigma the population standard deviation of the log
    values; sigma is floored at 1e-3 so degenerate samples stay usable.
    """
    x = np.abs(np.asarray(samples, dtype=np.float64))
    if x.size < 2:
        raise DataError("need at least 2 samples to fit a Log-Normal")
    logs = np.log(np.clip(x, RHO_CLAMP_LO, RHO_CLAMP_HI))
    return LogNormalParams(
        mu=float(logs.mean()), sigma=float(max(logs.std(), SIGMA_FLOOR))
    )


def observation_loglik(rho, params: LogNormalParams):
    """Log density of the Log-Normal at clamp(|rho|); vectorized."""
    x = np.clip(np.abs(np.asarray(rho, dtype=np.float64)), RHO_CLAMP_LO, RHO_CLAMP_HI)
    lx = np.log(x)
    out = (
        -lx
        - np.log(params.sigma)
        - 0.5 * np.log(2.0 * np.pi)
        - (lx - params.mu) ** 2 / (2.0 * params.sigma**2)
    )
    return out if out.ndim else float(out)


def _evidence_logratio(rho1, rho2, state: SsmState):
    """Per-instant log-likelihood terms for d = 1 and d = 2."""
    la1 = observation_loglik(rho1, state.alpha_attended)
    lu1 = observation_loglik(rho1, state.alpha_unattended)
    la2 = observation_loglik(rho2, state.alpha_attended)
    lu2 = observation_loglik(rho2, state.alpha_unattended)
    return la1 + lu2, lu1 + la2


def _bernoulli_transition_objective(z, q, eta, c0, z_anchor):
    z_prev = np.concatenate([[z_anchor], z[:-1]])
    resid = z - c0 * z_prev
    return float(
        np.sum(q * log_expit(z) + (1.0 - q) * log_expit(-z))
        - np.sum(resid**2 / (2.0 * eta))
    )


def _newton_z(z0, q, eta, c0, z_anchor):
    """Damped Newton ascent of the concave M-step objective over z."""
    z = z0.copy()
    k = len(z)
    f = _bernoulli_transition_objective(z, q, eta, c0, z_anchor)
    for _ in range(NEWTON_MAX_ITER):
        sig = expit(z)
        z_prev = np.concatenate([[z_anchor], z[:-1]])
        grad = q - sig - (z - c0 * z_prev) / eta
        grad[:-1] += c0 * (z[1:] - c0 * z[:-1]) / eta[1:]
        if np.max(np.abs(grad)) < NEWTON_GRAD_TOL:
            break
        diag = sig * (1.0 - sig) + 1.0 / eta
        diag[:-1] += c0**2 / eta[1:]
        # solve (-H) step = grad with -H symmetric positive definite banded
        ab = np.zeros((2, k))
        ab[0, 1:] = -c0 / eta[1:]
        ab[1] = diag
        step = solveh_banded(ab, grad, lower=False)
        scale = 1.0
        for _ in range(NEWTON_MAX_BACKTRACKS):
            cand = z + scale * step
            f_cand = _bernoulli_transition_objective(cand, q, eta, c0, z_anchor)
            if f_cand >= f - 1e-12:
                z, f = cand, f_cand
                break
            scale *= 0.5
        else:
            raise NumericalError(
                "Newton step failed to improve the M-step objective after "
                f"{NEWTON_MAX_BACKTRACKS} halvings (grad inf-norm "
                f"{np.max(np.abs(grad)):.3e})"
            )
    return z


def _map_objective(z, eta, log_l1, log_l2, hyper, z_anchor):
    """Windowed log posterior of (z, eta) with d marginalized out."""
    a0, b0, c0 = hyper.a0, hyper.b0, hyper.c0
    obs = np.logaddexp(log_expit(z) + log_l1, log_expit(-z) + log_l2).sum()
    z_prev = np.concatenate([[z_anchor], z[:-1]])
    resid = z - c0 * z_prev
    trans = np.sum(-0.5 * np.log(2.0 * np.pi * eta) - resid**2 / (2.0 * eta))
    prior = np.sum(
        a0 * np.log(b0) - gammaln(a0) - (a0 + 1.0) * np.log(eta) - b0 / eta
    )
    return float(obs + trans + prior)


def em_smoother(rho1, rho2, init: SsmState, iters: int):
    """Fit one smoothing window by EM; returns (final state, posterior).

    ``rho1``/``rho2`` hold the two speakers' correlation coefficients at
    the window's instants. The returned state carries the per-sweep MAP
    objective trace, which is non-decreasing.
    """
    rho1 = np.asarray(rho1, dtype=np.float64)
    rho2 = np.asarray(rho2, dtype=np.float64)
    if rho1.shape != rho2.shape or rho1.ndim != 1:
        raise ParameterError("rho windows must be equal-length 1-D arrays")
    if len(rho1) != len(init.z):
        raise ParameterError(
            f"window length {len(rho1)} does not match state length {len(init.z)}"
        )
    if iters < 1:
        raise ParameterError("need at least one EM sweep")
    hyper = init.hyper
    log_l1, log_l2 = _evidence_logratio(rho1, rho2, init)
    z = init.z.copy()
    eta = init.eta.copy()
    trace = []
    for _ in range(iters):
        q = expit(z + log_l1 - log_l2)
        z = _newton_z(z, q, eta, hyper.c0, init.z_anchor)
        z_prev = np.concatenate([[init.z_anchor], z[:-1]])
        eta = (hyper.b0 + 0.5 * (z - hyper.c0 * z_prev) ** 2) / (hyper.a0 + 1.5)
        trace.append(_map_objective(z, eta, log_l1, log_l2, hyper, init.z_anchor))
    state = replace(init, z=z, eta=eta, objective_trace=tuple(trace))
    p1 = expit(z)
    posterior = AttentionPosterior(p1=p1, decisions=np.where(p1 > 0.5, 1, 2))
    return state, posterior


def decode_window(post: AttentionPosterior, k_star: int) -> int:
    """Speaker 1 iff p(d = 1) > 1/2 at the decoded instant; ties go to 2."""
    if not (0 <= k_star < len(post.p1)):
        raise ParameterError(f"k_star {k_star} outside window of {len(post.p1)}")
    return 1 if post.p1[k_star] > 0.5 else 2


@dataclass(frozen=True)
class OnlineDecodeResult:
    """One decoded instant per sliding smoothing window."""

    instants: np.ndarray  # correlation-window indices decoded
    t_s: np.ndarray
    p1: np.ndarray
    z: np.ndarray
    eta: np.ndarray
    decisions: np.ndarray
    alpha_attended: LogNormalParams
    alpha_unattended: LogNormalParams
    init_window_count: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["instant", "t_s", "p1", "z", "eta", "decision"])
            for row in zip(
                self.instants, self.t_s, self.p1, self.z, self.eta, self.decisions
            ):
                writer.writerow(
                    [int(row[0])]
                    + [repr(float(v)) for v in row[1:5]]
                    + [int(row[5])]
                )


def fit_alphas_from_series(
    series: CorrelationSeries, attended_labels, init_span_s: float
):
    """Fit attended/unattended Log-Normal parameters on the leading span.

    Uses windows fully contained in the first ``init_span_s`` seconds,
    labeled by the known attended speaker. Both parameter sets stay fixed
    afterwards.
    """
    attended_labels = np.asarray(attended_labels)
    if len(attended_labels) != len(series):
        raise ParameterError("need one attended label per correlation window")
    t_end = series.t_start_s + series.spec.length_s
    init_mask = t_end <= init_span_s + 1e-9
    n_init = int(init_mask.sum())
    if n_init < 2:
        raise DataError(
            f"initialization span {init_span_s} s covers only {n_init} windows"
        )
    att = np.where(
        attended_labels[:n_init] == 1, series.rho1[:n_init], series.rho2[:n_init]
    )
    unatt = np.where(
        attended_labels[:n_init] == 1, series.rho2[:n_init], series.rho1[:n_init]
    )
    return fit_lognormal(att), fit_lognormal(unatt), n_init


def run_online(
    series: CorrelationSeries,
    attended_labels,
    hyper: SsmHyper = SsmHyper(),
    k_p: int = 1,
    k_a: int = 1,
    iters: int = 20,
    init_span_s: float = 15.0,
    alphas=None,
) -> OnlineDecodeResult:
    """Slide the smoother over a correlation series and decode each instant.

    The Log-Normal parameter sets come from the oracle-labeled windows in
    the leading ``init_span_s`` seconds (``attended_labels`` is consulted
    only there), unless ``alphas`` provides pre-fitted (attended,
    unattended) parameters. Each window of length k_p + k_a + 1 is fit by
    EM, decoded k_a instants before its newest one, and hands its shifted
    state to the next window as warm start; the new instant enters with
    the previous last z and the prior-mode noise variance.
    """
    if k_p < 0 or k_a < 0:
        raise ParameterError("k_p and k_a must be nonnegative")
    k_ssm = k_p + k_a + 1
    if alphas is None:
        alpha_a, alpha_u, n_init = fit_alphas_from_series(
            series, attended_labels, init_span_s
        )
    else:
        alpha_a, alpha_u = alphas
        n_init = 0
    if len(series) < n_init + k_ssm:
        raise ParameterError(
            f"series of {len(series)} windows is too short for initialization "
            f"span ({n_init}) plus one smoothing window ({k_ssm})"
        )

    state = SsmState.initial(k_ssm, alpha_a, alpha_u, hyper)
    instants, p1s, zs, etas, decisions = [], [], [], [], []
    for k0 in range(n_init + k_ssm - 1, len(series)):
        lo = k0 - k_ssm + 1
        state, post = em_smoother(
            series.rho1[lo : k0 + 1], series.rho2[lo : k0 + 1], state, iters
        )
        k_star = k_ssm - 1 - k_a
        instants.append(k0 - k_a)
        p1s.append(post.p1[k_star])
        zs.append(state.z[k_star])
        etas.append(state.eta[k_star])
        decisions.append(decode_window(post, k_star))
        # shift one instant: the oldest smoothed z becomes the next anchor
        state = replace(
            state,
            z=np.concatenate([state.z[1:], state.z[-1:]]),
            eta=np.concatenate([state.eta[1:], [hyper.eta_prior_mode]]),
            z_anchor=float(state.z[0]),
            objective_trace=(),
        )

    instants = np.asarray(instants, dtype=int)
    return OnlineDecodeResult(
        instants=instants,
        t_s=series.t_start_s[instants],
        p1=np.asarray(p1s),
        z=np.asarray(zs),
        eta=np.asarray(etas),
        decisions=np.asarray(decisions, dtype=int),
        alpha_attended=alpha_a,
        alpha_unattended=alpha_u,
        init_window_count=n_init,
    )
