"""Offline preprocessing primitives: filtering, re-referencing, envelopes, resampling.

All filters are applied forward-backward (zero phase), which is the right
choice for offline decoding work: the lag axis of the decoders must not be
shifted by filter group delay. Everything here is a pure function of its
inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .errors import ParameterError

__all__ = [
    "SampledSignal",
    "MultichannelSignal",
    "BiquadCascade",
    "design_butterworth_bandpass",
    "design_butterworth_lowpass",
    "filtfilt",
    "common_average_reference",
    "hilbert_envelope",
    "decimate",
    "resample_rational",
    "resample_to_rate",
    "speech_envelope",
]

# Anti-alias / anti-image corner as a fraction of the target Nyquist rate.
ANTIALIAS_REL_CUTOFF = 0.9
ANTIALIAS_ORDER = 8


def _as_float_array(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} must be finite (no NaN/Inf)")
    return arr


@dataclass(frozen=True)
class SampledSignal:
    """A single-channel signal with its sampling rate in Hz.

    Also used for speech envelopes and decoder reconstructions (which may
    go negative; nonnegativity is a property of the source, not the type).
    """

    samples: np.ndarray
    rate: float

    def __post_init__(self):
        object.__setattr__(self, "samples", _as_float_array(self.samples, "samples"))
        if self.samples.ndim != 1:
            raise ParameterError("samples must be one-dimensional")
        if not self.rate > 0:
            raise ParameterError(f"rate must be positive, got {self.rate}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.rate


# Envelopes live at the decoder rate (64 Hz in the standard pipeline) but are
# structurally just sampled signals.
Envelope = SampledSignal


@dataclass(frozen=True)
class MultichannelSignal:
    """C x N sample matrix (channels by time) with a shared sampling rate."""

    data: np.ndarray
    rate: float

    def __post_init__(self):
        object.__setattr__(self, "data", _as_float_array(self.data, "data"))
        if self.data.ndim != 2:
            raise ParameterError("data must be 2-D (channels x samples)")
        if self.data.shape[0] < 1:
            raise ParameterError("need at least one channel")
        if not self.rate > 0:
            raise ParameterError(f"rate must be positive, got {self.rate}")

    @property
    def channel_count(self) -> int:
        return self.data.shape[0]

    @property
    def sample_count(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class BiquadCascade:
    """Chain of second-order sections: rows of (b0, b1, b2, a1, a2), a0 = 1.

    ``pole_count`` is the total analog-prototype pole count mapped to the
    digital filter; it sets the reflection pad length for zero-phase runs.
    """

    sections: np.ndarray
    kind: str
    corners_hz: tuple
    order: int
    rate: float
    pole_count: int = field(default=0)

    def __post_init__(self):
        sec = np.atleast_2d(np.asarray(self.sections, dtype=np.float64))
        if sec.shape[1] != 5:
            raise ParameterError("each section needs (b0, b1, b2, a1, a2)")
        object.__setattr__(self, "sections", sec)
        if self.pole_count == 0:
            object.__setattr__(self, "pole_count", 2 * sec.shape[0])
        radii = self.pole_radii()
        if radii.size and radii.max() >= 1.0 - 1e-9:
            raise ParameterError(
                f"unstable cascade: max pole radius {radii.max():.12f}"
            )

    def pole_radii(self) -> np.ndarray:
        """Magnitude of every denominator root, section by section."""
        radii = []
        for _, _, _, a1, a2 in self.sections:
            radii.extend(np.abs(np.roots([1.0, a1, a2])))
        return np.asarray(radii)

    @property
    def sos(self) -> np.ndarray:
        """scipy-style (n_sections, 6) array with explicit a0 = 1 column."""
        b = self.sections[:, :3]
        a = np.column_stack(
            [np.ones(len(self.sections)), self.sections[:, 3], self.sections[:, 4]]
        )
        return np.hstack([b, a])

    def frequency_response(self, freqs_hz) -> np.ndarray:
        """Complex response at the given frequencies (Hz)."""
        _, h = sps.sosfreqz(self.sos, worN=np.atleast_1d(freqs_hz), fs=self.rate)
        return h


def _cascade_from_sos(sos: np.ndarray, kind, corners, order, rate, pole_count):
    # Order sections by ascending pole radius so early sections are the
    # best conditioned ones.
    radii = [np.max(np.abs(np.roots([1.0, s[4], s[5]]))) for s in sos]
    sos = sos[np.argsort(radii, kind="stable")]
    sections = np.column_stack([sos[:, 0], sos[:, 1], sos[:, 2], sos[:, 4], sos[:, 5]])
    return BiquadCascade(
        sections=sections,
        kind=kind,
        corners_hz=corners,
        order=order,
        rate=rate,
        pole_count=pole_count,
    )


def design_butterworth_bandpass(
    order: int, low_hz: float, high_hz: float, rate: float
) -> BiquadCascade:
    """Butterworth band-pass as a biquad cascade (bilinear transform, pre-warped).

    ``order`` is the analog prototype order; the digital filter has
    2 * order poles. The -3 dB points sit at ``low_hz`` and ``high_hz``.
    """
    if order < 1:
        raise ParameterError("order must be >= 1")
    if not (0.0 < low_hz < high_hz < rate / 2.0):
        raise ParameterError(
            f"need 0 < low ({low_hz}) < high ({high_hz}) < Nyquist ({rate / 2})"
        )
    sos = sps.butter(order, [low_hz, high_hz], btype="bandpass", output="sos", fs=rate)
    return _cascade_from_sos(
        sos, "bandpass", (low_hz, high_hz), order, rate, pole_count=2 * order
    )


def design_butterworth_lowpass(order: int, cutoff_hz: float, rate: float) -> BiquadCascade:
    """Butterworth low-pass cascade with its -3 dB point at ``cutoff_hz``."""
    if order < 1:
        raise ParameterError("order must be >= 1")
    if not (0.0 < cutoff_hz < rate / 2.0):
        raise ParameterError(
            f"cutoff must lie in (0, Nyquist), got {cutoff_hz} at rate {rate}"
        )
    sos = sps.butter(order, cutoff_hz, btype="lowpass", output="sos", fs=rate)
    return _cascade_from_sos(
        sos, "lowpass", (cutoff_hz,), order, rate, pole_count=order
    )


def _filtfilt_array(cascade: BiquadCascade, x: np.ndarray) -> np.ndarray:
    padlen = 3 * cascade.pole_count
    if x.shape[-1] <= padlen:
        raise ParameterError(
            f"signal length {x.shape[-1]} too short for zero-phase filtering; "
            f"need more than {padlen} samples (3x filter order)"
        )
    return sps.sosfiltfilt(cascade.sos, x, axis=-1, padtype="odd", padlen=padlen)


def filtfilt(cascade: BiquadCascade, x: SampledSignal) -> SampledSignal:
    """Zero-phase (forward-backward) application of a cascade.

    Edges are handled by odd reflection padding of 3x the filter order.
    The effective magnitude response is the squared cascade magnitude.
    """
    return SampledSignal(_filtfilt_array(cascade, x.samples), x.rate)


def common_average_reference(x: MultichannelSignal) -> MultichannelSignal:
    """Subtract the per-sample mean over channels from every channel."""
    if x.channel_count < 2:
        raise ParameterError("common average reference needs at least 2 channels")
    return MultichannelSignal(x.data - x.data.mean(axis=0, keepdims=True), x.rate)


def hilbert_envelope(x: SampledSignal) -> SampledSignal:
    """Magnitude of the analytic signal.

    The analytic signal is built in the frequency domain over the full
    record (zero negative frequencies, double positive frequencies), so
    expect edge effects on the first/last few cycles.
    """
    if len(x) < 8:
        raise ParameterError("hilbert_envelope needs at least 8 samples")
    return SampledSignal(np.abs(sps.hilbert(x.samples)), x.rate)


def decimate(x: SampledSignal, factor: int) -> SampledSignal:
    """Integer-factor downsampling with zero-phase Butterworth anti-aliasing.

    The anti-alias corner sits at 0.9x the output Nyquist rate. Output
    length is ceil(N / factor).
    """
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ParameterError(f"decimation factor must be a positive int, got {factor}")
    if factor == 1:
        return SampledSignal(x.samples.copy(), x.rate)
    out_rate = x.rate / factor
    cascade = design_butterworth_lowpass(
        ANTIALIAS_ORDER, ANTIALIAS_REL_CUTOFF * out_rate / 2.0, x.rate
    )
    filtered = _filtfilt_array(cascade, x.samples)
    return SampledSignal(filtered[::factor], out_rate)


def resample_rational(x: SampledSignal, up: int, down: int) -> SampledSignal:
    """Resample by the rational factor up/down.

    Upsampling zero-stuffs and removes images with a zero-phase Butterworth
    low-pass (gain ``up`` restores amplitude); downsampling reuses
    :func:`decimate`. Both corners sit at 0.9x the narrower Nyquist rate.
    """
    if up < 1 or down < 1:
        raise ParameterError("up and down must be positive integers")
    y = x
    if up > 1:
        stuffed = np.zeros(len(x) * up)
        stuffed[::up] = x.samples
        hi_rate = x.rate * up
        final_rate = x.rate * up / down
        corner = ANTIALIAS_REL_CUTOFF * min(x.rate, final_rate) / 2.0
        cascade = design_butterworth_lowpass(ANTIALIAS_ORDER, corner, hi_rate)
        y = SampledSignal(up * _filtfilt_array(cascade, stuffed), hi_rate)
    if down > 1:
        y = decimate(y, down)
    return y


def resample_to_rate(x: SampledSignal, target_hz: float) -> SampledSignal:
    """Resample to an exact target rate via the reduced rational ratio."""
    ratio = Fraction(target_hz).limit_denominator(10**6) / Fraction(
        x.rate
    ).limit_denominator(10**6)
    return resample_rational(x, ratio.numerator, ratio.denominator)


def speech_envelope(
    audio: SampledSignal, lowpass_hz: float = 8.0, target_rate: float = 64.0
) -> SampledSignal:
    """Envelope extraction chain: Hilbert magnitude, 8 Hz low-pass, resample.

    Third-order low-pass, matching the band-pass order used on the EEG side.
    """
    env = hilbert_envelope(audio)
    cascade = design_butterworth_lowpass(3, lowpass_hz, audio.rate)
    smoothed = filtfilt(cascade, env)
    return resample_to_rate(smoothed, target_rate)
