"""Synthetic listening scenes with ground truth for desk-scale verification.

A scene holds two speech-like envelopes, a per-sample attention schedule,
and multichannel EEG produced by a seeded forward model: each channel
convolves the gain-weighted envelope mix (plus an optional quadratic
distortion of the attended envelope) with its own random smooth kernel,
then adds white noise. Condition tags map to preset difficulty levels
(leakage gain, noise floor); they mirror acoustic conditions in ordering
only, not in physics.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .dsp import MultichannelSignal, SampledSignal, _filtfilt_array
from .dsp import design_butterworth_bandpass, design_butterworth_lowpass
from .errors import FormatError, ParameterError

__all__ = [
    "SceneConfig",
    "Scene",
    "CONDITION_PRESETS",
    "generate_envelope",
    "generate_scene",
    "save_scene",
    "load_scene",
]

# (unattended leakage gain, channel noise std); ordered easy -> hard.
CONDITION_PRESETS = {
    "anechoic": (0.65, 2.0),
    "reverberant": (0.72, 2.5),
    "anechoic-noisy": (0.76, 3.0),
    "reverberant-noisy": (0.82, 3.8),
}

KERNEL_MAX_DELAY = 10


@dataclass(frozen=True)
class SceneConfig:
    duration_s: float = 120.0
    eeg_rate: float = 64.0
    channel_count: int = 16
    forward_kernel_len: int = 15
    attended_gain: float = 1.0
    unattended_gain: float = 0.3
    noise_std: float = 1.0
    nonlinearity_mix: float = 0.0
    switch_times_s: tuple = ()
    start_speaker: int = 1
    seed: int = 0
    kernel_seed: int | None = None  # listener identity; share across scenes
    condition_tag: str = "anechoic"

    def __post_init__(self):
        if self.duration_s <= 0 or self.eeg_rate <= 0:
            raise ParameterError("duration and rate must be positive")
        if self.channel_count < 1 or self.forward_kernel_len < 1:
            raise ParameterError("channel_count and kernel length must be >= 1")
        if self.attended_gain < 0 or self.unattended_gain < 0 or self.noise_std < 0:
            raise ParameterError("gains and noise_std must be nonnegative")
        if not (0.0 <= self.nonlinearity_mix <= 1.0):
            raise ParameterError("nonlinearity_mix must lie in [0, 1]")
        if self.start_speaker not in (1, 2):
            raise ParameterError("start_speaker must be 1 or 2")
        times = tuple(float(t) for t in self.switch_times_s)
        if any(not 0.0 < t < self.duration_s for t in times) or list(times) != sorted(
            set(times)
        ):
            raise ParameterError(
                "switch times must be strictly increasing within the duration"
            )
        object.__setattr__(self, "switch_times_s", times)

    @classmethod
    def for_condition(cls, tag: str, **overrides) -> "SceneConfig":
        if tag not in CONDITION_PRESETS:
            raise ParameterError(
                f"unknown condition {tag!r}; known: {sorted(CONDITION_PRESETS)}"
            )
        g_un, noise = CONDITION_PRESETS[tag]
        return cls(
            condition_tag=tag, unattended_gain=g_un, noise_std=noise, **overrides
        )


@dataclass(frozen=True)
class Scene:
    e1: SampledSignal
    e2: SampledSignal
    attention: np.ndarray  # per-sample label, 1 or 2
    eeg: MultichannelSignal
    config: SceneConfig

    @property
    def attended_envelope(self) -> SampledSignal:
        samples = np.where(self.attention == 1, self.e1.samples, self.e2.samples)
        return SampledSignal(samples, self.e1.rate)

    @property
    def unattended_envelope(self) -> SampledSignal:
        samples = np.where(self.attention == 1, self.e2.samples, self.e1.samples)
        return SampledSignal(samples, self.e1.rate)


def generate_envelope(duration_s: float, rate: float, seed) -> SampledSignal:
    """Speech-envelope surrogate: rectified 2-8 Hz Gaussian noise, unit RMS.

    The rectified signal is low-pass smoothed at 8 Hz, squared to get
    speech-like burstiness (sparse peaks over near-silence), smoothed
    again and clipped at zero. Spectral mass above 10 Hz stays negligible.
    Very short records (too short to filter) skip the band-limiting.
    """
    n = int(round(duration_s * rate))
    if n < 2:
        raise ParameterError("need duration * rate >= 2")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(n)
    if n > 3 * 6 + 1 and rate > 16.0:
        bp = design_butterworth_bandpass(3, 2.0, 8.0, rate)
        lp = design_butterworth_lowpass(3, 8.0, rate)
        env = np.clip(_filtfilt_array(lp, np.abs(_filtfilt_array(bp, noise))), 0.0, None)
        env = np.clip(_filtfilt_array(lp, env**2), 0.0, None)
    else:
        env = np.abs(noise)
    rms = np.sqrt(np.mean(env**2))
    if rms > 0:
        env = env / rms
    return SampledSignal(env, rate)


def attention_schedule(cfg: SceneConfig) -> np.ndarray:
    n = int(round(cfg.duration_s * cfg.eeg_rate))
    labels = np.full(n, cfg.start_speaker, dtype=int)
    other = 2 if cfg.start_speaker == 1 else 1
    flips = np.zeros(n, dtype=int)
    for t in cfg.switch_times_s:
        flips[int(round(t * cfg.eeg_rate)) :] += 1
    labels[flips % 2 == 1] = other
    return labels


def _forward_kernels(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-channel raised-cosine bumps with random delay (0-10) and sign."""
    bump_len = cfg.forward_kernel_len
    j = np.arange(bump_len)
    bump = 0.5 * (1.0 - np.cos(2.0 * np.pi * (j + 1) / (bump_len + 1)))
    bump /= np.linalg.norm(bump)
    kernels = np.zeros((cfg.channel_count, bump_len + KERNEL_MAX_DELAY))
    delays = rng.integers(0, KERNEL_MAX_DELAY + 1, size=cfg.channel_count)
    signs = rng.choice([-1.0, 1.0], size=cfg.channel_count)
    for c in range(cfg.channel_count):
        kernels[c, delays[c] : delays[c] + bump_len] = signs[c] * bump
    return kernels


def generate_scene(cfg: SceneConfig) -> Scene:
    """Deterministic scene synthesis; all randomness derives from cfg.seed."""
    e1 = generate_envelope(cfg.duration_s, cfg.eeg_rate, [cfg.seed, 1])
    e2 = generate_envelope(cfg.duration_s, cfg.eeg_rate, [cfg.seed, 2])
    labels = attention_schedule(cfg)
    e_att = np.where(labels == 1, e1.samples, e2.samples)
    e_un = np.where(labels == 1, e2.samples, e1.samples)

    drive = cfg.attended_gain * e_att + cfg.unattended_gain * e_un
    if cfg.nonlinearity_mix > 0.0:
        # quadratic distortion of the channel drive, orthogonalized against
        # its linear part so it cannot be absorbed by a linear decoder
        centered = drive - drive.mean()
        quad = drive**2 - np.mean(drive**2)
        quad -= (centered @ quad) / (centered @ centered) * centered
        drive = drive + cfg.nonlinearity_mix * quad

    kseed = cfg.seed if cfg.kernel_seed is None else cfg.kernel_seed
    kernels = _forward_kernels(cfg, np.random.default_rng([kseed, 3]))
    noise_rng = np.random.default_rng([cfg.seed, 4])
    n = len(e1)
    eeg = np.empty((cfg.channel_count, n))
    for c in range(cfg.channel_count):
        eeg[c] = sps.lfilter(kernels[c], [1.0], drive)
    if cfg.noise_std > 0.0:
        eeg += cfg.noise_std * noise_rng.standard_normal(eeg.shape)

    return Scene(
        e1=e1,
        e2=e2,
        attention=labels,
        eeg=MultichannelSignal(eeg, cfg.eeg_rate),
        config=cfg,
    )


# ---------------------------------------------------------------------------
# On-disk scene format: eeg.bin + envelopes.bin (little-endian float64),
# attention.csv, scene.json header. Documented in docs/formats.md.
# ---------------------------------------------------------------------------


def save_scene(scene: Scene, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "eeg.bin").write_bytes(
        np.ascontiguousarray(scene.eeg.data, dtype="<f8").tobytes()
    )
    (directory / "envelopes.bin").write_bytes(
        np.ascontiguousarray(scene.e1.samples, dtype="<f8").tobytes()
        + np.ascontiguousarray(scene.e2.samples, dtype="<f8").tobytes()
    )
    with open(directory / "attention.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "label"])
        for i, lab in enumerate(scene.attention):
            writer.writerow([i, int(lab)])
    header = {
        "format": "aadkit-scene",
        "version": 1,
        "eeg_rate": scene.eeg.rate,
        "channel_count": scene.eeg.channel_count,
        "sample_count": scene.eeg.sample_count,
        "seed": scene.config.seed,
        "condition_tag": scene.config.condition_tag,
        "config": asdict(scene.config),
    }
    (directory / "scene.json").write_text(json.dumps(header, indent=2, sort_keys=True))


def _read_exact(path: Path, expected_bytes: int, what: str) -> bytes:
    raw = path.read_bytes()
    if len(raw) != expected_bytes:
        raise FormatError(
            f"{path.name}: {what} holds {len(raw)} bytes, expected "
            f"{expected_bytes} (short by {expected_bytes - len(raw)})"
        )
    return raw


def load_scene(directory) -> Scene:
    directory = Path(directory)
    header_path = directory / "scene.json"
    try:
        header = json.loads(header_path.read_text())
    except OSError as exc:
        raise FormatError(f"cannot read scene header: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"scene header is not valid JSON: {exc}") from exc
    for key in ("eeg_rate", "channel_count", "sample_count", "config"):
        if key not in header:
            raise FormatError(f"scene header is missing field {key!r}")
    c = int(header["channel_count"])
    n = int(header["sample_count"])
    rate = float(header["eeg_rate"])

    eeg_raw = _read_exact(directory / "eeg.bin", c * n * 8, "EEG matrix")
    eeg = np.frombuffer(eeg_raw, dtype="<f8").reshape(c, n).astype(np.float64)
    env_raw = _read_exact(directory / "envelopes.bin", 2 * n * 8, "envelope pair")
    envs = np.frombuffer(env_raw, dtype="<f8").astype(np.float64)

    with open(directory / "attention.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != n:
        raise FormatError(
            f"attention.csv has {len(rows)} rows, expected {n} (sample_count)"
        )
    labels = np.array([int(r["label"]) for r in rows], dtype=int)
    if not np.isin(labels, (1, 2)).all():
        raise FormatError("attention labels must be 1 or 2")

    cfg_dict = dict(header["config"])
    cfg_dict["switch_times_s"] = tuple(cfg_dict.get("switch_times_s", ()))
    cfg = SceneConfig(**cfg_dict)
    return Scene(
        e1=SampledSignal(envs[:n], rate),
        e2=SampledSignal(envs[n:], rate),
        attention=labels,
        eeg=MultichannelSignal(eeg, rate),
        config=cfg,
    )
