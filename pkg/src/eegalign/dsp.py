"""Signal preprocessing: Butterworth highpass, notch, resampling, CAR.

Filters are realised as cascades of second-order sections and applied
causally along the last axis, identically and independently per channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal as sps

DEFAULT_HIGHPASS_ORDER = 4
DEFAULT_NOTCH_Q = 30.0
KAISER_BETA = 8.0
TAPS_PER_PHASE = 64


class DataError(ValueError):
    """Input samples are unusable (empty, NaN, ...)."""


@dataclass
class BiquadCascade:
    """Second-order sections ``(b0, b1, b2, a1, a2)`` with ``a0 = 1``."""

    sections: list[tuple[float, float, float, float, float]]
    kind: str = "custom"
    cutoff_hz: float | None = None
    order: int | None = None
    fs: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for sec in self.sections:
            if len(sec) != 5 or not np.all(np.isfinite(sec)):
                raise ValueError(f"bad biquad section {sec}")
            roots = np.roots([1.0, sec[3], sec[4]])
            if np.any(np.abs(roots) >= 1.0):
                raise ValueError(f"unstable section {sec}: poles {roots}")

    def sos(self) -> np.ndarray:
        """Sections in scipy's ``[b0, b1, b2, 1, a1, a2]`` row layout."""
        return np.array([[b0, b1, b2, 1.0, a1, a2] for b0, b1, b2, a1, a2 in self.sections])

    def response(self, freqs_hz, fs: float | None = None) -> np.ndarray:
        """Complex frequency response at ``freqs_hz``."""
        fs = fs or self.fs
        z = np.exp(1j * 2 * np.pi * np.asarray(freqs_hz, dtype=float) / fs)
        zi = 1.0 / z
        h = np.ones_like(z)
        for b0, b1, b2, a1, a2 in self.sections:
            h = h * (b0 + b1 * zi + b2 * zi**2) / (1.0 + a1 * zi + a2 * zi**2)
        return h


def _check_band(freq: float, fs: float, what: str) -> None:
    if fs <= 0:
        raise ValueError(f"sample rate must be positive, got {fs}")
    if not 0 < freq < fs / 2:
        raise ValueError(f"{what} {freq} Hz must lie in (0, Nyquist={fs / 2} Hz)")


def design_butter_highpass(order: int, cutoff_hz: float, fs: float) -> BiquadCascade:
    """Digital Butterworth highpass via the prewarped bilinear transform."""
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    _check_band(cutoff_hz, fs, "cutoff")
    wc = 2 * fs * np.tan(np.pi * cutoff_hz / fs)
    k = np.arange(1, order + 1)
    lp_poles = np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))
    hp_poles = wc / lp_poles
    zp = (2 * fs + hp_poles) / (2 * fs - hp_poles)

    sections = []
    upper = sorted((p for p in zp if p.imag > 1e-12), key=lambda p: -abs(p))
    for p in upper:
        a1, a2 = -2 * p.real, abs(p) ** 2
        gain = (1 - a1 + a2) / 4.0  # unit gain at Nyquist
        sections.append((gain, -2 * gain, gain, a1, a2))
    if order % 2:
        p = min(zp, key=lambda q: abs(q.imag)).real
        gain = (1 + p) / 2.0
        sections.append((gain, -gain, 0.0, -p, 0.0))
    return BiquadCascade(sections, kind="butter_highpass", cutoff_hz=cutoff_hz, order=order, fs=fs)


def design_notch(f0_hz: float, q: float, fs: float) -> BiquadCascade:
    """Second-order IIR notch with zeros on the unit circle at ``f0_hz``."""
    if q <= 0:
        raise ValueError(f"quality factor must be positive, got {q}")
    _check_band(f0_hz, fs, "notch frequency")
    w0 = 2 * np.pi * f0_hz / fs
    beta = np.tan(w0 / q / 2)
    gain = 1.0 / (1.0 + beta)
    c = np.cos(w0)
    section = (gain, -2 * gain * c, gain, -2 * gain * c, 2 * gain - 1)
    return BiquadCascade([section], kind="notch", cutoff_hz=f0_hz, order=2, fs=fs, meta={"q": q})


def filt(cascade: BiquadCascade, x) -> np.ndarray:
    """Causal cascade filtering along the last axis (zero initial state)."""
    x = np.asarray(x, dtype=np.float64)
    bad = np.flatnonzero(np.isnan(x.reshape(-1)))
    if bad.size:
        idx = np.unravel_index(bad[0], x.shape)
        raise DataError(f"NaN in signal at sample index {idx[-1] if x.ndim == 1 else idx}")
    if not cascade.sections or x.size == 0:
        return x.copy()
    return sps.sosfilt(cascade.sos(), x, axis=-1)


def _ratio(fs_in: float, fs_out: float) -> tuple[int, int]:
    r = (Fraction(fs_out).limit_denominator(10**6) / Fraction(fs_in).limit_denominator(10**6))
    r = r.limit_denominator(1000)
    return r.numerator, r.denominator


def resample_filter(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc lowpass for rational resampling, odd length, gain ``up``."""
    half = (TAPS_PER_PHASE // 2) * max(up, down)
    n = np.arange(-half, half + 1)
    cutoff = 0.5 / max(up, down)
    h = 2 * cutoff * np.sinc(2 * cutoff * n) * np.kaiser(2 * half + 1, KAISER_BETA)
    return up * h / h.sum()


def resample(x, fs_in: float, fs_out: float) -> np.ndarray:
    """Polyphase rational resampling along the last axis.

    Output length is ``round(n * fs_out / fs_in)``; the filter delay is
    compensated so sample 0 stays aligned.
    """
    if fs_in <= 0 or fs_out <= 0:
        raise ValueError(f"sample rates must be positive, got {fs_in} -> {fs_out}")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n == 0:
        raise DataError("cannot resample an empty signal")
    if fs_in == fs_out:
        return x.copy()
    up, down = _ratio(fs_in, fs_out)
    n_out = int(round(n * fs_out / fs_in))
    h = resample_filter(up, down)
    delay = (h.size - 1) // 2
    pre = (-delay) % down
    h = np.concatenate([np.zeros(pre), h])
    skip = (delay + pre) // down
    # zero tail so every requested output sample is covered
    need = ((n_out + skip) * down) // up + 2
    if need > n:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (need - n,))], axis=-1)
    y = sps.upfirdn(h, x, up, down, axis=-1)
    return y[..., skip: skip + n_out]


def common_average_reference(trial) -> np.ndarray:
    """Subtract the across-channel mean at every time point. ``trial``: [..., C, T]."""
    trial = np.asarray(trial, dtype=np.float64)
    if trial.ndim < 2 or trial.shape[-2] < 2:
        raise ValueError(f"common average reference needs >= 2 channels, got shape {trial.shape}")
    return trial - trial.mean(axis=-2, keepdims=True)


@dataclass
class PreprocessChain:
    """The fixed-order chain: channels, resample, highpass, notches, CAR.

    A stage set to ``None`` (or ``car=False``) is skipped.
    """

    channels: list[str] | None = None
    resample_hz: float | None = 160.0
    highpass_hz: float | None = 2.0
    highpass_order: int = DEFAULT_HIGHPASS_ORDER
    notch_hz: tuple[float, ...] = (50.0, 60.0)
    notch_q: float = DEFAULT_NOTCH_Q
    car: bool = True

    def describe(self) -> list[str]:
        steps = []
        if self.channels is not None:
            steps.append(f"select_channels({len(self.channels)})")
        if self.resample_hz:
            steps.append(f"resample({self.resample_hz:g} Hz)")
        if self.highpass_hz:
            steps.append(f"butter_highpass(order={self.highpass_order}, {self.highpass_hz:g} Hz)")
        for f0 in self.notch_hz:
            steps.append(f"notch({f0:g} Hz, Q={self.notch_q:g})")
        if self.car:
            steps.append("common_average_reference")
        return steps


def preprocess(trials, chain: PreprocessChain):
    """Apply ``chain`` to a TrialSet and return a new TrialSet."""
    from .data import select_channels

    out = trials
    if chain.channels is not None:
        out = select_channels(out, chain.channels)
    data = out.data
    fs = out.fs_hz
    if chain.resample_hz and chain.resample_hz != fs:
        data = resample(data, fs, chain.resample_hz)
        fs = float(chain.resample_hz)
    if chain.highpass_hz:
        data = filt(design_butter_highpass(chain.highpass_order, chain.highpass_hz, fs), data)
    for f0 in chain.notch_hz:
        data = filt(design_notch(f0, chain.notch_q, fs), data)
    if chain.car:
        data = common_average_reference(data)
    return out.replace(data=data, fs_hz=fs)
