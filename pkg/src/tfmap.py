"""
Time-frequency map module for jamident.
Turns a received signal into the normalized 3-channel spectrogram image
the classifier consumes.
"""

from dataclasses import dataclass

import numpy as np
from scipy import fft as sp_fft
from scipy import signal as sp_signal

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class StftConfig:
    """Hann-windowed STFT: ``frames`` windows of ``n_fft`` samples every ``hop`` samples."""
    n_fft: int = 40
    hop: int = 40
    frames: int = 40
    channels: int = 3

    def __post_init__(self):
        for name in ("n_fft", "hop", "frames", "channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"StftConfig.{name} must be positive, got {getattr(self, name)}")

    @property
    def window(self):
        return sp_signal.get_window("hann", self.n_fft)

    @property
    def required_length(self):
        return (self.frames - 1) * self.hop + self.n_fft


def stft_power(sig, cfg=StftConfig()):
    """
    Power map |STFT|^2 with frequency on rows and time on columns.

    Rows are fft-shifted so row n_fft // 2 is 0 Hz.

    Args:
        sig: ComplexSignal or 1-D complex array
        cfg: StftConfig

    Returns:
        ndarray (n_fft, frames), nonnegative float64

    Raises:
        ValueError: signal shorter than the configured frames need
    """
    samples = np.asarray(getattr(sig, "samples", sig))
    if samples.ndim != 1 or samples.shape[0] < cfg.required_length:
        raise ValueError(
            f"STFT needs a 1-D signal of at least {cfg.required_length} samples, got shape {samples.shape}")
    index = np.arange(cfg.frames)[:, None] * cfg.hop + np.arange(cfg.n_fft)[None, :]
    spectrum = sp_fft.fft(samples[index] * cfg.window, axis=1)
    power = np.abs(spectrum) ** 2
    return sp_fft.fftshift(power.T, axes=0)


def to_image(power_map, channels=3, bounds=None):
    """
    Log-scale and min-max normalize a power map into a [0, 1] image.

    Args:
        power_map: nonnegative 2-D array
        channels: number of identical channels to stack
        bounds: optional (low, high) in log10 units instead of the map's own
            extremes; values outside are clipped

    Returns:
        float32 ndarray (channels, rows, cols); a constant map gives all 0.5
    """
    power_map = np.asarray(power_map, dtype=np.float64)
    if np.any(power_map < 0) or not np.all(np.isfinite(power_map)):
        raise ValueError("power map must be finite and nonnegative")
    values = np.log10(power_map + LOG_FLOOR)
    low, high = bounds if bounds is not None else (values.min(), values.max())
    if high == low:
        image = np.full(values.shape, 0.5)
    else:
        image = np.clip((values - low) / (high - low), 0.0, 1.0)
    return np.repeat(image[None].astype(np.float32), channels, axis=0)


def spectrogram(sig, cfg=StftConfig()):
    """Signal straight to the classifier's input image."""
    return to_image(stft_power(sig, cfg), cfg.channels)
