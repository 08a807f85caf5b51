"""
Signal generation module for jamident.
Synthesizes the eight jamming waveforms and the OFDM communication signal,
passes them through fading channels and mixes them at a target ISNR.

All functions are pure in their inputs and the numpy Generator they get.
"""

import logging
import math
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Optional, Tuple

import numpy as np
from scipy import fft as sp_fft

logger = logging.getLogger(__name__)

SAMPLE_RATE_HZ = 100e6
SIGNAL_LENGTH = 1600
COMM_SNR_DB = 10.0


class JammingType(IntEnum):
    """Jamming families; the integer value is the class label."""
    CW = 0
    LFM = 1
    AM = 2
    TFM = 3
    BPSK = 4
    NAM = 5
    QFM = 6
    SFM = 7


FM_TYPES = frozenset({JammingType.LFM, JammingType.TFM, JammingType.QFM, JammingType.SFM})
NARROWBAND_TYPES = frozenset({JammingType.AM, JammingType.NAM, JammingType.BPSK})

CARRIER_RANGE_HZ = (-25e6, 25e6)
FM_BANDWIDTH_RANGE_HZ = (10e6, 50e6)
NARROW_BANDWIDTH_RANGE_HZ = (1.5e6, 5e6)
PERIOD_RANGE_S = (1e-5, 1e-4)
# Every jamming type, BPSK included, shares the dataset ISNR axis.
ISNR_RANGE_DB = (-14.0, 8.0)


@dataclass(frozen=True)
class JammingParams:
    """Randomized parameters of one jamming waveform."""
    type: JammingType
    carrier_hz: float
    isnr_db: float
    init_phase_rad: float
    bandwidth_hz: Optional[float] = None
    period_s: Optional[float] = None
    waveform_seed: int = 0


@dataclass(frozen=True)
class OfdmConfig:
    subcarrier_spacing_hz: float = 15e3
    num_subcarriers: int = 1200
    center_hz: float = 0.0
    seed: int = 0
    init_phase_rad: float = 0.0

    @property
    def occupied_bandwidth_hz(self):
        return self.subcarrier_spacing_hz * self.num_subcarriers


@dataclass(frozen=True)
class ChannelConfig:
    rician_k_db: float = 15.0
    rayleigh_delays_s: Tuple[float, ...] = (0.0, 1e-7, 2e-7, 3e-7, 4e-7, 5e-7)
    rayleigh_gains_db: Tuple[float, ...] = (0.0, -4.0, -8.0, -12.0, -16.0, -20.0)
    seed: int = 0


@dataclass(frozen=True)
class ComplexSignal:
    """Sampled complex-baseband IQ sequence."""
    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.complex128)
        if samples.ndim != 1:
            raise ValueError(f"signal must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("signal contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def power(self):
        return float(np.mean(np.abs(self.samples) ** 2)) if self.n else 0.0


def sample_params(jamming_type, rng):
    """
    Draw every parameter of ``jamming_type`` uniformly from its range.

    Args:
        jamming_type: JammingType (or its integer label)
        rng: numpy Generator

    Returns:
        JammingParams; bandwidth and period stay None where they do not apply
    """
    jamming_type = JammingType(jamming_type)
    carrier = rng.uniform(*CARRIER_RANGE_HZ)
    isnr = rng.uniform(*ISNR_RANGE_DB)
    phase = rng.uniform(0.0, 2 * np.pi)
    bandwidth = period = None
    if jamming_type in FM_TYPES:
        bandwidth = rng.uniform(*FM_BANDWIDTH_RANGE_HZ)
        period = rng.uniform(*PERIOD_RANGE_S)
    elif jamming_type in NARROWBAND_TYPES:
        bandwidth = rng.uniform(*NARROW_BANDWIDTH_RANGE_HZ)
    seed = int(rng.integers(0, 2 ** 31 - 1))
    return JammingParams(jamming_type, float(carrier), float(isnr), float(phase),
                         None if bandwidth is None else float(bandwidth),
                         None if period is None else float(period), seed)


def _phase_from_frequency(freq, fs, init_phase):
    # phase[n] = phi + 2*pi/fs * sum_{m<n} f[m]
    steps = np.concatenate(([0.0], np.cumsum(freq[:-1])))
    return init_phase + 2 * np.pi * steps / fs


def _lowpass(values, cutoff_hz, fs):
    """Brick-wall low-pass of a real sequence via the real FFT."""
    spectrum = sp_fft.rfft(values)
    spectrum[sp_fft.rfftfreq(values.shape[0], 1.0 / fs) > cutoff_hz] = 0
    return sp_fft.irfft(spectrum, n=values.shape[0])


def synth_jamming(params, n_samples=SIGNAL_LENGTH, fs=SAMPLE_RATE_HZ):
    """
    Synthesize a unit-power jamming waveform.

    Args:
        params: JammingParams
        n_samples: number of samples
        fs: sample rate in Hz

    Returns:
        ComplexSignal with mean |s|^2 = 1

    Raises:
        ValueError: non-positive length, or carrier plus half bandwidth beyond fs/2
    """
    if n_samples <= 0:
        raise ValueError(f"n_samples must be positive, got {n_samples}")
    jamming_type = JammingType(params.type)
    half_band = (params.bandwidth_hz or 0.0) / 2
    if abs(params.carrier_hz) + half_band > fs / 2:
        raise ValueError(
            f"{jamming_type.name}: carrier {params.carrier_hz / 1e6:.3f} MHz with bandwidth "
            f"{2 * half_band / 1e6:.3f} MHz aliases at fs = {fs / 1e6:.3f} MHz")
    if jamming_type in FM_TYPES and not params.period_s:
        raise ValueError(f"{jamming_type.name} needs a modulation period")

    t = np.arange(n_samples) / fs
    fc, phi, bw = params.carrier_hz, params.init_phase_rad, params.bandwidth_hz
    carrier = np.exp(1j * (2 * np.pi * fc * t + phi))

    if jamming_type == JammingType.CW:
        samples = carrier
    elif jamming_type in (JammingType.LFM, JammingType.TFM, JammingType.QFM):
        u = np.mod(t / params.period_s, 1.0)
        if jamming_type == JammingType.LFM:
            profile = u
        elif jamming_type == JammingType.TFM:
            profile = 1.0 - np.abs(2.0 * u - 1.0)
        else:
            profile = u ** 2
        freq = fc - bw / 2 + bw * profile
        samples = np.exp(1j * _phase_from_frequency(freq, fs, phi))
    elif jamming_type == JammingType.SFM:
        fm = 1.0 / params.period_s
        samples = np.exp(1j * (2 * np.pi * fc * t + bw / (2 * fm) * np.sin(2 * np.pi * fm * t) + phi))
    elif jamming_type == JammingType.AM:
        fm = bw / 2
        samples = (1.0 + 0.5 * np.cos(2 * np.pi * fm * t)) * carrier
    elif jamming_type == JammingType.NAM:
        rng = np.random.default_rng(params.waveform_seed)
        noise = _lowpass(rng.standard_normal(n_samples), bw / 2, fs)
        noise /= noise.std() or 1.0
        samples = (1.0 + noise) * carrier
    else:
        # BPSK: +-1 chips at chip rate = bandwidth, band-limited to +-B/2
        rng = np.random.default_rng(params.waveform_seed)
        n_chips = int(math.ceil(n_samples * bw / fs)) + 1
        chips = rng.choice(np.array([-1.0, 1.0]), size=n_chips)
        baseband = _lowpass(chips[np.floor(t * bw).astype(np.int64)], bw / 2, fs)
        samples = baseband * carrier

    power = np.mean(np.abs(samples) ** 2)
    return ComplexSignal(samples / np.sqrt(power), fs)


def ofdm_symbol_length(cfg, fs=SAMPLE_RATE_HZ):
    return int(round(fs / cfg.subcarrier_spacing_hz))


def synth_ofdm(cfg, n_samples=SIGNAL_LENGTH, fs=SAMPLE_RATE_HZ):
    """
    Synthesize a unit-power QPSK-OFDM signal.

    Subcarriers sit symmetric about ``center_hz`` with the DC bin left
    empty; one symbol is one inverse DFT of round(fs / spacing) points.
    """
    if fs <= cfg.occupied_bandwidth_hz:
        raise ValueError(
            f"fs = {fs / 1e6:.3f} MHz does not cover the {cfg.occupied_bandwidth_hz / 1e6:.3f} MHz OFDM band")
    symbol_len = ofdm_symbol_length(cfg, fs)
    lower = cfg.num_subcarriers // 2
    upper = cfg.num_subcarriers - lower
    offset = int(round(cfg.center_hz / cfg.subcarrier_spacing_hz))
    bins = np.concatenate((np.arange(-lower, 0), np.arange(1, upper + 1))) + offset
    n_symbols = int(math.ceil(n_samples / symbol_len))

    rng = np.random.default_rng(cfg.seed)
    bits = rng.integers(0, 2, size=(n_symbols, cfg.num_subcarriers, 2))
    qpsk = ((2 * bits[..., 0] - 1) + 1j * (2 * bits[..., 1] - 1)) / np.sqrt(2)
    grid = np.zeros((n_symbols, symbol_len), dtype=np.complex128)
    grid[:, np.mod(bins, symbol_len)] = qpsk
    samples = sp_fft.ifft(grid, axis=1).reshape(-1)[:n_samples]
    samples = samples / np.sqrt(np.mean(np.abs(samples) ** 2))
    return ComplexSignal(samples * np.exp(1j * cfg.init_phase_rad), fs)


def draw_rician_gains(k_db, rng, size=None):
    """Complex gains with LOS/scatter power ratio 10^(k_db/10) and E|g|^2 = 1."""
    if not np.isfinite(k_db):
        raise ValueError(f"Rice factor must be finite, got {k_db}")
    k = 10.0 ** (k_db / 10.0)
    los = np.sqrt(k / (k + 1)) * np.exp(1j * rng.uniform(0.0, 2 * np.pi, size))
    scatter = np.sqrt(1 / (k + 1)) * (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2)
    return los + scatter


def apply_rician(sig, k_db, rng):
    """Single-path Rice channel: one complex gain for the whole realization."""
    return ComplexSignal(sig.samples * draw_rician_gains(k_db, rng), sig.sample_rate_hz)


def tap_offsets(channel, fs):
    return np.rint(np.asarray(channel.rayleigh_delays_s) * fs).astype(np.int64)


def draw_rayleigh_taps(channel, rng):
    """Complex Gaussian taps whose powers follow the normalized delay profile."""
    powers = 10.0 ** (np.asarray(channel.rayleigh_gains_db, dtype=float) / 10.0)
    powers /= powers.sum()
    noise = rng.standard_normal(powers.shape) + 1j * rng.standard_normal(powers.shape)
    return np.sqrt(powers / 2) * noise


def apply_rayleigh_multipath(sig, channel, rng):
    """Tapped-delay-line Rayleigh channel, taps drawn once per realization."""
    offsets = tap_offsets(channel, sig.sample_rate_hz)
    if offsets.size and offsets.max() >= sig.n:
        raise ValueError(f"largest delay of {offsets.max()} samples exceeds the {sig.n}-sample signal")
    taps = draw_rayleigh_taps(channel, rng)
    out = np.zeros(sig.n, dtype=np.complex128)
    for tap, delay in zip(taps, offsets):
        out[delay:] += tap * sig.samples[:sig.n - delay]
    return ComplexSignal(out, sig.sample_rate_hz)


def mix_components(jam, comm, isnr_db, snr_db, rng):
    """
    Scale the jamming term and draw the noise term of the received signal.

    Returns:
        Tuple (scaled jamming, communication, noise) sample arrays where
        P_jam / (P_comm + P_noise) equals 10^(isnr_db/10) on this realization
    """
    if jam.n != comm.n or jam.sample_rate_hz != comm.sample_rate_hz:
        raise ValueError(
            f"jamming ({jam.n} @ {jam.sample_rate_hz} Hz) and communication "
            f"({comm.n} @ {comm.sample_rate_hz} Hz) signals differ")
    p_jam, p_comm = jam.power, comm.power
    if p_jam == 0 or p_comm == 0:
        raise ValueError(f"cannot mix zero-power input (P_jam = {p_jam}, P_comm = {p_comm})")
    noise_power = p_comm / 10.0 ** (snr_db / 10.0)
    noise = np.sqrt(noise_power / 2) * (rng.standard_normal(comm.n) + 1j * rng.standard_normal(comm.n))
    p_noise = float(np.mean(np.abs(noise) ** 2))
    alpha = np.sqrt(10.0 ** (isnr_db / 10.0) * (p_comm + p_noise) / p_jam)
    return alpha * jam.samples, comm.samples, noise


def mix_at_isnr(jam, comm, isnr_db, snr_db=COMM_SNR_DB, rng=None):
    """Received signal J = alpha * jam + comm + n at the requested ISNR."""
    rng = rng if rng is not None else np.random.default_rng()
    scaled, comm_samples, noise = mix_components(jam, comm, isnr_db, snr_db, rng)
    logger.debug("mixed at %.1f dB ISNR, measured %.4f dB", isnr_db, measured_isnr_db(scaled, comm_samples, noise))
    return ComplexSignal(scaled + comm_samples + noise, jam.sample_rate_hz)


def measured_isnr_db(scaled_jam, comm, noise):
    p = lambda x: np.mean(np.abs(x) ** 2)  # noqa: E731
    return 10.0 * np.log10(p(scaled_jam) / (p(comm) + p(noise)))


def received_signal(jamming_type, isnr_db, rng, channel=ChannelConfig(), ofdm=OfdmConfig(),
                    n_samples=SIGNAL_LENGTH, fs=SAMPLE_RATE_HZ, snr_db=COMM_SNR_DB):
    """
    Full reception chain for one dataset example.

    Draws jamming parameters (the ISNR axis value overrides the drawn one),
    passes the jammer through the Rice channel and the OFDM signal through
    the Rayleigh channel, and mixes them with AWGN.
    """
    params = sample_params(jamming_type, rng)
    params = JammingParams(params.type, params.carrier_hz, float(isnr_db), params.init_phase_rad,
                           params.bandwidth_hz, params.period_s, params.waveform_seed)
    jam = apply_rician(synth_jamming(params, n_samples, fs), channel.rician_k_db, rng)
    ofdm = replace(ofdm, seed=int(rng.integers(0, 2 ** 31 - 1)), init_phase_rad=float(rng.uniform(0.0, 2 * np.pi)))
    comm = apply_rayleigh_multipath(synth_ofdm(ofdm, n_samples, fs), channel, rng)
    logger.debug("synthesized %s at %.1f dB ISNR (fc = %.2f MHz)", params.type.name, isnr_db, params.carrier_hz / 1e6)
    return mix_at_isnr(jam, comm, isnr_db, snr_db, rng), params
