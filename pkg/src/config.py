"""
Configuration management module for jamident.
Handles loading config.ini, the desk/paper scale presets and building the
typed settings objects of every module.
"""

import configparser
import copy
import os

from rich.console import Console

from .attack import PIXEL_LEVELS
from .diffnet import ModelConfig
from .harness import DatasetConfig
from .siggen import ChannelConfig, OfdmConfig
from .tfmap import StftConfig
from .training import ConsistencyConfig, MaskEnsembleConfig, MaskStrategy, TrainConfig

console = Console()

THREADS_ENV = "JAMIDENT_THREADS"


class ConfigError(ValueError):
    """Raised for configuration values that do not parse or are out of range."""


SCALE_PRESETS = {
    "desk": {
        "Dataset": {"isnr_grid_db": "-14,-8,0,8", "samples_per_type_per_isnr": 100},
        "Training": {"epochs": 15},
    },
    "paper": {
        "Dataset": {"isnr_grid_db": ",".join(str(v) for v in range(-14, 9, 2)), "samples_per_type_per_isnr": 400},
        "Training": {"epochs": 50},
    },
}


class Config:
    """Configuration manager for the application."""

    DEFAULT_SETTINGS = {
        "Signal": {"sample_rate_hz": 100e6, "n_samples": 1600, "comm_snr_db": 10.0},
        "Ofdm": {"subcarrier_spacing_hz": 15e3, "num_subcarriers": 1200},
        "Channel": {
            "rician_k_db": 15.0,
            "rayleigh_delays_s": "0,1e-7,2e-7,3e-7,4e-7,5e-7",
            "rayleigh_gains_db": "0,-4,-8,-12,-16,-20",
        },
        "Stft": {"n_fft": 40, "hop": 40, "frames": 40},
        "Dataset": {
            "isnr_grid_db": "-14,-8,0,8",
            "samples_per_type_per_isnr": 100,
            "test_fraction": 0.25,
            "seed": 2024,
        },
        "Model": {"channels": 32, "heads": 4, "blocks": 2, "lam": 0.8, "expand": 2, "seed": 0},
        "Training": {"epochs": 15, "lr": 0.001, "batch_size": 32, "seed": 7, "queue_size": 4, "reduction": "sum"},
        "Masking": {"branches": 4, "mask_rate": 0.3, "mode": "continuous", "noise_std": 0.1, "seed": 11},
        "Consistency": {
            "beta_features": 0.2,
            "beta_probs": 0.2,
            "mask_rate": 0.3,
            "mode": "continuous",
            "noise_std": 0.1,
            "ce_on_both": False,
        },
        "Attack": {"epsilons": "3,6,8,14", "batch_size": 128},
        "Flops": {"band_low": 1.0e6, "band_high": 2.6e6},
        "Runtime": {"workers": 4},
    }

    def __init__(self, config_file="config.ini"):
        """
        Initialize configuration manager.

        Args:
            config_file: Path to configuration file; relative names that do
                not exist are looked up next to this module
        """
        self.config_file = config_file
        self.settings = self._load()
        self.validate()

    def _resolve_path(self):
        if os.path.isabs(self.config_file) or os.path.exists(self.config_file):
            return self.config_file
        return os.path.join(os.path.dirname(__file__), self.config_file)

    def _load(self):
        """
        Loads configuration from the ini file.

        Returns:
            Nested dictionary section -> key -> typed value; keys missing
            from the file keep their defaults
        """
        settings = copy.deepcopy(self.DEFAULT_SETTINGS)
        config_path = self._resolve_path()
        if not os.path.exists(config_path):
            return settings
        parser = configparser.ConfigParser()
        try:
            parser.read(config_path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(f"cannot parse {config_path}: {e}") from e
        for section, defaults in settings.items():
            if not parser.has_section(section):
                continue
            for key, default in defaults.items():
                if parser.has_option(section, key):
                    defaults[key] = self._parse(parser, section, key, default)
        return settings

    @staticmethod
    def _parse(parser, section, key, default):
        try:
            if isinstance(default, bool):
                return parser.getboolean(section, key)
            if isinstance(default, int):
                return parser.getint(section, key)
            if isinstance(default, float):
                return parser.getfloat(section, key)
            return parser.get(section, key).strip()
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: {e}") from e

    def validate(self):
        """
        Check ranges and list syntax of every setting.

        Raises:
            ConfigError: first offending value, named with its section
        """
        s = self.settings
        positive = [
            ("Signal", "sample_rate_hz"), ("Signal", "n_samples"), ("Ofdm", "subcarrier_spacing_hz"),
            ("Ofdm", "num_subcarriers"), ("Stft", "n_fft"), ("Stft", "hop"), ("Stft", "frames"),
            ("Dataset", "samples_per_type_per_isnr"), ("Model", "channels"), ("Model", "heads"),
            ("Model", "blocks"), ("Model", "expand"), ("Training", "epochs"), ("Training", "lr"),
            ("Training", "batch_size"), ("Training", "queue_size"), ("Masking", "branches"),
            ("Attack", "batch_size"), ("Runtime", "workers"),
        ]
        for section, key in positive:
            if not s[section][key] > 0:
                raise ConfigError(f"[{section}] {key} must be positive, got {s[section][key]}")
        for section in ("Masking", "Consistency"):
            if not 0 < s[section]["mask_rate"] < 1:
                raise ConfigError(f"[{section}] mask_rate must lie in (0, 1), got {s[section]['mask_rate']}")
            if s[section]["mode"] not in ("continuous", "discrete"):
                raise ConfigError(f"[{section}] mode must be continuous or discrete, got {s[section]['mode']!r}")
            if s[section]["noise_std"] < 0:
                raise ConfigError(f"[{section}] noise_std must be nonnegative, got {s[section]['noise_std']}")
        for key in ("beta_features", "beta_probs"):
            if s["Consistency"][key] < 0:
                raise ConfigError(f"[Consistency] {key} must be nonnegative, got {s['Consistency'][key]}")
        if s["Training"]["reduction"] not in ("sum", "mean"):
            raise ConfigError(f"[Training] reduction must be sum or mean, got {s['Training']['reduction']!r}")
        if not 0 < s["Dataset"]["test_fraction"] < 1:
            raise ConfigError(f"[Dataset] test_fraction must lie in (0, 1), got {s['Dataset']['test_fraction']}")
        if not 0 <= s["Model"]["lam"] <= 1:
            raise ConfigError(f"[Model] lam must lie in [0, 1], got {s['Model']['lam']}")
        if not s["Flops"]["band_low"] < s["Flops"]["band_high"]:
            raise ConfigError(f"[Flops] band_low must be below band_high, got {s['Flops']['band_low']} "
                              f"and {s['Flops']['band_high']}")
        if s["Stft"]["n_fft"] != s["Stft"]["frames"]:
            raise ConfigError(f"[Stft] n_fft ({s['Stft']['n_fft']}) and frames ({s['Stft']['frames']}) "
                              "must match for square images")
        parse_float_list(s["Dataset"]["isnr_grid_db"], "[Dataset] isnr_grid_db")
        parse_eps_list(s["Attack"]["epsilons"])
        delays = parse_float_list(s["Channel"]["rayleigh_delays_s"], "[Channel] rayleigh_delays_s")
        gains = parse_float_list(s["Channel"]["rayleigh_gains_db"], "[Channel] rayleigh_gains_db")
        if len(delays) != len(gains):
            raise ConfigError(f"[Channel] {len(delays)} delays but {len(gains)} gains")

    def get(self, key, default=None):
        """Get configuration section by name."""
        return self.settings.get(key, default)

    def __getitem__(self, key):
        """Allow dictionary-style access."""
        return self.settings[key]

    def __contains__(self, key):
        """Support 'in' operator."""
        return key in self.settings

    def set(self, section, key, value):
        """Override one setting (command-line flags)."""
        if section not in self.settings or key not in self.settings[section]:
            raise ConfigError(f"unknown setting [{section}] {key}")
        self.settings[section][key] = value

    def apply_scale(self, scale):
        """Apply the 'desk' or 'paper' preset for dataset size and epochs."""
        if scale not in SCALE_PRESETS:
            raise ConfigError(f"unknown scale {scale!r}; choose desk or paper")
        for section, values in SCALE_PRESETS[scale].items():
            self.settings[section].update(values)

    # typed builders

    def channel_config(self):
        c = self.settings["Channel"]
        return ChannelConfig(
            rician_k_db=c["rician_k_db"],
            rayleigh_delays_s=tuple(parse_float_list(c["rayleigh_delays_s"], "[Channel] rayleigh_delays_s")),
            rayleigh_gains_db=tuple(parse_float_list(c["rayleigh_gains_db"], "[Channel] rayleigh_gains_db")),
        )

    def ofdm_config(self, seed=0):
        o = self.settings["Ofdm"]
        return OfdmConfig(subcarrier_spacing_hz=o["subcarrier_spacing_hz"], num_subcarriers=o["num_subcarriers"],
                          seed=seed)

    def stft_config(self):
        s = self.settings["Stft"]
        return StftConfig(n_fft=s["n_fft"], hop=s["hop"], frames=s["frames"])

    def dataset_config(self):
        d, sig = self.settings["Dataset"], self.settings["Signal"]
        return DatasetConfig(
            isnr_grid_db=tuple(parse_float_list(d["isnr_grid_db"], "[Dataset] isnr_grid_db")),
            samples_per_type_per_isnr=d["samples_per_type_per_isnr"],
            test_fraction=d["test_fraction"],
            seed=d["seed"],
            sample_rate_hz=sig["sample_rate_hz"],
            n_samples=sig["n_samples"],
            snr_db=sig["comm_snr_db"],
            channel=self.channel_config(),
            ofdm=self.ofdm_config(),
            stft=self.stft_config(),
        )

    def model_config(self):
        m = self.settings["Model"]
        try:
            return ModelConfig(channels=m["channels"], heads=m["heads"], blocks=m["blocks"], lam=m["lam"],
                               expand=m["expand"], image_size=self.settings["Stft"]["n_fft"])
        except ValueError as e:
            raise ConfigError(f"[Model] {e}") from e

    def train_config(self):
        t = self.settings["Training"]
        return TrainConfig(epochs=t["epochs"], lr=t["lr"], batch_size=t["batch_size"], seed=t["seed"],
                           queue_size=t["queue_size"], reduction=t["reduction"])

    def _strategy(self, section):
        s = self.settings[section]
        try:
            return MaskStrategy(mode=s["mode"], mask_rate=s["mask_rate"],
                                num_patches=self.model_config().num_patches)
        except ValueError as e:
            raise ConfigError(f"[{section}] {e}") from e

    def mask_ensemble_config(self):
        m = self.settings["Masking"]
        return MaskEnsembleConfig(branches=m["branches"], strategy=self._strategy("Masking"),
                                  noise_std=m["noise_std"], seed=m["seed"])

    def consistency_config(self):
        c = self.settings["Consistency"]
        return ConsistencyConfig(beta_features=c["beta_features"], beta_probs=c["beta_probs"],
                                 strategy=self._strategy("Consistency"), noise_std=c["noise_std"],
                                 ce_on_both=c["ce_on_both"])

    def attack_epsilons(self):
        return parse_eps_list(self.settings["Attack"]["epsilons"])

    def flops_band(self):
        return self.settings["Flops"]["band_low"], self.settings["Flops"]["band_high"]


def parse_float_list(text, what="value list"):
    """
    Parse a comma-separated list of numbers.

    Blank items and anything after '#' are skipped.

    Raises:
        ConfigError: an item is not a number or the list is empty
    """
    values = []
    for item in str(text).split("#", 1)[0].split(","):
        item = item.strip()
        if not item:
            continue
        try:
            values.append(float(item))
        except ValueError:
            raise ConfigError(f"{what}: {item!r} is not a number") from None
    if not values:
        raise ConfigError(f"{what} is empty")
    return values


def parse_eps_list(text):
    """
    Parse attack budgets given in pixel levels: "3,6,8,14" -> [3/255, ...].

    Raises:
        ConfigError: malformed or negative level
    """
    levels = parse_float_list(text, "epsilon list")
    if any(level < 0 for level in levels):
        raise ConfigError(f"epsilon levels must be nonnegative, got {levels}")
    return [level / PIXEL_LEVELS for level in levels]


def resolve_workers(configured):
    """
    Worker count capped by the JAMIDENT_THREADS environment variable.

    Invalid values of the variable are ignored with a warning.
    """
    workers = max(1, int(configured))
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return workers
    try:
        cap = int(raw)
    except ValueError:
        console.print(f"[yellow]⚠️  Ignoring {THREADS_ENV}={raw!r}: not an integer[/yellow]")
        return workers
    if cap < 1:
        console.print(f"[yellow]⚠️  Ignoring {THREADS_ENV}={raw!r}: must be at least 1[/yellow]")
        return workers
    return min(workers, cap)
