"""Plain-text pipeline configuration (``key = value`` under ``[sections]``)."""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields

from .sde import T_END
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class SimSection:
    scale: str = "desk"
    snapshot_stride: int = 100
    # empty means "use the subset default"
    n_grid: str = ""
    dt: str = ""
    n_steps: str = ""
    n_spinup: str = ""
    drag: str = ""
    hyperdiffusivity: str = ""
    gamma: str = ""
    evaporation: str = ""
    tau: str = ""
    forcing_wavenumber: str = ""
    forcing_bandwidth: str = ""
    energy_input: str = ""
    modulation_amplitude: str = ""
    modulation_wavenumber: str = ""

    _INTS = ("n_grid", "n_steps", "n_spinup", "modulation_wavenumber")

    def overrides(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name in ("scale", "snapshot_stride"):
                continue
            v = getattr(self, f.name)
            if v != "":
                out[f.name] = int(v) if f.name in self._INTS else float(v)
        return out


@dataclass
class ScheduleSection:
    sigma_min: float = 0.01
    sigma_max: float = 10.0


@dataclass
class TrainSection:
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    warmup_steps: int = 5000
    batch_size: int = 4
    epochs: int = 125
    dropout: float = 0.5
    val_fraction: float = 0.1
    max_steps: int = 0
    base_width: int = 32
    n_res_blocks: int = 8
    embed_dim: int = 128
    fourier_scale: float = 30.0
    bypass_width: int = 64
    padding_mode: str = "zeros"

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            grad_clip_norm=self.grad_clip_norm,
            warmup_steps=self.warmup_steps,
            batch_size=self.batch_size,
            epochs=self.epochs,
            dropout=self.dropout,
            rng_seed=seed,
            val_fraction=self.val_fraction,
            max_steps=self.max_steps,
        )


@dataclass
class BridgeSection:
    t_star: float = 0.0  # 0 means "derive from the spectra"
    n_steps: int = 0  # 0 means "pro-rate 500 full-interval steps"
    t_end: float = T_END
    k_star_rtol: float = 0.1
    batch_size: int = 16
    n_samples: int = 0  # 0 means all


@dataclass
class EvalSection:
    n_boot: int = 10000
    ci: float = 0.99
    psd_boot: int = 200
    k_star: float = 0.0  # filter cutoff for the L2 check; 0 uses the bridge cache


@dataclass
class RunSection:
    seed: int = 0


SECTIONS = {
    "run": RunSection,
    "sim": SimSection,
    "schedule": ScheduleSection,
    "train": TrainSection,
    "bridge": BridgeSection,
    "eval": EvalSection,
}


@dataclass
class PipelineConfig:
    run: RunSection = field(default_factory=RunSection)
    sim: SimSection = field(default_factory=SimSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    bridge: BridgeSection = field(default_factory=BridgeSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: str(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _convert(value: str, typ, where: str):
    try:
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r}") from None


def parse_config(text: str) -> PipelineConfig:
    """Parse config text; unknown sections or keys raise :class:`ConfigError`."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    cfg = PipelineConfig()
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        sec = getattr(cfg, name)
        known = {f.name: f.type for f in fields(sec)}
        for key, value in cp[name].items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            setattr(sec, key, _convert(value, known[key], f"[{name}] {key}"))
    return cfg


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
