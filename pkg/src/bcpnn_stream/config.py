"""Experiment configuration: the ModelConfig record, its validation, and the
plain-text ``key = value`` file format used for presets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from bcpnn_stream.errors import ConfigError

# Sub-streams the input-hidden traffic is partitioned into (one per HBM channel).
N_PARTITIONS = 4


@dataclass(frozen=True)
class ModelConfig:
    input_width: int
    input_height: int
    input_hc: int
    input_mc: int
    hidden_hc: int
    hidden_mc: int
    n_classes: int
    nact_hi: int
    epochs_unsup: int
    alpha_min: float = 1e-4
    temperature: float = 1.0
    noise_amp: float = 0.0
    rewire_interval: int = 0
    n_swaps: int = 1
    fifo_depth: int = 8
    packet_ih: int = 64
    packet_ho: int = 16
    seed: int = 0

    @property
    def n_input(self) -> int:
        return self.input_hc * self.input_mc

    @property
    def n_hidden(self) -> int:
        return self.hidden_hc * self.hidden_mc

    @property
    def rf_len(self) -> int:
        """Length of one hidden hypercolumn's gathered receptive-field vector."""
        return self.nact_hi * self.input_mc

    @property
    def sub_packet(self) -> int:
        """Burst width of one partitioned sub-stream."""
        return self.packet_ih // N_PARTITIONS

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


def _int_fields():
    return {f.name for f in fields(ModelConfig) if f.type in ("int", int)}


def validate_config(cfg: ModelConfig) -> list[str]:
    """Return every violated constraint as a readable message; empty means valid."""
    out = []
    for name in ("input_width", "input_height", "input_hc", "hidden_hc", "hidden_mc"):
        if getattr(cfg, name) < 1:
            out.append(f"{name} must be >= 1 (got {getattr(cfg, name)})")
    if cfg.input_mc < 2:
        out.append(f"input_mc must be >= 2 (got {cfg.input_mc})")
    if cfg.n_classes < 2:
        out.append(f"n_classes must be >= 2 (got {cfg.n_classes})")
    if cfg.input_width * cfg.input_height != cfg.input_hc:
        out.append(
            f"input_hc ({cfg.input_hc}) must equal input_width*input_height "
            f"({cfg.input_width * cfg.input_height})"
        )
    if not 1 <= cfg.nact_hi <= cfg.input_hc:
        out.append(f"nact_hi must be in [1, input_hc={cfg.input_hc}] (got {cfg.nact_hi})")
    if cfg.epochs_unsup < 0:
        out.append(f"epochs_unsup must be >= 0 (got {cfg.epochs_unsup})")
    if not 0.0 < cfg.alpha_min <= 1.0:
        out.append(f"alpha_min must be in (0, 1] (got {cfg.alpha_min})")
    if not (cfg.temperature > 0.0 and math.isfinite(cfg.temperature)):
        out.append(f"temperature must be a positive finite number (got {cfg.temperature})")
    if not (cfg.noise_amp >= 0.0 and math.isfinite(cfg.noise_amp)):
        out.append(f"noise_amp must be >= 0 (got {cfg.noise_amp})")
    if cfg.rewire_interval < 0:
        out.append(f"rewire_interval must be >= 0 (got {cfg.rewire_interval})")
    if cfg.n_swaps < 0 or cfg.n_swaps > cfg.nact_hi:
        out.append(f"n_swaps must be in [0, nact_hi={cfg.nact_hi}] (got {cfg.n_swaps})")
    if cfg.fifo_depth < 1:
        out.append(f"fifo_depth must be >= 1 (got {cfg.fifo_depth})")
    if cfg.seed < 0:
        out.append(f"seed must be >= 0 (got {cfg.seed})")
    if cfg.packet_ih < N_PARTITIONS or cfg.packet_ih % N_PARTITIONS:
        out.append(f"packet_ih must be a positive multiple of {N_PARTITIONS} (got {cfg.packet_ih})")
    elif cfg.input_mc >= 2 and 1 <= cfg.nact_hi <= cfg.input_hc:
        if cfg.rf_len % cfg.packet_ih:
            out.append(
                f"packet_ih ({cfg.packet_ih}) must divide nact_hi*input_mc ({cfg.rf_len})"
            )
        if cfg.n_input % cfg.sub_packet:
            out.append(
                f"packet_ih/{N_PARTITIONS} ({cfg.sub_packet}) must divide the input vector "
                f"length ({cfg.n_input})"
            )
    if cfg.packet_ho < 1:
        out.append(f"packet_ho must be >= 1 (got {cfg.packet_ho})")
    elif cfg.hidden_mc >= 1 and cfg.n_hidden % cfg.packet_ho:
        out.append(f"packet_ho ({cfg.packet_ho}) must divide hidden_hc*hidden_mc ({cfg.n_hidden})")
    return out


def check_config(cfg: ModelConfig) -> ModelConfig:
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("invalid configuration: " + "; ".join(problems))
    return cfg


def default_noise(hidden_mc: int) -> float:
    return 1e-4 * abs(math.log(1.0 / hidden_mc))


# Hidden geometry, nactHi, classes and unsupervised epochs of the three reference
# model configurations; the remaining values are this package's defaults.
_PRESETS = {
    "model1": dict(
        input_width=28, input_height=28, input_hc=784, input_mc=2,
        hidden_hc=32, hidden_mc=128, n_classes=10, nact_hi=128, epochs_unsup=5,
        rewire_interval=60000 // 16,
    ),
    "model2": dict(
        input_width=28, input_height=28, input_hc=784, input_mc=2,
        hidden_hc=32, hidden_mc=256, n_classes=2, nact_hi=128, epochs_unsup=20,
        rewire_interval=4708 // 16,
    ),
    "model3": dict(
        input_width=64, input_height=64, input_hc=4096, input_mc=2,
        hidden_hc=32, hidden_mc=128, n_classes=2, nact_hi=128, epochs_unsup=100,
        rewire_interval=546 // 16,
    ),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str, **overrides) -> ModelConfig:
    try:
        values = dict(_PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(_PRESETS)}") from None
    values.setdefault("noise_amp", default_noise(values["hidden_mc"]))
    values.update(overrides)
    return ModelConfig(**values)


def dumps_config(cfg: ModelConfig, header: str | None = None) -> str:
    lines = [f"# {line}" for line in (header or "").splitlines()]
    for f in fields(ModelConfig):
        lines.append(f"{f.name} = {getattr(cfg, f.name)!r}")
    return "\n".join(lines) + "\n"


def loads_config(text: str, source: str = "<string>") -> ModelConfig:
    """Parse ``key = value`` lines. Every field must be present exactly once."""
    ints = _int_fields()
    known = {f.name for f in fields(ModelConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = int(value) if key in ints else float(value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {value!r}") from None
    missing = sorted(known - values.keys())
    if missing:
        raise ConfigError(f"{source}: missing keys: {', '.join(missing)}")
    return ModelConfig(**values)


def load_config(path) -> ModelConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads_config(text, source=str(path))


def save_config(cfg: ModelConfig, path, header: str | None = None) -> None:
    Path(path).write_text(dumps_config(cfg, header))
