"""Model and hardware configurations plus the block geometry derived from them."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    """Raised for an inconsistent or unreadable configuration."""


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class ModelConfig:
    name: str
    image_size: int
    patch_size: int
    model_dim: int
    num_heads: int
    num_layers: int
    mlp_ratio: float = 4.0
    param_count: int = 0
    in_channels: int = 3

    def validate(self) -> "ModelConfig":
        if min(self.image_size, self.patch_size, self.model_dim,
               self.num_heads, self.num_layers, self.in_channels) < 1:
            raise ConfigError(f"{self.name}: dimensions must be positive")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"{self.name}: D={self.model_dim} not divisible by h={self.num_heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"{self.name}: image {self.image_size} not divisible by patch {self.patch_size}")
        hidden = self.mlp_ratio * self.model_dim
        if hidden != int(hidden) or hidden < 1:
            raise ConfigError(f"{self.name}: mlp_ratio*D = {hidden} is not a positive integer")
        return self

    @property
    def hidden_dim(self) -> int:
        return int(self.mlp_ratio * self.model_dim)


@dataclass(frozen=True)
class HardwareConfig:
    p_sys: int = 32
    clock_freq: float = 300e6
    dram_bandwidth: float = 77e9
    dsp_count: int = 5867
    bram36_count: int = 1766
    bram_bank_depth: int = 4096
    packing_factor: int = 2
    # timing constants of the cycle model
    sweep_fill: int | None = None   # cycles per row-block sweep; None -> p_sys
    pair_latency: int = 10          # writeback cycles per block-pair iteration
    reciprocal_latency: int = 32

    def validate(self) -> "HardwareConfig":
        if self.p_sys < 1:
            raise ConfigError("p_sys must be >= 1")
        if self.clock_freq <= 0:
            raise ConfigError("clock_freq must be positive")
        if self.dram_bandwidth < 0:
            raise ConfigError("dram_bandwidth must be non-negative")
        if self.packing_factor != 2:
            raise ConfigError("packing_factor is fixed at 2")
        if self.bram_bank_depth < 1:
            raise ConfigError("bram_bank_depth must be >= 1")
        return self

    @property
    def fill_cycles(self) -> int:
        return self.p_sys if self.sweep_fill is None else self.sweep_fill

    @property
    def systolic_dsps(self) -> int:
        return self.p_sys * self.p_sys

    @property
    def macs_per_cycle(self) -> int:
        return self.p_sys * 2 * self.p_sys

    @property
    def bytes_per_cycle(self) -> float:
        return self.dram_bandwidth / self.clock_freq


@dataclass(frozen=True)
class DerivedDims:
    num_patches: int
    tokens: int
    model_dim: int
    num_heads: int
    head_dim: int
    hidden_dim: int
    num_layers: int
    patch_dim: int
    p_sys: int

    def row_blocks(self, rows: int | None = None) -> int:
        return ceil_div(self.tokens if rows is None else rows, self.p_sys)

    def col_blocks(self, d: int) -> int:
        return ceil_div(d, self.p_sys)

    def col_pairs(self, d: int) -> int:
        return ceil_div(d, 2 * self.p_sys)


def derive_dims(model: ModelConfig, hw: HardwareConfig) -> DerivedDims:
    model.validate()
    hw.validate()
    n = (model.image_size // model.patch_size) ** 2
    return DerivedDims(
        num_patches=n,
        tokens=n + 1,
        model_dim=model.model_dim,
        num_heads=model.num_heads,
        head_dim=model.model_dim // model.num_heads,
        hidden_dim=model.hidden_dim,
        num_layers=model.num_layers,
        patch_dim=model.patch_size * model.patch_size * model.in_channels,
        p_sys=hw.p_sys,
    )


_BUILTIN = (
    ModelConfig("ViT-B", 256, 16, 768, 12, 12, 4.0, 86_000_000),
    ModelConfig("DeiT-B", 224, 16, 768, 12, 12, 4.0, 86_000_000),
    ModelConfig("DeiT-S", 224, 16, 384, 6, 12, 4.0, 22_000_000),
    ModelConfig("DeiT-T", 224, 16, 192, 3, 12, 4.0, 6_000_000),
)


def builtin_models() -> list[ModelConfig]:
    return list(_BUILTIN)


def get_model(label: str) -> ModelConfig:
    key = label.strip().lower().replace("_", "-")
    for m in _BUILTIN:
        if m.name.lower() == key:
            return m
    names = ", ".join(m.name for m in _BUILTIN)
    raise ConfigError(f"unknown model {label!r}; choose one of {names}")


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _coerce(cls, values: dict[str, str], base=None):
    kinds = {f.name: f.type for f in fields(cls)}
    kw = {}
    for k, v in values.items():
        if k not in kinds:
            raise ConfigError(f"unknown {cls.__name__} field {k!r}")
        t = str(kinds[k])
        try:
            if v.lower() == "none":
                kw[k] = None
            elif "str" in t:
                kw[k] = v
            elif "float" in t:
                kw[k] = float(v)
            else:
                kw[k] = int(float(v)) if float(v).is_integer() else int(v)
        except ValueError as exc:
            raise ConfigError(f"{k}: cannot parse {v!r}") from exc
    try:
        obj = replace(base, **kw) if base is not None else cls(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return obj.validate()


def load_model_config(path: str | Path) -> ModelConfig:
    """Read a ModelConfig from a ``key = value`` text file.

    A ``base`` key names a builtin to start from, so a file may override a
    single field.
    """
    try:
        values = _parse_kv(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    base = get_model(values.pop("base")) if "base" in values else None
    return _coerce(ModelConfig, values, base)


def load_hw_config(path: str | Path, base: HardwareConfig | None = None) -> HardwareConfig:
    try:
        values = _parse_kv(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return _coerce(HardwareConfig, values, base or HardwareConfig())


def dump_config(obj) -> str:
    return "".join(f"{f.name} = {getattr(obj, f.name)}\n" for f in fields(obj))
