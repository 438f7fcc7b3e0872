"""Run configuration and the flat ``key=value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # geometry
    canvas: int = 128
    patch: int = 48
    M: int = 8
    max_len: int = 250
    # network
    d: int = 64
    z: int = 32
    hidden: int = 256
    mixtures: int = 10
    gcn_layers: int = 1
    ladder: tuple = (4, 8, 16, 32, 64, 64)
    policy: str = "synonymous"
    # clustering
    K: int = 10
    eta: float = 0.05
    cluster: bool = True
    lam: float = 0.25
    # optimisation
    lr: float = 1e-3
    decay: float = 0.95
    batch: int = 32
    epochs: int = 10
    max_steps: int = 0
    clip: float = 1.0
    mask: float = 0.0
    seed: int = 0
    ckpt_every: int = 1
    extra: dict = field(default_factory=dict, repr=False)

    def validate(self) -> "Config":
        for name in ("canvas", "patch", "M", "max_len", "d", "z", "hidden", "mixtures", "gcn_layers",
                     "K", "batch", "epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must lie in (0, 1]")
        if self.lr <= 0 or self.eta <= 0 or self.eta > 1:
            raise ConfigError("lr must be positive and eta in (0, 1]")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if not 0 <= self.mask <= 1:
            raise ConfigError("mask must lie in [0, 1]")
        if self.gcn_layers not in (1, 2):
            raise ConfigError("gcn_layers must be 1 or 2")
        from .graph import POLICIES
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        return self

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw).validate()

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "extra":
                continue
            v = getattr(self, f.name)
            key = "lambda" if f.name == "lam" else f.name
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _coerce(name: str, raw: str):
    default = _FIELDS[name].default
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw.strip()


def parse_overrides(pairs: dict[str, str]) -> dict:
    out = {}
    for key, raw in pairs.items():
        name = "lam" if key == "lambda" else key
        if name not in _FIELDS or name == "extra":
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[name] = _coerce(name, raw)
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from None
    return out


def parse_text(text: str) -> dict[str, str]:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def load(path=None, base: Config | None = None, **overrides) -> Config:
    """Defaults, then the file at ``path``, then ``overrides`` (non-None only)."""
    cfg = base or Config()
    if path:
        with open(path) as f:
            cfg = dataclasses.replace(cfg, **parse_overrides(parse_text(f.read())))
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()


def save(cfg: Config, path):
    with open(path, "w") as f:
        f.write(cfg.to_text())
