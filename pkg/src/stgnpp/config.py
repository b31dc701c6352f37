"""Flat ``key=value`` run configuration."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .encoder import EncoderConfig
from .eventseq import FlowConfig
from .intensity import HeadConfig, LossConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # model
    d_model: int = 64
    n_heads: int = 4
    n_stacks: int = 2
    gcn_layers: int = 2
    adaptive_dim: int = 10
    window_slots: int = 72
    flow_layers: int = 2
    head_hidden: int = 32
    head_layers: int = 2
    periodic_dim: int = 8
    alpha: float = 1.0
    # optimisation
    lr: float = 1e-3
    batch_size: int = 16
    # windows per forward pass; gradients are accumulated up to batch_size
    micro_batch: int = 4
    epochs: int = 10
    max_minutes: float = 0.0
    grad_clip: float = 0.0
    # multiply lr by lr_decay after lr_patience epochs without a better validation loss
    lr_decay: float = 1.0
    lr_patience: int = 1
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2

    def __post_init__(self):
        if abs(self.train_frac + self.val_frac + self.test_frac - 1.0) > 1e-9:
            raise ConfigError("train_frac + val_frac + test_frac must equal 1")
        for name in ("lr", "batch_size", "micro_batch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.lr_decay <= 1 or self.lr_patience < 1:
            raise ConfigError("lr_decay must be in (0, 1] and lr_patience >= 1")
        if min(self.epochs, self.max_minutes, self.grad_clip) < 0:
            raise ConfigError("epochs, max_minutes and grad_clip must be >= 0")
        if min(self.train_frac, self.val_frac, self.test_frac) <= 0:
            raise ConfigError("split fractions must be positive")
        try:
            self.model_config()
        except ValueError as err:
            raise ConfigError(str(err)) from err

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_frac, self.val_frac, self.test_frac)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            EncoderConfig(self.d_model, self.n_heads, self.n_stacks, self.gcn_layers,
                          self.adaptive_dim, self.window_slots),
            FlowConfig(self.flow_layers),
            HeadConfig(self.head_hidden, self.head_layers, self.periodic_dim),
            LossConfig(self.alpha),
        )

    def replace(self, **kw) -> "RunConfig":
        d = asdict(self)
        d.update(kw)
        return RunConfig(**d)

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n"
                       for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = asdict(base) if base is not None else {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = int(val) if types[key] in ("int", int) else float(val)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())
