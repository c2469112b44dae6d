"""Run configuration: a flat key/value namespace with typed parsing.

Configuration comes from an optional plain-text file (one ``key = value`` per
line, ``#`` comments) plus command-line overrides. Unknown keys are rejected
with their source location, and every command echoes the fully resolved
configuration into its run directory so reruns are diffable.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .data import ModalitySpec, SyntheticWorldConfig
from .errors import ConfigurationError
from .model import UPConfig
from .pipeline import TrainConfig
from .rng import derive_seed


@dataclass
class RunConfig:
    """Every knob for data synthesis, training, and evaluation."""

    # synthetic world
    modalities: tuple[str, ...] = ("image", "text")
    seq_len: int = 4
    feature_dim: int = 64
    latent_dim: int = 8
    noise_std: float = 0.0
    class_count: int = 0
    train_count: int = 256
    val_count: int = 64
    world: str = "pair"

    # trunk architecture
    up_dim: int = 64
    up_depth: int = 2
    up_heads: int = 4
    mlp_ratio: int = 4
    token_count: int = 1
    fusion: str = "addition"
    al_hidden: int = 0

    # optimization
    stage1_epochs: int = 500
    stage1_batch_size: int = 512
    stage2_epochs: int = 100
    stage2_batch_size: int = 64
    vqa_epochs: int = 100
    vqa_batch_size: int = 64
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.001
    tau_init: float = 0.07
    max_steps: int = 0
    grad_clip: float = 1.0
    al_on_bridge: bool = False
    train_tau_stage2: bool = True
    debug_check_frozen: bool = False
    seed: int = 0

    # evaluation
    recall_ks: tuple[int, ...] = (1, 5)
    wups_threshold: float = 0.9
    zeroshot_tau: float = 0.0

    # ------------------------------------------------------------------
    # parsing

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None
             ) -> "RunConfig":
        cfg = cls()
        if path is not None:
            for lineno, key, value in _read_config_lines(path):
                cfg._set(key, value, f"{path}:{lineno}")
        for key, value in (overrides or {}).items():
            cfg._set(key, value, "command line")
        cfg._validate()
        return cfg

    def _set(self, key: str, value: str, where: str) -> None:
        for f in fields(self):
            if f.name == key:
                try:
                    setattr(self, key, _parse_value(f.type, value))
                except ValueError as exc:
                    raise ConfigurationError(
                        f"{where}: bad value for {key!r}: {exc}") from None
                return
        raise ConfigurationError(f"{where}: unknown key {key!r}")

    def _validate(self) -> None:
        if len(self.modalities) < 1:
            raise ConfigurationError("modalities must name at least one modality")
        if self.world not in ("pair", "vqa"):
            raise ConfigurationError(f"world must be pair or vqa, got {self.world!r}")
        if self.world == "vqa" and len(self.modalities) != 2:
            raise ConfigurationError("a vqa world needs exactly two modalities")
        if self.world == "vqa" and self.class_count < 2:
            raise ConfigurationError("a vqa world needs class_count >= 2")

    def resolved_text(self) -> str:
        """Canonical key = value rendering of the full configuration."""
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    # ------------------------------------------------------------------
    # derived configuration objects

    def up_config(self) -> UPConfig:
        return UPConfig(dim=self.up_dim, depth=self.up_depth,
                        heads=self.up_heads, mlp_ratio=self.mlp_ratio,
                        fusion=self.fusion, token_count=self.token_count)

    def world_config(self) -> SyntheticWorldConfig:
        specs = tuple(
            ModalitySpec(name, self.seq_len, self.feature_dim,
                         derive_seed(self.seed, f"encoder.{name}"))
            for name in self.modalities)
        return SyntheticWorldConfig(
            latent_dim=self.latent_dim, modalities=specs,
            noise_std=self.noise_std,
            class_count=self.class_count or None)

    def _train_config(self, epochs: int, batch_size: int) -> TrainConfig:
        return TrainConfig(
            epochs=epochs, batch_size=batch_size,
            learning_rate=self.learning_rate, beta1=self.beta1,
            beta2=self.beta2, weight_decay=self.weight_decay, seed=self.seed,
            fusion=self.fusion, tau_init=self.tau_init,
            max_steps=self.max_steps or None,
            grad_clip=self.grad_clip if self.grad_clip > 0 else None,
            al_on_bridge=self.al_on_bridge,
            train_tau_stage2=self.train_tau_stage2,
            debug_check_frozen=self.debug_check_frozen)

    def stage1_train_config(self) -> TrainConfig:
        return self._train_config(self.stage1_epochs, self.stage1_batch_size)

    def stage2_train_config(self) -> TrainConfig:
        return self._train_config(self.stage2_epochs, self.stage2_batch_size)

    def vqa_train_config(self) -> TrainConfig:
        return self._train_config(self.vqa_epochs, self.vqa_batch_size)


def _read_config_lines(path):
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(
                f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        yield lineno, key.strip(), value.strip()


def parse_overrides(pairs) -> dict[str, str]:
    """Turn repeated ``key=value`` strings into an override mapping."""
    overrides: dict[str, str] = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigurationError(
                f"override {pair!r} must look like key=value")
        key, _, value = pair.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parse_value(annotation: str, value: str):
    if annotation == "int":
        return int(value)
    if annotation == "float":
        return float(value)
    if annotation == "bool":
        low = value.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if annotation == "str":
        return value
    if annotation.startswith("tuple[str"):
        parts = tuple(p.strip() for p in value.split(",") if p.strip())
        return parts
    if annotation.startswith("tuple[int"):
        return tuple(int(p.strip()) for p in value.split(",") if p.strip())
    raise ValueError(f"unsupported config type {annotation!r}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)
