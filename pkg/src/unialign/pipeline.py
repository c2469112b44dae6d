"""Runnable training procedures and persistence.

Stage 1 trains the shared trunk, both modality tokens, and the temperature
on one modality pair. Stage 2 freezes everything trained so far and fits
only the new modality's alignment layer and token against an already-aligned
bridge modality, which transfers alignment to every other registered
modality. Checkpoints are checksummed little-endian binaries storing values
at 32-bit precision.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import PairedDataset, VqaDataset, batch_iter
from .errors import (
    ConfigurationError,
    CorruptionError,
    DivergenceError,
    DuplicateModalityError,
    FormatError,
    FreezeViolationError,
    VersionError,
)
from .loss import Temperature, alignment_loss, cross_entropy
from .model import (
    AlignmentLayer,
    ModalityRegistry,
    ModalityToken,
    ModelState,
    PredictionHead,
    UniversalProjection,
    UPConfig,
    fuse,
    pool_embed,
    vqa_forward,
)
from .rng import RngStream, derive_seed

CHECKPOINT_MAGIC = b"OECK"
CHECKPOINT_VERSION = 1

LOG_TAU_NAME = "temperature.log_tau"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; the stock defaults are the stage-1 profile."""

    epochs: int = 500
    batch_size: int = 512
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 1e-3
    seed: int = 0
    fusion: str = "addition"
    tau_init: float = 0.07
    max_steps: int | None = None
    grad_clip: float | None = 1.0
    al_on_bridge: bool = False
    train_tau_stage2: bool = True
    debug_check_frozen: bool = False

    @classmethod
    def stage2(cls, **overrides) -> "TrainConfig":
        base = cls(epochs=100, batch_size=64)
        return replace(base, **overrides)


# ---------------------------------------------------------------------------
# optimizer


def adamw_update(value: np.ndarray, grad: np.ndarray, m: np.ndarray,
                 v: np.ndarray, step_index: int, *, lr: float, beta1: float,
                 beta2: float, weight_decay: float, eps: float = 1e-8):
    """One decoupled-weight-decay adaptive-moment update; returns new arrays."""
    if step_index < 1:
        raise ConfigurationError("step_index starts at 1")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step_index)
    v_hat = v / (1.0 - beta2**step_index)
    value = value - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * value)
    return value, m, v


class AdamW:
    """Decoupled-weight-decay Adam over named parameters.

    Frozen parameters are never touched; parameters flagged ``decay=False``
    (biases, norm gains, the temperature) skip weight decay.
    """

    def __init__(self, params, *, lr: float, beta1: float = 0.9,
                 beta2: float = 0.95, weight_decay: float = 0.0,
                 eps: float = 1e-8):
        self.params: list[tuple[str, Parameter]] = list(params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate parameter names in optimizer")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self._moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        for name, p in self.params:
            if p.frozen:
                continue
            m, v = self._moments.get(
                name, (np.zeros_like(p.data), np.zeros_like(p.data)))
            decay = self.weight_decay if p.decay else 0.0
            p.data, m, v = adamw_update(
                p.data, p.grad, m, v, self.step_count,
                lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                weight_decay=decay, eps=self.eps)
            self._moments[name] = (m, v)


def clip_gradients(params, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most max_norm."""
    total = 0.0
    live = [p for _, p in params if not p.frozen]
    for p in live:
        total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in live:
            p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# training stages


def _frozen_snapshot(state: ModelState) -> dict[str, bytes]:
    return {n: p.data.tobytes() for n, p in state.named_parameters() if p.frozen}


def _verify_frozen(state: ModelState, snapshot: dict[str, bytes], step: int) -> None:
    for name, p in state.named_parameters():
        if p.frozen and p.data.tobytes() != snapshot[name]:
            raise FreezeViolationError(
                f"frozen parameter {name!r} changed at step {step}")


def _run_contrastive(state: ModelState, params, data: PairedDataset,
                     cfg: TrainConfig, embed_batch) -> list[float]:
    temp = Temperature.from_parameter(state.log_tau)
    opt = AdamW(params, lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2,
                weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, math.ceil(len(data) / cfg.batch_size))
    total_epochs = (
        cfg.epochs if cfg.max_steps is None
        else math.ceil(cfg.max_steps / steps_per_epoch)
    )
    history: list[float] = []
    step = 0
    for epoch in range(total_epochs):
        epoch_losses: list[float] = []
        for batch in batch_iter(data, cfg.batch_size, cfg.seed, epoch=epoch):
            emb_a, emb_b = embed_batch(batch)
            loss = alignment_loss(emb_a, emb_b, temp)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError("training loss is non-finite",
                                      step=step, tau=temp.value())
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip is not None:
                clip_gradients(params, cfg.grad_clip)
            snapshot = _frozen_snapshot(state) if cfg.debug_check_frozen else None
            opt.step()
            if snapshot is not None:
                _verify_frozen(state, snapshot, step)
            epoch_losses.append(value)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        history.append(float(np.mean(epoch_losses)))
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return history


def _embed(state: ModelState, modality: str, feats: np.ndarray,
           al: AlignmentLayer | None = None) -> Tensor:
    x: Tensor = ad.as_tensor(feats)
    if al is not None:
        x = al.forward(x)
    fused = fuse(state.tokens[modality], x, state.config.fusion)
    return pool_embed(state.up.forward(fused))


def train_stage1(data: PairedDataset, cfg: TrainConfig,
                 up_config: UPConfig | None = None
                 ) -> tuple[ModelState, list[float]]:
    """Fit the trunk, both modality tokens, and the temperature on a pair.

    Encoder features are consumed as constants and never modified. Returns
    the trained state and the per-epoch mean loss.
    """
    if len(data.modalities) != 2:
        raise ConfigurationError(
            f"stage 1 needs exactly two modalities, got {data.modalities}")
    if up_config is None:
        up_config = UPConfig(fusion=cfg.fusion)
    mod_a, mod_b = data.modalities
    for m in data.modalities:
        if data.features[m].shape[-1] != up_config.dim:
            raise ConfigurationError(
                f"features of {m!r} have dimension {data.features[m].shape[-1]} "
                f"but the trunk expects {up_config.dim}")
    state = ModelState.create(up_config, (mod_a, mod_b), cfg.seed, cfg.tau_init)

    def embed_batch(batch):
        return (_embed(state, mod_a, batch.features[mod_a]),
                _embed(state, mod_b, batch.features[mod_b]))

    history = _run_contrastive(state, state.trainable_parameters(), data, cfg,
                               embed_batch)
    return state, history


def train_stage2(state: ModelState, new_modality: str, bridge_modality: str,
                 data: PairedDataset, cfg: TrainConfig
                 ) -> tuple[ModelState, list[float]]:
    """Align a new modality through an already-aligned bridge.

    Freezes the trunk, every existing token, and every existing alignment
    layer; trains only the new modality's alignment layer and token (plus the
    temperature unless disabled). The state is updated in place and returned
    with the per-epoch mean loss.
    """
    state.registry.require(bridge_modality)
    if new_modality in state.registry.aligned:
        raise DuplicateModalityError(
            f"modality {new_modality!r} already aligned")
    if set(data.modalities) != {bridge_modality, new_modality}:
        raise ConfigurationError(
            f"dataset covers {data.modalities}, expected "
            f"({bridge_modality!r}, {new_modality!r})")
    if data.features[new_modality].shape[-1] != state.config.dim:
        raise ConfigurationError(
            f"features of {new_modality!r} have dimension "
            f"{data.features[new_modality].shape[-1]} but the trunk expects "
            f"{state.config.dim}")

    state.up.freeze()
    for token in state.tokens.values():
        token.tokens.freeze()
    for layer in state.alignment.values():
        layer.freeze()
    if cfg.train_tau_stage2:
        state.log_tau.unfreeze()
    else:
        state.log_tau.freeze()

    state.add_modality(new_modality,
                       derive_seed(cfg.seed, f"stage2.{new_modality}"))
    new_al = state.alignment[new_modality]

    def embed_batch(batch):
        bridge_al = new_al if cfg.al_on_bridge else None
        return (_embed(state, bridge_modality, batch.features[bridge_modality],
                       al=bridge_al),
                _embed(state, new_modality, batch.features[new_modality],
                       al=new_al))

    history = _run_contrastive(state, state.trainable_parameters(), data, cfg,
                               embed_batch)
    return state, history


def train_vqa(data: VqaDataset, cfg: TrainConfig,
              up_config: UPConfig | None = None, head_name: str = "vqa"
              ) -> tuple[ModelState, list[float]]:
    """Fit the trunk, both tokens, and a linear answer head with cross entropy.

    Encoders stay frozen as always; the temperature is unused here.
    """
    if up_config is None:
        up_config = UPConfig(fusion=cfg.fusion)
    state = ModelState.create(
        up_config, (data.image_modality, data.question_modality),
        cfg.seed, cfg.tau_init)
    head = PredictionHead(head_name, up_config.dim, data.vocabulary,
                          RngStream(derive_seed(cfg.seed, f"head.{head_name}")))
    state.heads[head_name] = head
    vocab_index = {a: i for i, a in enumerate(head.vocabulary)}

    params = [(n, p) for n, p in state.trainable_parameters()
              if n != LOG_TAU_NAME]
    opt = AdamW(params, lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2,
                weight_decay=cfg.weight_decay)

    view = PairedDataset(
        (data.image_modality, data.question_modality),
        {data.image_modality: data.image_features,
         data.question_modality: data.question_features},
        labels=data.answers)

    steps_per_epoch = max(1, math.ceil(len(view) / cfg.batch_size))
    total_epochs = (
        cfg.epochs if cfg.max_steps is None
        else math.ceil(cfg.max_steps / steps_per_epoch)
    )
    history: list[float] = []
    step = 0
    for epoch in range(total_epochs):
        epoch_losses: list[float] = []
        for batch in batch_iter(view, cfg.batch_size, cfg.seed, epoch=epoch):
            logits = vqa_forward(state, batch.features[data.image_modality],
                                 batch.features[data.question_modality], head)
            labels = np.array([vocab_index[a] for a in batch.labels])
            loss = cross_entropy(logits, labels)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError("vqa loss is non-finite", step=step,
                                      tau=float("nan"))
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip is not None:
                clip_gradients(params, cfg.grad_clip)
            snapshot = _frozen_snapshot(state) if cfg.debug_check_frozen else None
            opt.step()
            if snapshot is not None:
                _verify_frozen(state, snapshot, step)
            epoch_losses.append(value)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        history.append(float(np.mean(epoch_losses)))
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return state, history


def vqa_predict(state: ModelState, head: PredictionHead,
                image_features: np.ndarray, question_features: np.ndarray
                ) -> list[str]:
    """Argmax answers (ties break toward the lower vocabulary index)."""
    logits = vqa_forward(state, image_features, question_features, head)
    return [head.answer(int(i)) for i in np.argmax(logits.data, axis=-1)]


# ---------------------------------------------------------------------------
# checkpoints


def _pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


class _Cursor:
    """Sequential reader that raises CorruptionError instead of overrunning."""

    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptionError(f"{self.path}: truncated record",
                                  offset=self.pos)
        piece = self.raw[self.pos:self.pos + n]
        self.pos += n
        return piece

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def save_checkpoint(state: ModelState, path, step: int = 0,
                    loss: float = float("nan")) -> None:
    """Serialize the full model state at 32-bit value precision."""
    body = bytearray()
    body += struct.pack("<4sH", CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    cfg = state.config
    body += struct.pack("<IIIII", cfg.dim, cfg.depth, cfg.heads,
                        cfg.mlp_ratio, cfg.token_count)
    body += _pack_string(cfg.fusion)

    records = [(n, p) for n, p in state.named_parameters() if n != LOG_TAU_NAME]
    records.sort(key=lambda item: item[0])
    body += struct.pack("<I", len(records))
    for name, p in records:
        body += _pack_string(name)
        body += struct.pack("<B", p.data.ndim)
        for d in p.data.shape:
            body += struct.pack("<I", d)
        body += p.data.astype("<f4").tobytes()

    for m in state.registry.stage1_pair:
        body += _pack_string(m)
    body += struct.pack("<H", len(state.registry.aligned))
    for m in state.registry.aligned:
        body += _pack_string(m)

    body += struct.pack("<f", np.float32(state.log_tau.data))

    body += struct.pack("<H", len(state.heads))
    for name in sorted(state.heads):
        head = state.heads[name]
        body += _pack_string(name)
        body += struct.pack("<I", len(head.vocabulary))
        for answer in head.vocabulary:
            body += _pack_string(answer)

    seed = int(state.metadata.get("seed", 0))
    body += struct.pack("<Qqd", step, seed, loss)
    body += struct.pack("<Q", int.from_bytes(
        hashlib.sha256(bytes(body)).digest()[:8], "little"))
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> ModelState:
    """Rebuild a model state from disk, verifying structure and checksum.

    All parameters load unfrozen; training procedures re-freeze what their
    contracts require. Training metadata lands in ``state.metadata``.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 14:
        raise CorruptionError(f"{path}: file too small", offset=len(raw))
    stored = struct.unpack_from("<Q", raw, len(raw) - 8)[0]
    actual = int.from_bytes(hashlib.sha256(raw[:-8]).digest()[:8], "little")
    if stored != actual:
        raise CorruptionError(f"{path}: checksum mismatch", offset=len(raw) - 8)

    cur = _Cursor(raw[:-8], path)
    magic, version = cur.unpack("<4sH")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")

    dim, depth, heads, mlp_ratio, token_count = cur.unpack("<IIIII")
    fusion = cur.string()
    config = UPConfig(dim=dim, depth=depth, heads=heads, mlp_ratio=mlp_ratio,
                      fusion=fusion, token_count=token_count)

    (record_count,) = cur.unpack("<I")
    values: dict[str, np.ndarray] = {}
    for _ in range(record_count):
        name = cur.string()
        (ndim,) = cur.unpack("<B")
        shape = tuple(cur.unpack("<" + "I" * ndim)) if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(cur.take(4 * n), dtype="<f4")
        values[name] = data.astype(np.float64).reshape(shape)

    stage1 = (cur.string(), cur.string())
    (aligned_count,) = cur.unpack("<H")
    aligned = [cur.string() for _ in range(aligned_count)]

    (log_tau,) = cur.unpack("<f")

    (head_count,) = cur.unpack("<H")
    head_vocab: dict[str, tuple[str, ...]] = {}
    for _ in range(head_count):
        name = cur.string()
        (vocab_count,) = cur.unpack("<I")
        head_vocab[name] = tuple(cur.string() for _ in range(vocab_count))

    step, seed, loss = cur.unpack("<Qqd")
    if cur.pos != len(cur.raw):
        raise CorruptionError(f"{path}: {len(cur.raw) - cur.pos} trailing bytes",
                              offset=cur.pos)

    registry = ModalityRegistry(stage1_pair=stage1, aligned=aligned)
    up = UniversalProjection(config, RngStream(0).child("up"))
    state = ModelState(config, registry, up,
                       Parameter(np.float64(log_tau), decay=False))
    state.metadata = {"step": step, "seed": seed, "loss": loss}

    def pop(name: str) -> np.ndarray:
        if name not in values:
            raise FormatError(f"{path}: missing parameter record {name!r}")
        return values.pop(name)

    for name, p in up.named_parameters():
        stored_value = pop(name)
        if stored_value.shape != p.data.shape:
            raise FormatError(
                f"{path}: parameter {name!r} has shape {stored_value.shape}, "
                f"expected {p.data.shape}")
        p.data = stored_value

    for modality in aligned:
        token = ModalityToken(modality, config.dim, config.token_count,
                              RngStream(0))
        token.tokens = Parameter(pop(f"token.{modality}"))
        state.tokens[modality] = token
        if modality not in stage1:
            w1 = pop(f"al.{modality}.w1")
            layer = AlignmentLayer(modality, config.dim, hidden=w1.shape[1])
            layer.w1 = Parameter(w1)
            layer.b1 = Parameter(pop(f"al.{modality}.b1"), decay=False)
            layer.w2 = Parameter(pop(f"al.{modality}.w2"))
            layer.b2 = Parameter(pop(f"al.{modality}.b2"), decay=False)
            state.alignment[modality] = layer

    for name, vocabulary in head_vocab.items():
        head = PredictionHead(name, config.dim, vocabulary, RngStream(0))
        head.weight = Parameter(pop(f"head.{name}.weight"))
        head.bias = Parameter(pop(f"head.{name}.bias"), decay=False)
        state.heads[name] = head

    if values:
        raise FormatError(
            f"{path}: unexpected parameter records {sorted(values)}")
    return state
