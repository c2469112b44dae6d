"""Network components: modality tokens, fusion, the shared projection trunk,
per-modality alignment layers, pooling, and the answer-prediction head.

All forward functions accept a single sequence ``[L, D]`` or a batch
``[K, L, D]`` and preserve the batching. Inputs are treated as read-only;
nothing here mutates its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import (
    ConfigurationError,
    DuplicateModalityError,
    ModalityError,
    SequenceError,
    ShapeError,
)
from .rng import RngStream

FUSION_ADDITION = "addition"
FUSION_CONCATENATION = "concatenation"
FUSION_CROSS_ATTENTION = "cross_attention"
FUSION_MODES = (FUSION_ADDITION, FUSION_CONCATENATION, FUSION_CROSS_ATTENTION)

TOKEN_INIT_SCALE = 0.02


@dataclass(frozen=True)
class UPConfig:
    """Architecture of the shared projection trunk."""

    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    fusion: str = FUSION_ADDITION
    token_count: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if self.mlp_ratio < 1:
            raise ConfigurationError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if self.dim < 1 or self.dim % self.heads != 0:
            raise ConfigurationError(
                f"dim ({self.dim}) must be positive and divisible by heads ({self.heads})"
            )
        if self.fusion not in FUSION_MODES:
            raise ConfigurationError(
                f"unknown fusion mode {self.fusion!r}; expected one of {FUSION_MODES}"
            )
        if self.token_count < 1:
            raise ConfigurationError(
                f"token_count must be >= 1, got {self.token_count}"
            )
        if self.fusion == FUSION_ADDITION and self.token_count != 1:
            raise ConfigurationError(
                "addition fusion requires exactly one modality token"
            )


def parameter_count(config: UPConfig) -> int:
    """Closed-form number of trainable scalars in the trunk."""
    d = config.dim
    hidden = d * config.mlp_ratio
    per_block = (
        2 * d  # first layer norm
        + 4 * d * d + 4 * d  # q/k/v/out projections with biases
        + 2 * d  # second layer norm
        + d * hidden + hidden + hidden * d + d  # feed-forward with biases
    )
    return config.depth * per_block


def _linear_init(rng: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal((fan_in, fan_out), scale=1.0 / np.sqrt(fan_in))


class TransformerBlock:
    """Pre-norm block: LN -> multi-head self-attention -> residual,
    then LN -> GELU feed-forward -> residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: RngStream):
        self.dim = dim
        self.heads = heads
        hidden = dim * mlp_ratio
        self.ln1_gain = Parameter(np.ones(dim), decay=False)
        self.ln1_bias = Parameter(np.zeros(dim), decay=False)
        self.wq = Parameter(_linear_init(rng.child("wq"), dim, dim))
        self.bq = Parameter(np.zeros(dim), decay=False)
        self.wk = Parameter(_linear_init(rng.child("wk"), dim, dim))
        self.bk = Parameter(np.zeros(dim), decay=False)
        self.wv = Parameter(_linear_init(rng.child("wv"), dim, dim))
        self.bv = Parameter(np.zeros(dim), decay=False)
        self.wo = Parameter(_linear_init(rng.child("wo"), dim, dim))
        self.bo = Parameter(np.zeros(dim), decay=False)
        self.ln2_gain = Parameter(np.ones(dim), decay=False)
        self.ln2_bias = Parameter(np.zeros(dim), decay=False)
        self.w1 = Parameter(_linear_init(rng.child("w1"), dim, hidden))
        self.b1 = Parameter(np.zeros(hidden), decay=False)
        self.w2 = Parameter(_linear_init(rng.child("w2"), hidden, dim))
        self.b2 = Parameter(np.zeros(dim), decay=False)

    def _attend(self, x: Tensor) -> Tensor:
        batch, length, dim = x.shape
        head_dim = dim // self.heads
        q = ad.matmul(x, self.wq) + self.bq
        k = ad.matmul(x, self.wk) + self.bk
        v = ad.matmul(x, self.wv) + self.bv

        def split(t: Tensor) -> Tensor:
            t = ad.reshape(t, (batch, length, self.heads, head_dim))
            return ad.swapaxes(t, 1, 2)  # [batch, heads, length, head_dim]

        mixed = ad.scaled_dot_attention(split(q), split(k), split(v))
        mixed = ad.swapaxes(mixed, 1, 2)
        mixed = ad.reshape(mixed, (batch, length, dim))
        return ad.matmul(mixed, self.wo) + self.bo

    def forward(self, x: Tensor) -> Tensor:
        h = x + self._attend(ad.layer_norm(x, self.ln1_gain, self.ln1_bias))
        ff_in = ad.layer_norm(h, self.ln2_gain, self.ln2_bias)
        ff = ad.matmul(ad.gelu(ad.matmul(ff_in, self.w1) + self.b1), self.w2) + self.b2
        return h + ff

    def named_parameters(self, prefix: str):
        for attr in (
            "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv",
            "wo", "bo", "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2",
        ):
            yield f"{prefix}.{attr}", getattr(self, attr)


class UniversalProjection:
    """The single trainable trunk shared by every modality."""

    def __init__(self, config: UPConfig, rng: RngStream):
        self.config = config
        self.blocks = [
            TransformerBlock(config.dim, config.heads, config.mlp_ratio,
                             rng.child(f"block{i}"))
            for i in range(config.depth)
        ]

    def forward(self, x: Tensor | np.ndarray) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim not in (2, 3):
            raise ShapeError(f"expected [L, D] or [K, L, D] input, got {x.shape}")
        if x.shape[-1] != self.config.dim:
            raise ConfigurationError(
                f"input dimension {x.shape[-1]} does not match trunk dim "
                f"{self.config.dim}"
            )
        squeeze = x.ndim == 2
        if squeeze:
            x = ad.reshape(x, (1,) + x.shape)
        for block in self.blocks:
            x = block.forward(x)
        if squeeze:
            x = ad.reshape(x, x.shape[1:])
        return x

    def named_parameters(self):
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"up.blocks.{i}")

    def freeze(self) -> None:
        for _, p in self.named_parameters():
            p.freeze()


class ModalityToken:
    """Learnable tokens identifying one modality inside the trunk."""

    def __init__(self, modality: str, dim: int, count: int, rng: RngStream):
        self.modality = modality
        self.tokens = Parameter(rng.normal((count, dim), scale=TOKEN_INIT_SCALE))


class AlignmentLayer:
    """Per-token two-layer MLP that adapts a late modality's features."""

    def __init__(self, modality: str, dim: int, hidden: int | None = None,
                 rng: RngStream | None = None):
        self.modality = modality
        self.dim = dim
        self.hidden = hidden if hidden is not None else dim
        rng = rng if rng is not None else RngStream(0)
        self.w1 = Parameter(_linear_init(rng.child("w1"), dim, self.hidden))
        self.b1 = Parameter(np.zeros(self.hidden), decay=False)
        self.w2 = Parameter(_linear_init(rng.child("w2"), self.hidden, dim))
        self.b2 = Parameter(np.zeros(dim), decay=False)

    @classmethod
    def identity(cls, modality: str, dim: int) -> "AlignmentLayer":
        """An exact identity map: gelu(x) - gelu(-x) == x for the tanh form."""
        layer = cls(modality, dim, hidden=2 * dim, rng=RngStream(0))
        eye = np.eye(dim)
        layer.w1 = Parameter(np.concatenate([eye, -eye], axis=1))
        layer.b1 = Parameter(np.zeros(2 * dim), decay=False)
        layer.w2 = Parameter(np.concatenate([eye, -eye], axis=0))
        layer.b2 = Parameter(np.zeros(dim), decay=False)
        return layer

    def forward(self, x: Tensor | np.ndarray) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.dim:
            raise ConfigurationError(
                f"alignment layer for {self.modality!r} expects dimension "
                f"{self.dim}, got {x.shape[-1]}"
            )
        return ad.matmul(ad.gelu(ad.matmul(x, self.w1) + self.b1), self.w2) + self.b2

    def named_parameters(self):
        prefix = f"al.{self.modality}"
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2

    def freeze(self) -> None:
        for _, p in self.named_parameters():
            p.freeze()


class PredictionHead:
    """Linear map from a pooled embedding to answer-vocabulary logits."""

    def __init__(self, name: str, dim: int, vocabulary, rng: RngStream | None = None):
        vocabulary = tuple(vocabulary)
        if not vocabulary:
            raise ConfigurationError("prediction head needs a nonempty vocabulary")
        if len(set(vocabulary)) != len(vocabulary):
            raise ConfigurationError("prediction head vocabulary has duplicates")
        self.name = name
        self.vocabulary = vocabulary
        rng = rng if rng is not None else RngStream(0)
        self.weight = Parameter(_linear_init(rng.child("weight"), dim, len(vocabulary)))
        self.bias = Parameter(np.zeros(len(vocabulary)), decay=False)

    def forward(self, pooled: Tensor) -> Tensor:
        squeeze = pooled.ndim == 1
        if squeeze:
            pooled = ad.reshape(pooled, (1,) + pooled.shape)
        logits = ad.matmul(pooled, self.weight) + self.bias
        if squeeze:
            logits = ad.reshape(logits, logits.shape[1:])
        return logits

    def answer(self, index: int) -> str:
        return self.vocabulary[index]

    def index(self, answer: str) -> int:
        try:
            return self.vocabulary.index(answer)
        except ValueError:
            raise ModalityError(
                f"answer {answer!r} not in head vocabulary"
            ) from None

    def named_parameters(self):
        yield f"head.{self.name}.weight", self.weight
        yield f"head.{self.name}.bias", self.bias


@dataclass
class ModalityRegistry:
    """Which modalities are aligned, and which pair the trunk was trained on."""

    stage1_pair: tuple[str, str]
    aligned: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.stage1_pair)) != 2:
            raise ConfigurationError(
                f"stage-1 pair must be two distinct modalities, got {self.stage1_pair}"
            )
        if not self.aligned:
            self.aligned = list(self.stage1_pair)

    def is_stage1(self, modality: str) -> bool:
        return modality in self.stage1_pair

    def require(self, modality: str) -> None:
        if modality not in self.aligned:
            raise ModalityError(
                f"modality {modality!r} is not aligned; registry contains "
                f"{self.aligned}"
            )

    def add(self, modality: str) -> None:
        if modality in self.aligned:
            raise DuplicateModalityError(f"modality {modality!r} already aligned")
        self.aligned.append(modality)


class ModelState:
    """Every learnable piece of the system, with per-parameter freeze flags."""

    def __init__(self, config: UPConfig, registry: ModalityRegistry,
                 up: UniversalProjection, log_tau: Parameter):
        self.config = config
        self.registry = registry
        self.up = up
        self.tokens: dict[str, ModalityToken] = {}
        self.alignment: dict[str, AlignmentLayer] = {}
        self.heads: dict[str, PredictionHead] = {}
        self.log_tau = log_tau
        self.metadata: dict = {}

    @classmethod
    def create(cls, config: UPConfig, stage1_pair: tuple[str, str], seed: int,
               tau_init: float = 0.07) -> "ModelState":
        rng = RngStream(seed)
        registry = ModalityRegistry(stage1_pair=tuple(stage1_pair))
        up = UniversalProjection(config, rng.child("up"))
        log_tau = Parameter(np.log(tau_init), decay=False)
        state = cls(config, registry, up, log_tau)
        for modality in stage1_pair:
            state.tokens[modality] = ModalityToken(
                modality, config.dim, config.token_count,
                rng.child(f"token.{modality}"))
        return state

    def add_modality(self, modality: str, seed: int,
                     al_hidden: int | None = None) -> None:
        """Register a new modality with a fresh token and alignment layer."""
        self.registry.add(modality)
        rng = RngStream(seed)
        self.tokens[modality] = ModalityToken(
            modality, self.config.dim, self.config.token_count,
            rng.child(f"token.{modality}"))
        self.alignment[modality] = AlignmentLayer(
            modality, self.config.dim, al_hidden, rng.child(f"al.{modality}"))

    def named_parameters(self):
        """Canonical (name, parameter) ordering used by optimizer and files."""
        yield from self.up.named_parameters()
        for modality in sorted(self.tokens):
            yield f"token.{modality}", self.tokens[modality].tokens
        for modality in sorted(self.alignment):
            yield from self.alignment[modality].named_parameters()
        for name in sorted(self.heads):
            yield from self.heads[name].named_parameters()
        yield "temperature.log_tau", self.log_tau

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not p.frozen]


def fuse(token: ModalityToken, x: Tensor | np.ndarray, mode: str) -> Tensor:
    """Combine modality tokens with feature tokens.

    addition broadcasts the single token over the sequence (length preserved);
    concatenation prepends the tokens (length N+L); cross_attention reads the
    sequence with the tokens as queries (length N).
    """
    x = ad.as_tensor(x)
    if x.ndim not in (2, 3):
        raise ShapeError(f"expected [L, D] or [K, L, D] features, got {x.shape}")
    count, dim = token.tokens.shape
    if x.shape[-1] != dim:
        raise ShapeError(
            f"feature dimension {x.shape[-1]} does not match token dimension {dim}"
        )
    if x.shape[-2] == 0:
        raise SequenceError("cannot fuse an empty token sequence")
    if mode == FUSION_ADDITION:
        if count != 1:
            raise ConfigurationError(
                f"addition fusion requires a single token, got {count}"
            )
        return x + token.tokens
    if mode == FUSION_CONCATENATION:
        tok = token.tokens
        if x.ndim == 3:
            tok = ad.broadcast_to(tok, (x.shape[0], count, dim))
        return ad.concat([tok, x], axis=-2)
    if mode == FUSION_CROSS_ATTENTION:
        return ad.scaled_dot_attention(token.tokens, x, x)
    raise ConfigurationError(f"unknown fusion mode {mode!r}")


def pool_embed(x_hat: Tensor) -> Tensor:
    """Mean over tokens followed by L2 normalization (unit-norm output)."""
    if x_hat.shape[-2] == 0:
        raise SequenceError("cannot pool an empty token sequence")
    return ad.l2_normalize(ad.tensor_mean(x_hat, axis=-2))


def encode(state: ModelState, modality: str, x: Tensor | np.ndarray) -> Tensor:
    """Embed features of an aligned modality into the shared space.

    The alignment layer applies only to modalities added after the trunk was
    trained; the two original modalities feed the trunk directly.
    """
    state.registry.require(modality)
    x = ad.as_tensor(x)
    if not state.registry.is_stage1(modality):
        layer = state.alignment.get(modality)
        if layer is None:
            raise ConfigurationError(
                f"modality {modality!r} is aligned but has no alignment layer"
            )
        x = layer.forward(x)
    fused = fuse(state.tokens[modality], x, state.config.fusion)
    return pool_embed(state.up.forward(fused))


def vqa_forward(state: ModelState, image_tokens: Tensor | np.ndarray,
                question_tokens: Tensor | np.ndarray,
                head: PredictionHead) -> Tensor:
    """Answer logits for (image, question) inputs.

    Each input is fused with its own modality token (first and second entry
    of the original pair, respectively); the fused sequences are concatenated,
    projected by the trunk, mean-pooled without normalization, and mapped to
    vocabulary logits.
    """
    image_tokens = ad.as_tensor(image_tokens)
    question_tokens = ad.as_tensor(question_tokens)
    if image_tokens.shape[-2] == 0 or question_tokens.shape[-2] == 0:
        raise SequenceError("both input sequences must be nonempty")
    mod_a, mod_b = state.registry.stage1_pair
    fused_a = fuse(state.tokens[mod_a], image_tokens, state.config.fusion)
    fused_b = fuse(state.tokens[mod_b], question_tokens, state.config.fusion)
    joint = state.up.forward(ad.concat([fused_a, fused_b], axis=-2))
    pooled = ad.tensor_mean(joint, axis=-2)
    return head.forward(pooled)
