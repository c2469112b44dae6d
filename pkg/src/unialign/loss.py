"""Contrastive objectives with soft self-similarity targets, plus the
cross-entropy used by the answer-prediction head.

The symmetric alignment loss pairs two embedding batches whose matching
samples sit on the diagonal. Both softmax directions of the cross-modal
similarity matrix are penalized, weighted by soft targets built from the
intra-modality self-similarities so near-duplicates are not treated as hard
negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import BatchError, LabelError
from .rng import RngStream  # noqa: F401  (re-exported convenience for tests)

TAU_MIN = 0.01
TAU_MAX = 1.0
DEFAULT_TAU_INIT = 0.07


class Temperature:
    """Learnable softmax temperature, stored as log(tau).

    tau = exp(log_tau) is clamped to [TAU_MIN, TAU_MAX] before every use;
    the clamp blocks gradients outside the range.
    """

    def __init__(self, init: float = DEFAULT_TAU_INIT):
        if not TAU_MIN <= init <= TAU_MAX:
            raise ValueError(
                f"tau init {init} outside clamp range [{TAU_MIN}, {TAU_MAX}]"
            )
        self.log_tau = Parameter(np.log(init), decay=False)

    @classmethod
    def from_parameter(cls, log_tau: Parameter) -> "Temperature":
        temp = cls.__new__(cls)
        temp.log_tau = log_tau
        return temp

    def tau(self) -> Tensor:
        return ad.clip(ad.exp(self.log_tau), TAU_MIN, TAU_MAX)

    def value(self) -> float:
        tau = float(np.exp(self.log_tau.data.item()))
        return min(max(tau, TAU_MIN), TAU_MAX)


@dataclass
class SimilarityMatrix:
    """Cosine similarities between two equally sized embedding batches."""

    values: Tensor
    row_modality: str = ""
    col_modality: str = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def pairwise_cosine(a: Tensor | np.ndarray, b: Tensor | np.ndarray,
                    row_modality: str = "", col_modality: str = "") -> SimilarityMatrix:
    """Dot products of unit-norm rows: values[i][j] = <a[i], b[j]>."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape[0] != b.shape[0]:
        raise BatchError(
            f"row counts disagree: {a.shape[0]} vs {b.shape[0]}"
        )
    values = ad.matmul(a, ad.swapaxes(b, -1, -2))
    return SimilarityMatrix(values, row_modality, col_modality)


def _values(s) -> Tensor:
    return s.values if isinstance(s, SimilarityMatrix) else ad.as_tensor(s)


def infonce_rowwise(s, tau) -> Tensor:
    """Per-pair loss -log softmax(s/tau) with the softmax over each row.

    The opposite direction is obtained by applying this to the transposed
    similarities and transposing the result back.
    """
    values = _values(s)
    scaled = ad.div(values, tau) if isinstance(tau, Tensor) else ad.mul(values, 1.0 / tau)
    return ad.neg(ad.log_softmax_rows(scaled))


def soft_targets(s_aa, s_bb, tau) -> tuple[Tensor, Tensor]:
    """Target matrices built from intra-modality self-similarities.

    The forward target is the row softmax of (s_aa + s_bb) / (2 tau); the
    reverse target normalizes over the other index, which for symmetric
    self-similarity matrices is the transpose.
    """
    aa, bb = _values(s_aa), _values(s_bb)
    if aa.shape != bb.shape:
        raise BatchError(f"self-similarity shapes disagree: {aa.shape} vs {bb.shape}")
    combined = aa + bb
    scaled = (
        ad.div(combined, ad.mul(tau, 2.0))
        if isinstance(tau, Tensor)
        else ad.mul(combined, 1.0 / (2.0 * tau))
    )
    forward = ad.softmax_rows(scaled)
    return forward, ad.swapaxes(forward, -1, -2)


def _check_batch(emb_a: Tensor, emb_b: Tensor) -> int:
    if emb_a.shape[0] == 0 or emb_b.shape[0] == 0:
        raise BatchError("alignment loss over an empty batch")
    if emb_a.shape != emb_b.shape:
        raise BatchError(f"embedding shapes disagree: {emb_a.shape} vs {emb_b.shape}")
    return emb_a.shape[0]


def weighted_infonce(emb_a: Tensor | np.ndarray, emb_b: Tensor | np.ndarray,
                     temperature: Temperature,
                     targets: tuple[Tensor, Tensor]) -> Tensor:
    """Both softmax directions of the cross-modal similarities, weighted by
    the given (forward, reverse) target matrices and averaged over 2K."""
    emb_a, emb_b = ad.as_tensor(emb_a), ad.as_tensor(emb_b)
    k = _check_batch(emb_a, emb_b)
    tau = temperature.tau()
    cross = pairwise_cosine(emb_a, emb_b).values
    loss_ab = infonce_rowwise(cross, tau)
    loss_ba = ad.swapaxes(infonce_rowwise(ad.swapaxes(cross, -1, -2), tau), -1, -2)
    t_ab, t_ba = targets
    total = ad.tensor_sum(t_ab * loss_ab + t_ba * loss_ba)
    return ad.mul(total, 1.0 / (2.0 * k))


def alignment_loss(emb_a: Tensor | np.ndarray, emb_b: Tensor | np.ndarray,
                   temperature: Temperature,
                   grad_through_targets: bool = False) -> Tensor:
    """Symmetric soft-target contrastive loss over a K-pair batch.

    Expects unit-norm rows. Averages both softmax directions weighted by the
    soft targets and divides by 2K, so values are comparable across batch
    sizes. Targets are constants by default (their role is that of training
    targets); ``grad_through_targets`` lets gradients flow through them
    instead.
    """
    emb_a, emb_b = ad.as_tensor(emb_a), ad.as_tensor(emb_b)
    _check_batch(emb_a, emb_b)
    if grad_through_targets:
        self_a = pairwise_cosine(emb_a, emb_a).values
        self_b = pairwise_cosine(emb_b, emb_b).values
        targets = soft_targets(self_a, self_b, temperature.tau())
    else:
        self_a = Tensor(emb_a.data @ emb_a.data.T)
        self_b = Tensor(emb_b.data @ emb_b.data.T)
        targets = soft_targets(self_a, self_b, temperature.value())
    return weighted_infonce(emb_a, emb_b, temperature, targets)


def cross_entropy(logits: Tensor | np.ndarray, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = ad.as_tensor(logits)
    if logits.ndim != 2:
        raise BatchError(f"expected [B, V] logits, got {logits.shape}")
    batch, vocab = logits.shape
    if batch == 0:
        raise BatchError("cross entropy over an empty batch")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise BatchError(
            f"labels shape {labels.shape} does not match batch size {batch}"
        )
    if labels.min() < 0 or labels.max() >= vocab:
        raise LabelError(
            f"labels must be in [0, {vocab}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    picked = ad.gather_rows(ad.log_softmax_rows(logits), labels)
    return ad.neg(ad.tensor_mean(picked))
