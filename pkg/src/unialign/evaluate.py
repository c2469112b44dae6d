"""Zero-shot classification, cross-modal retrieval metrics, taxonomy-based
answer scoring, and deterministic report files.

Retrieval assumes single-gold diagonal pairing: the correct candidate for
query i is candidate i. Ranking ties break toward the lower candidate index
so every metric is deterministic.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import BatchError, FormatError, VocabularyError
from .loss import SimilarityMatrix

DEFAULT_WUPS_THRESHOLD = 0.9


def _matrix(sim) -> np.ndarray:
    if isinstance(sim, SimilarityMatrix):
        return np.asarray(sim.values.data, dtype=np.float64)
    values = getattr(sim, "data", sim)
    return np.asarray(values, dtype=np.float64)


def zero_shot_classify(query_emb, class_embs, tau: float
                       ) -> tuple[np.ndarray, int]:
    """Class probabilities and argmax for one unit-norm query embedding.

    Probabilities are softmax(cosines / tau); the prediction is the argmax
    with ties broken toward the lower class index. The argmax is invariant
    to tau.
    """
    query = np.asarray(getattr(query_emb, "data", query_emb), dtype=np.float64)
    classes = np.asarray(getattr(class_embs, "data", class_embs),
                         dtype=np.float64)
    if classes.ndim != 2 or classes.shape[0] == 0:
        raise BatchError(f"need a nonempty [C, D] class matrix, got {classes.shape}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    scores = classes @ query
    scaled = scores / tau
    scaled -= scaled.max()
    e = np.exp(scaled)
    probs = e / e.sum()
    return probs, int(np.argmax(scores))


def gold_ranks(sim) -> np.ndarray:
    """1-based rank of the diagonal candidate for every query row."""
    values = _matrix(sim)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise BatchError(
            f"diagonal pairing needs a square similarity matrix, got "
            f"{values.shape}")
    order = np.argsort(-values, axis=1, kind="stable")
    k = values.shape[0]
    return np.argmax(order == np.arange(k)[:, None], axis=1) + 1


def retrieval_metrics(sim, ks: Sequence[int] = (1, 5)) -> dict[str, float]:
    """P@1, R@k, mAP, and mean rank for a diagonally paired similarity matrix.

    With a single gold per query, average precision is 1/rank and P@1 equals
    R@1.
    """
    ranks = gold_ranks(sim)
    metrics = {"P@1": float(np.mean(ranks <= 1))}
    for k in sorted(set(int(k) for k in ks)):
        metrics[f"R@{k}"] = float(np.mean(ranks <= k))
    metrics["mAP"] = float(np.mean(1.0 / ranks))
    metrics["MnR"] = float(np.mean(ranks))
    return metrics


class TaxonomyGraph:
    """A rooted tree of answer strings; the root has depth 1."""

    def __init__(self, parents: Mapping[str, str | None]):
        roots = [n for n, p in parents.items() if p is None]
        if len(roots) != 1:
            raise FormatError(
                f"taxonomy needs exactly one root, found {sorted(roots)}")
        self.root = roots[0]
        self.parents = dict(parents)
        self._depths: dict[str, int] = {}
        for node in self.parents:
            self._chain(node)  # validates reachability and acyclicity

    @classmethod
    def from_file(cls, path) -> "TaxonomyGraph":
        """Parse child<TAB>parent lines; '#' comments are ignored."""
        parents: dict[str, str | None] = {}
        for lineno, line in enumerate(
                Path(path).read_text(encoding="utf-8").splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = stripped.split("\t")
            if len(fields) != 2:
                raise FormatError(
                    f"{path}:{lineno}: expected 'child<TAB>parent'")
            child, parent = fields
            if child in parents and parents[child] != parent:
                raise FormatError(
                    f"{path}:{lineno}: node {child!r} has two parents")
            parents[child] = parent
            parents.setdefault(parent, None)
        return cls(parents)

    def __contains__(self, node: str) -> bool:
        return node in self.parents

    def _chain(self, node: str) -> list[str]:
        """Path from node up to the root, inclusive."""
        chain = [node]
        seen = {node}
        while self.parents[chain[-1]] is not None:
            parent = self.parents[chain[-1]]
            if parent not in self.parents:
                raise FormatError(f"node {parent!r} is missing from the taxonomy")
            if parent in seen:
                raise FormatError(f"taxonomy contains a cycle through {parent!r}")
            seen.add(parent)
            chain.append(parent)
        return chain

    def depth(self, node: str) -> int:
        if node not in self.parents:
            raise VocabularyError(f"node {node!r} not in taxonomy")
        if node not in self._depths:
            self._depths[node] = len(self._chain(node))
        return self._depths[node]

    def lowest_common_ancestor(self, a: str, b: str) -> str:
        for node in (a, b):
            if node not in self.parents:
                raise VocabularyError(f"node {node!r} not in taxonomy")
        ancestors_a = set(self._chain(a))
        for node in self._chain(b):
            if node in ancestors_a:
                return node
        return self.root


def wup(a: str, b: str, tax: TaxonomyGraph) -> float:
    """Wu-Palmer similarity: 2 * depth(lca) / (depth(a) + depth(b))."""
    lca = tax.lowest_common_ancestor(a, b)
    return 2.0 * tax.depth(lca) / (tax.depth(a) + tax.depth(b))


def wups_score(predictions: Sequence[str], golds: Sequence[str],
               tax: TaxonomyGraph, threshold: float = DEFAULT_WUPS_THRESHOLD,
               unknown_score: float | None = None) -> float:
    """Mean thresholded Wu-Palmer similarity over a batch.

    Per-sample scores below the threshold are scaled by 0.1. Unknown strings
    raise unless ``unknown_score`` maps them to a fixed value.
    """
    if len(predictions) != len(golds):
        raise BatchError(
            f"{len(predictions)} predictions vs {len(golds)} golds")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    if not predictions:
        raise BatchError("wups over an empty batch")
    total = 0.0
    for pred, gold in zip(predictions, golds):
        if unknown_score is not None and (pred not in tax or gold not in tax):
            score = unknown_score
        else:
            score = wup(pred, gold, tax)
        if score < threshold:
            score *= 0.1
        total += score
    return total / len(predictions)


def accuracy(predictions: Sequence[str], golds: Sequence[str]) -> float:
    if len(predictions) != len(golds):
        raise BatchError(
            f"{len(predictions)} predictions vs {len(golds)} golds")
    if not predictions:
        raise BatchError("accuracy over an empty batch")
    hits = sum(p == g for p, g in zip(predictions, golds))
    return hits / len(predictions)


def macro_f1(predictions: Sequence[str], golds: Sequence[str],
             labels: Sequence[str] | None = None) -> float:
    """Unweighted mean of per-class F1 over the label set.

    Defaults to the sorted union of labels seen in predictions and golds; a
    class with no predictions and no golds would be undefined, so the union
    avoids that case unless labels are passed explicitly (those count as 0).
    """
    if len(predictions) != len(golds):
        raise BatchError(
            f"{len(predictions)} predictions vs {len(golds)} golds")
    if labels is None:
        labels = sorted(set(predictions) | set(golds))
    scores = []
    for label in labels:
        tp = sum(p == label and g == label for p, g in zip(predictions, golds))
        fp = sum(p == label and g != label for p, g in zip(predictions, golds))
        fn = sum(p != label and g == label for p, g in zip(predictions, golds))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    if not scores:
        raise BatchError("macro F1 needs at least one label")
    return float(np.mean(scores))


def emit_report(rows: Iterable[tuple[str, str, float]], path) -> None:
    """Write metric<TAB>split<TAB>value lines, sorted, at full float precision.

    17 significant digits round-trip any float64 exactly, so rerunning on the
    same inputs reproduces the file byte for byte.
    """
    ordered = sorted(rows, key=lambda r: (r[0], r[1]))
    lines = [f"{name}\t{split}\t{format(float(value), '.17g')}"
             for name, split, value in ordered]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path) -> dict[tuple[str, str], float]:
    """Parse a report file back into {(metric, split): value}."""
    out: dict[tuple[str, str], float] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, split, value = line.split("\t")
        out[(name, split)] = float(value)
    return out
