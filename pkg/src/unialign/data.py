"""Frozen feature extractors, synthetic paired worlds, feature-file and
manifest I/O, and deterministic batch iteration.

Synthetic worlds draw a shared latent per sample; each modality sees that
latent through its own fixed random two-layer tanh map, so samples that share
an index are true cross-modal pairs. Real features arrive precomputed through
the binary feature-file format instead.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BatchError,
    ConfigurationError,
    CorruptionError,
    FormatError,
    VersionError,
)
from .rng import RngStream, derive_seed

FEATURE_MAGIC = b"OEFT"
FEATURE_VERSION = 1

_HEADER_FIXED = struct.Struct("<4sH")  # magic, version
_CHECKSUM = struct.Struct("<Q")


def _body_checksum(body: bytes) -> int:
    return int.from_bytes(hashlib.sha256(body).digest()[:8], "little")


# ---------------------------------------------------------------------------
# frozen encoders and synthetic worlds


@dataclass(frozen=True)
class ModalitySpec:
    """Shape and seed of one modality's frozen encoder."""

    name: str
    seq_len: int
    dim: int
    seed: int

    def __post_init__(self):
        if self.seq_len < 1 or self.dim < 1:
            raise ConfigurationError(
                f"modality {self.name!r} needs positive seq_len and dim"
            )


@dataclass(frozen=True)
class SyntheticWorldConfig:
    """A shared-latent world over several modalities."""

    latent_dim: int
    modalities: tuple[ModalitySpec, ...]
    noise_std: float = 0.0
    class_count: int | None = None

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be >= 1")
        if not self.modalities:
            raise ConfigurationError("world needs at least one modality")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate modality names: {names}")

    def spec(self, name: str) -> ModalitySpec:
        for m in self.modalities:
            if m.name == name:
                return m
        raise ConfigurationError(f"no modality {name!r} in world config")


class FrozenEncoder:
    """A fixed feature map standing in for a pretrained extractor.

    Synthetic encoders are two-layer tanh maps with weights drawn once from a
    seeded Gaussian scaled by 1/sqrt(fan-in); the arrays are marked read-only
    so the freeze contract is enforced by numpy itself.
    """

    def __init__(self, modality: str, out_len: int, out_dim: int, kind: str,
                 weights: tuple[np.ndarray, ...] = ()):
        self.modality = modality
        self.out_len = out_len
        self.out_dim = out_dim
        self.kind = kind
        self.weights = weights
        for w in weights:
            w.setflags(write=False)

    @classmethod
    def synthetic(cls, spec: ModalitySpec, latent_dim: int) -> "FrozenEncoder":
        rng = RngStream(spec.seed)
        hidden = max(32, 2 * latent_dim)
        out = spec.seq_len * spec.dim
        w1 = rng.normal((latent_dim, hidden), scale=1.0 / np.sqrt(latent_dim))
        b1 = rng.normal((hidden,), scale=0.1)
        w2 = rng.normal((hidden, out), scale=1.0 / np.sqrt(hidden))
        b2 = rng.normal((out,), scale=0.1)
        return cls(spec.name, spec.seq_len, spec.dim, "synthetic", (w1, b1, w2, b2))

    def encode(self, latents: np.ndarray) -> np.ndarray:
        """Map latent vectors [*, Z] to token sequences [*, L, D]."""
        if self.kind != "synthetic":
            raise ConfigurationError(
                f"encoder for {self.modality!r} has no synthetic map"
            )
        w1, b1, w2, b2 = self.weights
        latents = np.asarray(latents, dtype=np.float64)
        flat = np.tanh(np.tanh(latents @ w1 + b1) @ w2 + b2)
        return flat.reshape(latents.shape[:-1] + (self.out_len, self.out_dim))

    def parameter_bytes(self) -> bytes:
        return b"".join(w.tobytes() for w in self.weights)


def class_anchors(class_count: int, latent_dim: int, seed: int) -> np.ndarray:
    """Seeded unit directions that partition latent space into classes."""
    raw = RngStream(derive_seed(seed, "class-anchors")).normal(
        (class_count, latent_dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def assign_classes(latents: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Index of the nearest anchor direction for each latent vector."""
    norms = np.linalg.norm(latents, axis=-1, keepdims=True)
    return np.argmax((latents / norms) @ anchors.T, axis=-1)


def class_label(index: int) -> str:
    return f"class_{index}"


@dataclass
class PairedDataset:
    """Index-aligned feature arrays, one [count, L, D] block per modality."""

    modalities: tuple[str, ...]
    features: dict[str, np.ndarray]
    labels: tuple[str, ...] | None = None
    latents: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        counts = {m: self.features[m].shape[0] for m in self.modalities}
        if len(set(counts.values())) > 1:
            raise BatchError(f"modalities disagree on sample count: {counts}")

    def __len__(self) -> int:
        return self.features[self.modalities[0]].shape[0]

    def subset(self, indices) -> "PairedDataset":
        indices = np.asarray(indices)
        return PairedDataset(
            self.modalities,
            {m: self.features[m][indices] for m in self.modalities},
            tuple(self.labels[i] for i in indices) if self.labels else None,
            self.latents[indices] if self.latents is not None else None,
            self.split,
        )

    def select(self, modalities) -> "PairedDataset":
        """Restrict to a subset of modalities, keeping the pairing."""
        modalities = tuple(modalities)
        return PairedDataset(
            modalities,
            {m: self.features[m] for m in modalities},
            self.labels,
            self.latents,
            self.split,
        )


@dataclass
class PairedBatch:
    """K matched samples; index i is a true pair across all modalities."""

    indices: np.ndarray
    features: dict[str, np.ndarray]
    labels: tuple[str, ...] | None = None

    @property
    def size(self) -> int:
        return len(self.indices)


def synth_world(config: SyntheticWorldConfig, count: int, seed: int,
                anchor_seed: int | None = None) -> PairedDataset:
    """Draw a paired dataset from a shared-latent world.

    Latents come from the given seed; encoder weights come only from each
    modality's own seed, so splits drawn with different seeds share their
    encoders. ``anchor_seed`` pins the class anchors of labeled worlds
    across splits (defaults to ``seed``).
    """
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    world_rng = RngStream(seed)
    latents = world_rng.child("latents").normal((count, config.latent_dim))
    features: dict[str, np.ndarray] = {}
    for spec in config.modalities:
        encoder = FrozenEncoder.synthetic(spec, config.latent_dim)
        inputs = latents
        if config.noise_std > 0:
            noise = world_rng.child(f"noise.{spec.name}").normal(
                (count, config.latent_dim), scale=config.noise_std)
            inputs = latents + noise
        features[spec.name] = encoder.encode(inputs)
    labels = None
    if config.class_count:
        anchors = class_anchors(
            config.class_count, config.latent_dim,
            seed if anchor_seed is None else anchor_seed)
        labels = tuple(class_label(i) for i in assign_classes(latents, anchors))
    return PairedDataset(
        tuple(m.name for m in config.modalities), features, labels, latents)


def prompt_features(config: SyntheticWorldConfig, modality: str,
                    anchor_seed: int) -> np.ndarray:
    """One feature sequence per class: the class anchor pushed through the
    modality's encoder at a typical latent magnitude."""
    if not config.class_count:
        raise ConfigurationError("prompt features need a labeled world")
    spec = config.spec(modality)
    anchors = class_anchors(config.class_count, config.latent_dim, anchor_seed)
    encoder = FrozenEncoder.synthetic(spec, config.latent_dim)
    return encoder.encode(anchors * np.sqrt(config.latent_dim))


@dataclass
class VqaDataset:
    """(image, question) feature pairs with one answer string per sample."""

    image_modality: str
    question_modality: str
    image_features: np.ndarray
    question_features: np.ndarray
    answers: tuple[str, ...]
    vocabulary: tuple[str, ...]
    split: str = "train"

    def __post_init__(self):
        n = self.image_features.shape[0]
        if self.question_features.shape[0] != n or len(self.answers) != n:
            raise BatchError("images, questions, and answers disagree in count")
        missing = set(self.answers) - set(self.vocabulary)
        if missing:
            raise BatchError(f"answers missing from vocabulary: {sorted(missing)}")

    def __len__(self) -> int:
        return self.image_features.shape[0]

    @property
    def answer_indices(self) -> np.ndarray:
        lookup = {a: i for i, a in enumerate(self.vocabulary)}
        return np.array([lookup[a] for a in self.answers], dtype=np.int64)


def answer_label(index: int) -> str:
    return f"answer_{index}"


def synth_vqa_world(config: SyntheticWorldConfig, count: int, seed: int,
                    anchor_seed: int | None = None) -> VqaDataset:
    """A world where image and question latents jointly pick one answer.

    The answer is the nearest anchor direction of the concatenated latent
    pair, so neither input alone determines it.
    """
    if len(config.modalities) != 2:
        raise ConfigurationError("a vqa world needs exactly two modalities")
    if not config.class_count:
        raise ConfigurationError("a vqa world needs class_count answers")
    img_spec, q_spec = config.modalities
    world_rng = RngStream(seed)
    z_img = world_rng.child("latents.image").normal((count, config.latent_dim))
    z_q = world_rng.child("latents.question").normal((count, config.latent_dim))
    anchors = class_anchors(
        config.class_count, 2 * config.latent_dim,
        seed if anchor_seed is None else anchor_seed)
    answers = tuple(
        answer_label(i)
        for i in assign_classes(np.concatenate([z_img, z_q], axis=1), anchors)
    )
    vocabulary = tuple(answer_label(i) for i in range(config.class_count))
    return VqaDataset(
        img_spec.name, q_spec.name,
        FrozenEncoder.synthetic(img_spec, config.latent_dim).encode(z_img),
        FrozenEncoder.synthetic(q_spec, config.latent_dim).encode(z_q),
        answers, vocabulary)


def batch_iter(dataset: PairedDataset, k: int, seed: int, epoch: int = 0,
               drop_last: bool = False):
    """Yield shuffled batches; order is deterministic given (seed, epoch)."""
    if k < 1:
        raise ConfigurationError("batch size must be >= 1")
    n = len(dataset)
    if k > n and drop_last:
        warnings.warn(
            f"batch size {k} exceeds dataset size {n} with drop_last; "
            "iteration is empty", stacklevel=2)
        return
    order = RngStream(derive_seed(seed, f"epoch{epoch}")).permutation(n)
    for start in range(0, n, k):
        indices = order[start:start + k]
        if drop_last and len(indices) < k:
            return
        yield PairedBatch(
            indices,
            {m: dataset.features[m][indices] for m in dataset.modalities},
            tuple(dataset.labels[i] for i in indices) if dataset.labels else None,
        )


# ---------------------------------------------------------------------------
# feature files


@dataclass
class FeatureFile:
    """Decoded contents of one binary feature file."""

    modality: str
    features: np.ndarray  # [count, L, D] float64 (stored as float32)

    def __len__(self) -> int:
        return self.features.shape[0]


def save_features(path, modality: str, features) -> None:
    """Write token sequences as a checksummed little-endian binary file.

    Values are stored at 32-bit precision. The trailing checksum covers every
    preceding byte, so any single-byte corruption is detectable.
    """
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise FormatError(f"features must be [count, L, D], got shape {arr.shape}")
    count, seq_len, dim = arr.shape
    name = modality.encode("utf-8")
    body = bytearray()
    body += _HEADER_FIXED.pack(FEATURE_MAGIC, FEATURE_VERSION)
    body += struct.pack("<H", len(name)) + name
    body += struct.pack("<III", count, seq_len, dim)
    body += arr.astype("<f4").tobytes()
    body += _CHECKSUM.pack(_body_checksum(bytes(body)))
    Path(path).write_bytes(bytes(body))


def load_features(path) -> FeatureFile:
    """Read a feature file back, verifying structure and checksum."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_FIXED.size:
        raise CorruptionError(f"{path}: truncated header", offset=len(raw))
    magic, version = _HEADER_FIXED.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise VersionError(
            f"{path}: unsupported feature-file version {version}"
        )
    offset = _HEADER_FIXED.size
    if len(raw) < offset + 2:
        raise CorruptionError(f"{path}: truncated modality name", offset=len(raw))
    (name_len,) = struct.unpack_from("<H", raw, offset)
    offset += 2
    if len(raw) < offset + name_len + 12:
        raise CorruptionError(f"{path}: truncated header fields", offset=len(raw))
    modality = raw[offset:offset + name_len].decode("utf-8")
    offset += name_len
    count, seq_len, dim = struct.unpack_from("<III", raw, offset)
    offset += 12
    payload = count * seq_len * dim * 4
    expected = offset + payload + _CHECKSUM.size
    if len(raw) != expected:
        raise CorruptionError(
            f"{path}: file is {len(raw)} bytes but the header implies "
            f"{expected}", offset=min(len(raw), expected))
    (stored,) = _CHECKSUM.unpack_from(raw, expected - _CHECKSUM.size)
    actual = _body_checksum(raw[: expected - _CHECKSUM.size])
    if stored != actual:
        raise CorruptionError(
            f"{path}: checksum mismatch", offset=expected - _CHECKSUM.size)
    values = np.frombuffer(
        raw, dtype="<f4", count=count * seq_len * dim, offset=offset)
    features = values.astype(np.float64).reshape(count, seq_len, dim)
    return FeatureFile(modality, features)


# ---------------------------------------------------------------------------
# manifests


MANIFEST_KINDS = ("pair", "labeled", "vqa")


@dataclass
class DatasetManifest:
    """Text index tying feature files (and labels) into a dataset split."""

    kind: str
    modalities: tuple[str, ...]
    split: str
    records: tuple[tuple[str, ...], ...]
    base_dir: Path

    def resolve(self, name: str) -> Path:
        return (self.base_dir / name).resolve()


def save_manifest(path, kind: str, modalities, split: str, records) -> None:
    if kind not in MANIFEST_KINDS:
        raise FormatError(f"unknown manifest kind {kind!r}")
    lines = ["# unialign dataset manifest"]
    lines.append("\t".join([kind, *modalities, split]))
    for record in records:
        lines.append("\t".join(str(f) for f in record))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


_RECORD_WIDTH = {"pair": 2, "labeled": 2, "vqa": 3}
_MODALITY_COUNT = {"pair": 2, "labeled": 1, "vqa": 2}


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    header: tuple[str, ...] | None = None
    records: list[tuple[str, ...]] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = tuple(stripped.split("\t"))
        if header is None:
            header = fields
            continue
        records.append(fields)
    if header is None:
        raise FormatError(f"{path}: manifest has no header line")
    kind = header[0]
    if kind not in MANIFEST_KINDS:
        raise FormatError(f"{path}: unknown manifest kind {kind!r}")
    want = _MODALITY_COUNT[kind]
    if len(header) != want + 2:
        raise FormatError(
            f"{path}: header needs kind, {want} modality name(s), and split"
        )
    modalities = header[1:1 + want]
    split = header[-1]
    width = _RECORD_WIDTH[kind]
    for i, record in enumerate(records):
        if len(record) != width:
            raise FormatError(
                f"{path}: record {i + 1} has {len(record)} fields, expected {width}"
            )
    return DatasetManifest(kind, modalities, split, tuple(records), path.parent)


def _load_shard(manifest: DatasetManifest, name: str, modality: str) -> np.ndarray:
    path = manifest.resolve(name)
    if not path.exists():
        raise FormatError(f"manifest references missing file {path}")
    shard = load_features(path)
    if shard.modality != modality:
        raise FormatError(
            f"{path} holds modality {shard.modality!r}, manifest expects "
            f"{modality!r}")
    return shard.features


def _stack_shards(shards: list[np.ndarray], what: str) -> np.ndarray:
    shapes = {s.shape[1:] for s in shards}
    if len(shapes) > 1:
        raise FormatError(f"{what}: shards disagree on token shape: {shapes}")
    return np.concatenate(shards, axis=0)


def load_paired_dataset(manifest: DatasetManifest) -> PairedDataset:
    """Materialize a pair manifest; pairing is record order within shards."""
    if manifest.kind != "pair":
        raise FormatError(f"expected a pair manifest, got {manifest.kind!r}")
    mod_a, mod_b = manifest.modalities
    a_shards, b_shards = [], []
    for name_a, name_b in manifest.records:
        fa = _load_shard(manifest, name_a, mod_a)
        fb = _load_shard(manifest, name_b, mod_b)
        if fa.shape[0] != fb.shape[0]:
            raise BatchError(
                f"paired shards {name_a} and {name_b} differ in record count: "
                f"{fa.shape[0]} vs {fb.shape[0]}")
        a_shards.append(fa)
        b_shards.append(fb)
    features = {
        mod_a: _stack_shards(a_shards, mod_a),
        mod_b: _stack_shards(b_shards, mod_b),
    }
    return PairedDataset((mod_a, mod_b), features, split=manifest.split)


def load_labeled_dataset(manifest: DatasetManifest) -> tuple[np.ndarray, tuple[str, ...], str]:
    """Materialize a labeled manifest: every record in a shard shares the
    shard's label. Returns (features, labels, modality)."""
    if manifest.kind != "labeled":
        raise FormatError(f"expected a labeled manifest, got {manifest.kind!r}")
    (modality,) = manifest.modalities
    shards, labels = [], []
    for name, label in manifest.records:
        feats = _load_shard(manifest, name, modality)
        shards.append(feats)
        labels.extend([label] * feats.shape[0])
    return _stack_shards(shards, modality), tuple(labels), modality


def load_vqa_dataset(manifest: DatasetManifest,
                     vocabulary: tuple[str, ...] | None = None) -> VqaDataset:
    """Materialize a vqa manifest; the third record field names a text file
    with one answer per feature record."""
    if manifest.kind != "vqa":
        raise FormatError(f"expected a vqa manifest, got {manifest.kind!r}")
    mod_img, mod_q = manifest.modalities
    img_shards, q_shards, answers = [], [], []
    for name_img, name_q, name_ans in manifest.records:
        fi = _load_shard(manifest, name_img, mod_img)
        fq = _load_shard(manifest, name_q, mod_q)
        ans_path = manifest.resolve(name_ans)
        if not ans_path.exists():
            raise FormatError(f"manifest references missing file {ans_path}")
        shard_answers = [
            line.strip() for line in
            ans_path.read_text(encoding="utf-8").splitlines() if line.strip()
        ]
        if not fi.shape[0] == fq.shape[0] == len(shard_answers):
            raise BatchError(
                f"vqa shard counts disagree: {fi.shape[0]} images, "
                f"{fq.shape[0]} questions, {len(shard_answers)} answers")
        img_shards.append(fi)
        q_shards.append(fq)
        answers.extend(shard_answers)
    if vocabulary is None:
        vocabulary = tuple(sorted(set(answers)))
    return VqaDataset(
        mod_img, mod_q,
        _stack_shards(img_shards, mod_img),
        _stack_shards(q_shards, mod_q),
        tuple(answers), vocabulary, split=manifest.split)
