"""Synthetic open-set identity data and the evaluation protocols.

Identities are unit vectors in a latent space; samples perturb the identity
vector with Gaussian noise, renormalize, and render to an image through a
fixed random two-layer nonlinear map. Train, test, and distractor identities
are disjoint, so test-time evaluation exercises only the embedding geometry,
never the training classifier.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .rng import substream

CACHE_MAGIC = b"STND"
CACHE_VERSION = 1


@dataclass
class SyntheticIdentityDataset:
    images: np.ndarray  # [N, size, size, 1], per-image zero mean / unit variance
    labels: np.ndarray  # [N] global class id
    train_classes: np.ndarray
    test_classes: np.ndarray
    distractor_classes: np.ndarray
    params: dict
    latents: np.ndarray | None = None  # kept in memory for diagnostics only

    @property
    def num_samples(self) -> int:
        return int(self.images.shape[0])

    def indices_of(self, classes: np.ndarray) -> np.ndarray:
        mask = np.isin(self.labels, classes)
        return np.nonzero(mask)[0]

    @property
    def train_indices(self) -> np.ndarray:
        return self.indices_of(self.train_classes)

    @property
    def test_indices(self) -> np.ndarray:
        return self.indices_of(self.test_classes)

    @property
    def distractor_indices(self) -> np.ndarray:
        return self.indices_of(self.distractor_classes)


# Gain of the renderer's hidden layer. The squared tanh is even, so images
# carry no linear trace of the latent code: recovering identity geometry
# needs multiplicative feature extraction, which is what gives network
# capacity something to buy.
RENDERER_GAIN = 2.0


def _render(latents: np.ndarray, w1, w2, size: int) -> np.ndarray:
    """Fixed nonlinear map latent -> image, then per-image standardization."""
    hidden = np.tanh(RENDERER_GAIN * (latents @ w1)) ** 2
    flat = hidden @ w2
    flat = flat - flat.mean(axis=1, keepdims=True)
    std = np.maximum(flat.std(axis=1, keepdims=True), 1e-8)
    flat = flat / std
    return flat.reshape(-1, size, size, 1)


def generate_dataset(
    seed: int,
    num_train_classes: int = 64,
    num_test_classes: int = 16,
    samples_per_class: int = 20,
    latent_dim: int = 16,
    noise_sigma: float = 0.15,
    image_size: int = 16,
    num_distractors: int = 500,
    renderer_hidden: int = 64,
) -> SyntheticIdentityDataset:
    """Deterministic synthetic identity dataset.

    Class ids are assigned contiguously: train classes first (so a train label
    doubles as the classifier index), then test classes, then one distractor
    class per distractor sample.
    """
    if num_train_classes < 2 or num_test_classes < 2:
        raise ConfigError("need at least 2 train and 2 test classes")
    if samples_per_class < 2:
        raise ConfigError("samples_per_class must be >= 2")
    if latent_dim < 2 or image_size < 2 or renderer_hidden < 1:
        raise ConfigError("degenerate latent/image/renderer dimensions")
    if noise_sigma < 0 or num_distractors < 0:
        raise ConfigError("noise_sigma and num_distractors must be >= 0")

    params = {
        "seed": int(seed),
        "num_train_classes": num_train_classes,
        "num_test_classes": num_test_classes,
        "samples_per_class": samples_per_class,
        "latent_dim": latent_dim,
        "noise_sigma": noise_sigma,
        "image_size": image_size,
        "num_distractors": num_distractors,
        "renderer_hidden": renderer_hidden,
    }

    rng_renderer = substream(seed, "data-renderer")
    w1 = rng_renderer.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(latent_dim, renderer_hidden))
    w2 = rng_renderer.normal(
        0.0, 1.0 / np.sqrt(renderer_hidden), size=(renderer_hidden, image_size * image_size)
    )

    n_classes = num_train_classes + num_test_classes + num_distractors
    rng_proto = substream(seed, "data-prototypes")
    prototypes = rng_proto.normal(size=(n_classes, latent_dim))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)

    rng_noise = substream(seed, "data-noise")
    rows_latent, rows_label = [], []
    for class_id in range(num_train_classes + num_test_classes):
        noise = rng_noise.normal(size=(samples_per_class, latent_dim))
        latent = prototypes[class_id] + noise_sigma * noise
        latent /= np.linalg.norm(latent, axis=1, keepdims=True)
        rows_latent.append(latent)
        rows_label.append(np.full(samples_per_class, class_id, dtype=np.int64))
    first_distractor = num_train_classes + num_test_classes
    for class_id in range(first_distractor, n_classes):
        noise = rng_noise.normal(size=(1, latent_dim))
        latent = prototypes[class_id] + noise_sigma * noise
        latent /= np.linalg.norm(latent, axis=1, keepdims=True)
        rows_latent.append(latent)
        rows_label.append(np.array([class_id], dtype=np.int64))

    latents = np.concatenate(rows_latent, axis=0)
    labels = np.concatenate(rows_label, axis=0)
    images = _render(latents, w1, w2, image_size)

    return SyntheticIdentityDataset(
        images=images,
        labels=labels,
        train_classes=np.arange(num_train_classes, dtype=np.int64),
        test_classes=np.arange(num_train_classes, first_distractor, dtype=np.int64),
        distractor_classes=np.arange(first_distractor, n_classes, dtype=np.int64),
        params=params,
        latents=latents,
    )


# -- evaluation protocols ------------------------------------------------------


@dataclass
class VerificationProtocol:
    """Balanced same/different pairs over test-class samples, in k folds."""

    index_a: np.ndarray
    index_b: np.ndarray
    same: np.ndarray  # bool
    fold: np.ndarray
    folds: int

    @property
    def num_pairs(self) -> int:
        return int(self.index_a.shape[0])


@dataclass
class IdentificationProtocol:
    """One gallery enrollment per test class plus distractors; rest are probes."""

    gallery_indices: np.ndarray
    gallery_classes: np.ndarray
    probe_indices: np.ndarray
    probe_classes: np.ndarray


def build_verification_protocol(
    dataset: SyntheticIdentityDataset,
    pairs_per_side: int = 300,
    folds: int = 10,
    seed: int = 0,
) -> VerificationProtocol:
    if folds < 2:
        raise ConfigError("folds must be >= 2")
    if pairs_per_side % folds != 0:
        raise ConfigError("pairs_per_side must be divisible by folds")
    rng = substream(seed, "protocol-verification")

    by_class = {
        int(c): dataset.indices_of(np.array([c])) for c in dataset.test_classes
    }
    positives = []
    for c, idx in by_class.items():
        for i in range(len(idx)):
            for j in range(i + 1, len(idx)):
                positives.append((idx[i], idx[j]))
    if len(positives) < pairs_per_side:
        raise ConfigError(
            f"only {len(positives)} within-class pairs available, need {pairs_per_side}"
        )
    positives = np.array(positives, dtype=np.int64)
    order = rng.permutation(len(positives))[:pairs_per_side]
    positives = positives[order]

    test_idx = dataset.test_indices
    test_labels = dataset.labels[test_idx]
    counts = np.bincount(test_labels - test_labels.min())
    total = len(test_idx)
    max_cross = (total * (total - 1)) // 2 - sum(c * (c - 1) // 2 for c in counts)
    if max_cross < pairs_per_side:
        raise ConfigError(
            f"only {max_cross} cross-class pairs available, need {pairs_per_side}"
        )
    negatives = []
    seen = set()
    while len(negatives) < pairs_per_side:
        a, b = rng.choice(len(test_idx), size=2, replace=False)
        if test_labels[a] == test_labels[b]:
            continue
        key = (min(test_idx[a], test_idx[b]), max(test_idx[a], test_idx[b]))
        if key in seen:
            continue
        seen.add(key)
        negatives.append(key)
    negatives = np.array(negatives, dtype=np.int64)

    index_a = np.concatenate([positives[:, 0], negatives[:, 0]])
    index_b = np.concatenate([positives[:, 1], negatives[:, 1]])
    same = np.concatenate(
        [np.ones(pairs_per_side, dtype=bool), np.zeros(pairs_per_side, dtype=bool)]
    )
    fold = np.concatenate(
        [np.arange(pairs_per_side) % folds, np.arange(pairs_per_side) % folds]
    )
    order = np.argsort(fold, kind="stable")
    return VerificationProtocol(
        index_a=index_a[order],
        index_b=index_b[order],
        same=same[order],
        fold=fold[order],
        folds=folds,
    )


def build_identification_protocol(
    dataset: SyntheticIdentityDataset, seed: int = 0
) -> IdentificationProtocol:
    rng = substream(seed, "protocol-identification")
    gallery_idx, gallery_cls, probe_idx, probe_cls = [], [], [], []
    for c in dataset.test_classes:
        idx = dataset.indices_of(np.array([c]))
        enrolled = idx[rng.integers(0, len(idx))]
        gallery_idx.append(enrolled)
        gallery_cls.append(int(c))
        for other in idx:
            if other != enrolled:
                probe_idx.append(other)
                probe_cls.append(int(c))
    for c in dataset.distractor_classes:
        idx = dataset.indices_of(np.array([c]))
        gallery_idx.extend(idx.tolist())
        gallery_cls.extend([int(c)] * len(idx))
    return IdentificationProtocol(
        gallery_indices=np.array(gallery_idx, dtype=np.int64),
        gallery_classes=np.array(gallery_cls, dtype=np.int64),
        probe_indices=np.array(probe_idx, dtype=np.int64),
        probe_classes=np.array(probe_cls, dtype=np.int64),
    )


# -- on-disk formats -----------------------------------------------------------


def save_dataset_cache(dataset: SyntheticIdentityDataset, path: str | Path) -> Path:
    """Binary cache: header with generation params, then images and labels."""
    header = json.dumps(dataset.params, sort_keys=True, separators=(",", ":")).encode("utf-8")
    images = np.ascontiguousarray(dataset.images, dtype="<f8")
    labels = np.ascontiguousarray(dataset.labels, dtype="<i8")
    parts = [
        CACHE_MAGIC,
        struct.pack("<I", CACHE_VERSION),
        struct.pack("<I", len(header)),
        header,
        struct.pack("<4I", *images.shape),
        images.tobytes(),
        struct.pack("<I", labels.shape[0]),
        labels.tobytes(),
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return path


def load_dataset_cache(path: str | Path) -> SyntheticIdentityDataset:
    blob = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise ConfigError(f"{path}: dataset cache truncated")
        out = blob[pos : pos + n]
        pos += n
        return out

    if take(4) != CACHE_MAGIC:
        raise ConfigError(f"{path}: not a dataset cache (bad magic)")
    version = struct.unpack("<I", take(4))[0]
    if version != CACHE_VERSION:
        raise ConfigError(f"{path}: unsupported cache version {version}")
    params = json.loads(take(struct.unpack("<I", take(4))[0]).decode("utf-8"))
    shape = struct.unpack("<4I", take(16))
    images = np.frombuffer(take(8 * int(np.prod(shape))), dtype="<f8").reshape(shape)
    n = struct.unpack("<I", take(4))[0]
    labels = np.frombuffer(take(8 * n), dtype="<i8").astype(np.int64)
    n_train = params["num_train_classes"]
    n_test = params["num_test_classes"]
    first_distractor = n_train + n_test
    return SyntheticIdentityDataset(
        images=images.astype(np.float64),
        labels=labels,
        train_classes=np.arange(n_train, dtype=np.int64),
        test_classes=np.arange(n_train, first_distractor, dtype=np.int64),
        distractor_classes=np.arange(
            first_distractor, first_distractor + params["num_distractors"], dtype=np.int64
        ),
        params=params,
        latents=None,
    )


def save_verification_protocol(protocol: VerificationProtocol, path: str | Path) -> Path:
    lines = [f"# verification folds={protocol.folds} pairs={protocol.num_pairs}"]
    for a, b, s in zip(protocol.index_a, protocol.index_b, protocol.same):
        lines.append(f"{a} {b} {int(s)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def load_verification_protocol(path: str | Path) -> VerificationProtocol:
    lines = Path(path).read_text().strip().split("\n")
    header = lines[0]
    if not header.startswith("# verification"):
        raise ConfigError(f"{path}: not a verification protocol file")
    meta = dict(kv.split("=") for kv in header.split()[2:])
    folds = int(meta["folds"])
    rows = np.array([[int(x) for x in line.split()] for line in lines[1:]], dtype=np.int64)
    per_fold = len(rows) // folds
    fold = np.repeat(np.arange(folds), per_fold)
    return VerificationProtocol(
        index_a=rows[:, 0],
        index_b=rows[:, 1],
        same=rows[:, 2].astype(bool),
        fold=fold,
        folds=folds,
    )


def save_identification_protocol(protocol: IdentificationProtocol, path: str | Path) -> Path:
    lines = [
        f"# identification gallery={len(protocol.gallery_indices)} "
        f"probes={len(protocol.probe_indices)}"
    ]
    for idx, cls in zip(protocol.gallery_indices, protocol.gallery_classes):
        lines.append(f"gallery {idx} {cls}")
    for idx, cls in zip(protocol.probe_indices, protocol.probe_classes):
        lines.append(f"probe {idx} {cls}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def load_identification_protocol(path: str | Path) -> IdentificationProtocol:
    lines = Path(path).read_text().strip().split("\n")
    if not lines[0].startswith("# identification"):
        raise ConfigError(f"{path}: not an identification protocol file")
    gal_i, gal_c, pr_i, pr_c = [], [], [], []
    for line in lines[1:]:
        role, idx, cls = line.split()
        if role == "gallery":
            gal_i.append(int(idx))
            gal_c.append(int(cls))
        elif role == "probe":
            pr_i.append(int(idx))
            pr_c.append(int(cls))
        else:
            raise ConfigError(f"{path}: unknown role {role!r}")
    return IdentificationProtocol(
        gallery_indices=np.array(gal_i, dtype=np.int64),
        gallery_classes=np.array(gal_c, dtype=np.int64),
        probe_indices=np.array(pr_i, dtype=np.int64),
        probe_classes=np.array(pr_c, dtype=np.int64),
    )
