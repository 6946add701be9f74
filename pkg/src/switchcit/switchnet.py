"""Switch network: frozen small-LM features plus a two-layer MLP task classifier.

Classifier file layout::

    b"SCSW" | u16 version | 32-byte extractor hash | u32 json length | class table (JSON)
    | u32 tensor count | tensor records (as in the model format)
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from switchcit.tinylm.io import CorruptFileError, check_magic, read_exact, read_tensors, write_tensors
from switchcit.tinylm.model import ModelParams, forward, tensor_generator
from switchcit.tinylm.tokenizer import Tokenizer
from switchcit.tinylm.train import TrainConfig, fit

CLASSIFIER_MAGIC = b"SCSW"
CLASSIFIER_VERSION = 2


class MissingClassError(ValueError):
    pass


class ExtractorHashMismatch(ValueError):
    pass


class UnregisteredTaskError(LookupError):
    pass


class FeatureExtractor:
    """Last-position, final-layer hidden state of a frozen small LM.

    Each text is encoded on its own (no padding), so a feature depends only on
    the text and the extractor weights.
    """

    def __init__(self, params: ModelParams, tokenizer: Tokenizer):
        self.params = params
        self.tokenizer = tokenizer
        self.hash = params.content_hash()

    @property
    def feature_dim(self) -> int:
        return self.params.config.dim

    @torch.no_grad()
    def extract(self, text: str) -> torch.Tensor:
        ids = self.tokenizer.encode(text)
        if not ids:
            raise ValueError("instruction is empty after tokenization")
        _, hidden = forward(self.params, [self.tokenizer.bos_id, *ids])
        return hidden[-1][-1].clone()

    def extract_many(self, texts: Sequence[str]) -> torch.Tensor:
        if not texts:
            return torch.zeros(0, self.feature_dim, dtype=self.params.dtype)
        return torch.stack([self.extract(t) for t in texts])


@dataclass(frozen=True)
class SwitchTrainConfig:
    hidden_dim: int = 64
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 8
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.hidden_dim < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("hidden_dim, epochs and batch_size must be >= 1")


@dataclass
class SwitchClassifier:
    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor
    classes: list[str]
    extractor_hash: bytes = field(default=b"\0" * 32, repr=False)
    # per-feature standardization fitted on the training features; not trained
    shift: torch.Tensor | None = field(default=None, repr=False)
    scale: torch.Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.shift is None:
            self.shift = torch.zeros(self.w1.shape[1], dtype=self.w1.dtype)
        if self.scale is None:
            self.scale = torch.ones(self.w1.shape[1], dtype=self.w1.dtype)

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def num_params(self) -> int:
        return sum(t.numel() for t in self.tensors().values())

    def tensors(self) -> dict[str, torch.Tensor]:
        """Trainable parameters only."""
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def stored(self) -> dict[str, torch.Tensor]:
        return {**self.tensors(), "shift": self.shift, "scale": self.scale}

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        z = (features - self.shift) / self.scale
        h = F.relu(z @ self.w1.T + self.b1)
        return h @ self.w2.T + self.b2

    @torch.no_grad()
    def predict(self, features: torch.Tensor) -> torch.Tensor:
        """Class indices; ties go to the lowest index."""
        return self.logits(features).argmax(dim=-1)

    def to_bytes(self) -> bytes:
        fh = io.BytesIO()
        fh.write(CLASSIFIER_MAGIC)
        fh.write(struct.pack("<H", CLASSIFIER_VERSION))
        fh.write(self.extractor_hash)
        table = json.dumps({"classes": self.classes, "hidden_dim": self.hidden_dim}).encode()
        fh.write(struct.pack("<I", len(table)))
        fh.write(table)
        write_tensors(fh, self.stored())
        return fh.getvalue()

    def equal(self, other: "SwitchClassifier") -> bool:
        return (
            self.classes == other.classes
            and self.extractor_hash == other.extractor_hash
            and all(torch.equal(a, b) for a, b in zip(self.stored().values(), other.stored().values()))
        )


def init_classifier(feature_dim: int, hidden_dim: int, classes: Sequence[str], seed: int,
                    dtype: torch.dtype = torch.float32) -> SwitchClassifier:
    def uniform(name: str, shape: tuple[int, ...], fan_in: int) -> torch.Tensor:
        bound = 1 / math.sqrt(fan_in)
        u = torch.rand(shape, generator=tensor_generator(seed, name), dtype=torch.float64)
        return ((2 * u - 1) * bound).to(dtype)

    T = len(classes)
    return SwitchClassifier(
        uniform("w1", (hidden_dim, feature_dim), feature_dim),
        uniform("b1", (hidden_dim,), feature_dim),
        uniform("w2", (T, hidden_dim), hidden_dim),
        uniform("b2", (T,), hidden_dim),
        list(classes),
    )


def train_classifier(
    features: torch.Tensor,
    labels: torch.Tensor | Sequence[int],
    classes: Sequence[str],
    cfg: SwitchTrainConfig,
    extractor_hash: bytes = b"\0" * 32,
) -> tuple[SwitchClassifier, float]:
    """Fresh MLP trained from scratch with cross-entropy; returns it and its training accuracy."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    T = len(classes)
    if T < 1:
        raise MissingClassError("no classes to train on")
    if labels.numel() != features.shape[0]:
        raise ValueError("features and labels differ in length")
    if labels.numel() and (labels.min() < 0 or labels.max() >= T):
        raise ValueError(f"labels must lie in [0, {T})")
    present = set(labels.tolist())
    missing = [classes[i] for i in range(T) if i not in present]
    if missing:
        raise MissingClassError(f"no retained examples for task(s): {', '.join(missing)}")

    clf = init_classifier(features.shape[1], cfg.hidden_dim, classes, cfg.seed, features.dtype)
    clf.extractor_hash = extractor_hash
    # extractor states share a large common offset; the task signal is in small deviations
    clf.shift = features.mean(dim=0)
    std = features.std(dim=0, unbiased=False)
    clf.scale = torch.where(std > 1e-6, std, torch.ones_like(std))
    tcfg = TrainConfig(
        learning_rate=cfg.learning_rate, epochs=cfg.epochs, batch_size=cfg.batch_size,
        weight_decay=cfg.weight_decay, grad_clip=None, seed=cfg.seed,
    )
    fit(
        clf.tensors(),
        lambda idx: F.cross_entropy(clf.logits(features[idx]), labels[idx]),
        list(range(labels.numel())),
        tcfg,
        label="switch",
    )
    acc = float((clf.predict(features) == labels).double().mean())
    return clf, acc


def accuracy(clf: SwitchClassifier, features: torch.Tensor, labels: Sequence[int]) -> float:
    labels = torch.as_tensor(labels, dtype=torch.long)
    return float((clf.predict(features) == labels).double().mean())


@torch.no_grad()
def classify(clf: SwitchClassifier, extractor: FeatureExtractor, text: str) -> tuple[str, torch.Tensor]:
    """(predicted task id, softmax probabilities over the classifier's classes)."""
    logits = clf.logits(extractor.extract(text))
    probs = logits.double().softmax(dim=-1)
    return clf.classes[int(logits.argmax())], probs


def route(
    clf: SwitchClassifier | None,
    extractor: FeatureExtractor,
    registry: Mapping,
    text: str,
):
    """Adapter bound to the predicted task, with the task id and probabilities.

    ``clf=None`` stands for a single learned task: everything goes to the sole adapter.
    """
    if clf is None:
        ids = list(registry.keys())
        if len(ids) != 1:
            raise ValueError("routing without a classifier needs exactly one registered adapter")
        task_id, probs = ids[0], torch.ones(1, dtype=torch.float64)
    else:
        task_id, probs = classify(clf, extractor, text)
    try:
        adapter = registry[task_id]
    except KeyError:
        raise UnregisteredTaskError(f"no adapter registered for task {task_id!r}") from None
    return adapter, task_id, probs


class AdapterRegistry(Mapping):
    """task id -> adapter file, loaded lazily; ``loaded`` records every file read."""

    def __init__(self, paths: Mapping[str, str | Path]):
        self.paths = {k: Path(v) for k, v in paths.items()}
        self.loaded: list[Path] = []
        self._cache: dict = {}

    def __getitem__(self, task_id: str):
        from switchcit.lora import load_adapter

        if task_id in self._cache:
            return self._cache[task_id]
        path = self.paths.get(task_id)
        if path is None or not path.exists():
            raise KeyError(task_id)
        adapter = load_adapter(path)
        self.loaded.append(path)
        self._cache[task_id] = adapter
        return adapter

    def __iter__(self):
        return iter(self.paths)

    def __len__(self) -> int:
        return len(self.paths)


def save_classifier(clf: SwitchClassifier, path: str | Path) -> str:
    raw = clf.to_bytes()
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load_classifier(path: str | Path, extractor: FeatureExtractor | None = None) -> SwitchClassifier:
    """Read a classifier; with ``extractor`` given, its hash must match the recorded one."""
    fh = io.BytesIO(Path(path).read_bytes())
    check_magic(fh, CLASSIFIER_MAGIC, CLASSIFIER_VERSION)
    ext_hash = read_exact(fh, 32)
    (n,) = struct.unpack("<I", read_exact(fh, 4))
    try:
        table = json.loads(read_exact(fh, n))
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"bad class table: {exc}") from None
    t = read_tensors(fh)
    if fh.read(1):
        raise CorruptFileError("trailing bytes in classifier file")
    try:
        clf = SwitchClassifier(t["w1"], t["b1"], t["w2"], t["b2"], list(table["classes"]), ext_hash,
                               t["shift"], t["scale"])
    except KeyError as exc:
        raise CorruptFileError(f"missing classifier field {exc}") from None
    if clf.w2.shape[0] != len(clf.classes):
        raise CorruptFileError("class table does not match output layer")
    if extractor is not None and extractor.hash != ext_hash:
        raise ExtractorHashMismatch(
            f"classifier was trained on extractor {ext_hash.hex()[:12]}, not {extractor.hash.hex()[:12]}"
        )
    return clf
