"""Shared feature extractor with one pair of classifier heads per source domain.

The model is a plain MLP stack: one extractor shared by all domains and
2M independently parameterized heads. Every trainable tensor belongs to
exactly one parameter group ("extractor" or "classifier.<m>.<branch>"),
which is what the trainer's alternating phases key on.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import DimensionError, Tensor, add_bias, matmul, softmax

EXTRACTOR_GROUP = "extractor"

CHECKPOINT_MAGIC = b"CRMANET\x00"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """A serialized file is malformed, truncated, or of the wrong version."""


def classifier_group(domain_index: int, branch: str) -> str:
    return f"classifier.{domain_index}.{branch}"


@dataclass
class Parameter:
    """One trainable tensor plus its group assignment."""

    name: str
    group: str
    tensor: Tensor


@dataclass
class Prediction:
    """Class probabilities (and the logits they came from) for one head."""

    probs: Tensor
    logits: Tensor
    domain_index: int
    branch: str


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _init_layers(rng, widths, name_prefix, group):
    params = []
    for i in range(len(widths) - 1):
        w = Tensor(_glorot(rng, widths[i], widths[i + 1]), requires_grad=True)
        b = Tensor(np.zeros(widths[i + 1]), requires_grad=True)
        params.append(Parameter(f"{name_prefix}.layer{i}.weight", group, w))
        params.append(Parameter(f"{name_prefix}.layer{i}.bias", group, b))
    return params


class FeatureExtractor:
    """MLP mapping inputs to features, relu after every layer."""

    def __init__(self, input_dim: int, hidden_dims: Sequence[int], rng: np.random.Generator):
        if input_dim < 1 or not hidden_dims:
            raise ValueError("extractor needs input_dim >= 1 and at least one layer")
        self.input_dim = int(input_dim)
        self.hidden_dims = tuple(int(d) for d in hidden_dims)
        self.feature_dim = self.hidden_dims[-1]
        widths = (self.input_dim, *self.hidden_dims)
        self.params = _init_layers(rng, widths, "extractor", EXTRACTOR_GROUP)

    def forward(self, x: Tensor) -> Tensor:
        if x.values.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(
                f"extractor expects (n, {self.input_dim}) inputs, got {x.shape}"
            )
        h = x
        for i in range(0, len(self.params), 2):
            w, b = self.params[i].tensor, self.params[i + 1].tensor
            h = add_bias(matmul(h, w), b).relu()
        return h


class ClassifierHead:
    """MLP classifier: relu between hidden layers, linear output of width K."""

    def __init__(
        self,
        feature_dim: int,
        num_classes: int,
        hidden_dims: Sequence[int],
        domain_index: int,
        branch: str,
        rng: np.random.Generator,
    ):
        if branch not in ("a", "b"):
            raise ValueError(f"branch must be 'a' or 'b', got {branch!r}")
        self.feature_dim = int(feature_dim)
        self.num_classes = int(num_classes)
        self.hidden_dims = tuple(int(d) for d in hidden_dims)
        self.domain_index = int(domain_index)
        self.branch = branch
        widths = (self.feature_dim, *self.hidden_dims, self.num_classes)
        group = classifier_group(domain_index, branch)
        self.params = _init_layers(rng, widths, group, group)

    def logits(self, features: Tensor) -> Tensor:
        h = features
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            w, b = self.params[2 * i].tensor, self.params[2 * i + 1].tensor
            h = add_bias(matmul(h, w), b)
            if i < n_layers - 1:
                h = h.relu()
        return h


class CrmaModel:
    """Shared extractor plus M pairs of domain-specific classifier heads."""

    def __init__(
        self,
        input_dim: int,
        num_classes: int,
        num_domains: int,
        extractor_hidden: Sequence[int] = (64, 64),
        head_hidden: Sequence[int] = (32,),
        rng: np.random.Generator | None = None,
    ):
        if num_domains < 1:
            raise ValueError(f"need at least one source domain, got {num_domains}")
        if num_classes < 2:
            raise ValueError(f"need at least two classes, got {num_classes}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_classes = int(num_classes)
        self.num_domains = int(num_domains)
        self.extractor = FeatureExtractor(input_dim, extractor_hidden, rng)
        # Initialization draw order is fixed: extractor first, then heads in
        # (domain, branch a, branch b) order; checkpoints use the same order.
        self.heads: dict[tuple[int, str], ClassifierHead] = {}
        for m in range(self.num_domains):
            for branch in ("a", "b"):
                self.heads[(m, branch)] = ClassifierHead(
                    self.extractor.feature_dim, num_classes, head_hidden, m, branch, rng
                )

    @property
    def input_dim(self) -> int:
        return self.extractor.input_dim

    @property
    def feature_dim(self) -> int:
        return self.extractor.feature_dim

    def forward_features(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        return self.extractor.forward(x)

    def predict_pair(self, domain_index: int, features: Tensor) -> tuple[Prediction, Prediction]:
        if not 0 <= domain_index < self.num_domains:
            raise IndexError(
                f"domain index {domain_index} out of range for {self.num_domains} domains"
            )
        preds = []
        for branch in ("a", "b"):
            logits = self.heads[(domain_index, branch)].logits(features)
            preds.append(Prediction(softmax(logits), logits, domain_index, branch))
        return preds[0], preds[1]

    def predict_all_pairs(self, features: Tensor) -> list[tuple[Prediction, Prediction]]:
        return [self.predict_pair(m, features) for m in range(self.num_domains)]

    def final_prediction(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Average the probability vectors of all 2M heads.

        Returns (probs, labels); labels break argmax ties toward the lowest
        class index, so evaluation is deterministic.
        """
        features = self.forward_features(x)
        total = np.zeros((features.shape[0], self.num_classes))
        for m in range(self.num_domains):
            pa, pb = self.predict_pair(m, features)
            total += pa.probs.values + pb.probs.values
        probs = total / (2 * self.num_domains)
        return probs, np.argmax(probs, axis=1).astype(np.int32)

    def parameters(self) -> list[Parameter]:
        params = list(self.extractor.params)
        for m in range(self.num_domains):
            for branch in ("a", "b"):
                params.extend(self.heads[(m, branch)].params)
        return params

    def group_parameters(self, prefix: str) -> list[Parameter]:
        return [p for p in self.parameters() if p.group.startswith(prefix)]


def mean_pair_prediction(pred_a: Prediction, pred_b: Prediction) -> Tensor:
    """Element-wise mean of the pair's probability matrices."""
    if pred_a.probs.shape != pred_b.probs.shape:
        raise DimensionError(
            f"mean_pair_prediction: shapes {pred_a.probs.shape} and "
            f"{pred_b.probs.shape} differ"
        )
    return (pred_a.probs + pred_b.probs) * 0.5


def parameters_digest(params: Iterable[Parameter]) -> str:
    """SHA-256 over parameter names and raw little-endian float64 bytes."""
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.tensor.values, dtype="<f8").tobytes())
    return h.hexdigest()


# checkpoint format ----------------------------------------------------------
#
# Little-endian binary:
#   magic (8 bytes) | version u32
#   input_dim u32 | num_classes u32 | num_domains u32
#   n_extractor_hidden u32, each width u32
#   n_head_hidden u32, each width u32
#   parameter arrays as raw float64 blocks, in parameters() order
#     (shapes are implied by the header, so no per-array framing is needed)


def model_to_bytes(model: CrmaModel) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    ext = model.extractor
    head = model.heads[(0, "a")]
    parts.append(struct.pack("<III", ext.input_dim, model.num_classes, model.num_domains))
    parts.append(struct.pack("<I", len(ext.hidden_dims)))
    parts.append(struct.pack(f"<{len(ext.hidden_dims)}I", *ext.hidden_dims))
    parts.append(struct.pack("<I", len(head.hidden_dims)))
    if head.hidden_dims:
        parts.append(struct.pack(f"<{len(head.hidden_dims)}I", *head.hidden_dims))
    for p in model.parameters():
        parts.append(np.ascontiguousarray(p.tensor.values, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    """Byte reader that reports the offset of any truncation."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated {self.what}: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(item * count), dtype=dtype).copy()


def model_from_bytes(data: bytes) -> CrmaModel:
    r = _Reader(data, "model checkpoint")
    if r.take(8) != CHECKPOINT_MAGIC:
        raise FormatError("bad model checkpoint magic")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported model checkpoint version {version}")
    input_dim, num_classes, num_domains = r.unpack("<III")
    (n_ext,) = r.unpack("<I")
    extractor_hidden = r.unpack(f"<{n_ext}I")
    (n_head,) = r.unpack("<I")
    head_hidden = r.unpack(f"<{n_head}I") if n_head else ()
    model = CrmaModel(
        input_dim, num_classes, num_domains, extractor_hidden, head_hidden
    )
    for p in model.parameters():
        arr = r.array("<f8", p.tensor.values.size)
        p.tensor.values[...] = arr.reshape(p.tensor.values.shape)
    return model


def save_model(model: CrmaModel, path) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path) -> CrmaModel:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
