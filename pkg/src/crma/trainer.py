"""Four-phase alternating training loop with confidence tracking.

Every iteration consumes one DomainBatch and runs, in order: source
supervision on all parameters, the classifier-side consistency
maximization (minimizing source CE minus the intra consistency), the
extractor-side consistency minimization, and the adaptive self-training
update. Each phase rebuilds its forward graph on a fresh tape.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from . import losses
from .autodiff import NumericError, Tape, Tensor
from .data import BatchIterator, DomainBatch, GeneratedTask
from .nn import (
    EXTRACTOR_GROUP,
    CrmaModel,
    FormatError,
    Parameter,
    _Reader,
    mean_pair_prediction,
    model_from_bytes,
    model_to_bytes,
)
from .seeds import stream_rng, stream_seed

LOSS_CEILING = 1e6
MOMENTUM = 0.9
COSINE_FLOOR_FRACTION = 0.01

TRAINER_CHECKPOINT_MAGIC = b"CRMATRN\x00"
TRAINER_CHECKPOINT_VERSION = 1


class DivergedRunError(RuntimeError):
    """A loss went NaN/Inf or past the ceiling; carries partial history."""

    def __init__(self, message: str, iteration: int, history: list | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.history = history or []


@dataclass
class AblationFlags:
    intra_da: bool = True
    inter_da: bool = True
    ast: bool = True


@dataclass
class TrainConfig:
    alpha: float = 0.5
    lam: float = 0.1                      # config key "lambda"
    base_lr: float = 1e-3
    extractor_lr_multiplier: float = 1.0  # 0.1 emulates a pretrained-extractor regime
    epochs: int = 50
    batch_per_domain: int = 128
    optimizer: str = "sgd_momentum"       # or "sgd"
    scheduler: str = "constant"           # or "cosine_annealing"
    ablation: AblationFlags = field(default_factory=AblationFlags)
    seed: int = 0
    num_extractor_steps: int = 1
    ast_start_epoch: int = 0
    uniform_pseudo_weights: bool = False
    record_ast_trace: bool = False
    extractor_hidden: tuple[int, ...] = (64, 64)
    head_hidden: tuple[int, ...] = (32,)

    def validate(self) -> None:
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lambda must be >= 0")
        if self.base_lr <= 0 or self.extractor_lr_multiplier <= 0:
            raise ValueError("learning rates must be > 0")
        if self.epochs < 1 or self.batch_per_domain < 1 or self.num_extractor_steps < 1:
            raise ValueError("epochs, batch size, and extractor steps must be >= 1")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.scheduler not in ("constant", "cosine_annealing"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")


class ConfidenceTracker:
    """Cumulative per-domain mean of per-sample pair discrepancies.

    Stores exact sums and counts rather than an incremental mean so the
    running mean matches a full-history replay to float64 accuracy. Means
    never reset between epochs.
    """

    def __init__(self, num_domains: int):
        self.sums = np.zeros(num_domains)
        self.counts = np.zeros(num_domains, dtype=np.int64)

    def update(self, d_matrix: np.ndarray) -> None:
        self.sums += d_matrix.sum(axis=0)
        self.counts += d_matrix.shape[0]

    @property
    def means(self) -> np.ndarray:
        """Running means; zero for domains that have not seen a sample."""
        return self.sums / np.maximum(self.counts, 1)


class SgdOptimizer:
    """SGD with optional momentum, one velocity buffer per parameter.

    ``step`` applies updates only to the requested groups; untouched
    groups keep both their values and their velocity bit-identical.
    """

    def __init__(self, params: Sequence[Parameter], momentum: float = MOMENTUM):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = {p.name: np.zeros_like(p.tensor.values) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()

    def step(self, lr: float, extractor_lr_multiplier: float = 1.0, groups=None) -> None:
        for p in self.params:
            if groups is not None and p.group not in groups:
                continue
            grad = p.tensor.grad
            if grad is None:
                grad = np.zeros_like(p.tensor.values)
            rate = lr * (extractor_lr_multiplier if p.group == EXTRACTOR_GROUP else 1.0)
            if self.momentum > 0:
                v = self.velocity[p.name]
                v *= self.momentum
                v += grad
                p.tensor.values -= rate * v
            else:
                p.tensor.values -= rate * grad


@dataclass
class TrainState:
    model: CrmaModel
    optimizer: SgdOptimizer
    tracker: ConfidenceTracker
    config: TrainConfig
    iteration: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)
    ast_trace: list = field(default_factory=list)


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Per-epoch learning rate; cosine anneals from base down to 1% of base."""
    if config.scheduler == "constant" or config.epochs == 1:
        return config.base_lr
    floor = COSINE_FLOOR_FRACTION * config.base_lr
    progress = epoch / (config.epochs - 1)
    return floor + 0.5 * (config.base_lr - floor) * (1.0 + math.cos(math.pi * progress))


def _loss_value(loss: Tensor, state: TrainState) -> float:
    value = loss.item()
    if not math.isfinite(value) or abs(value) > LOSS_CEILING:
        raise DivergedRunError(
            f"loss {value} at iteration {state.iteration}", state.iteration
        )
    return value


def _classifier_groups(model: CrmaModel) -> set[str]:
    return {p.group for p in model.parameters() if p.group != EXTRACTOR_GROUP}


def _apply(state: TrainState, tape: Tape, loss: Tensor, lr: float, groups=None) -> None:
    state.optimizer.zero_grad()
    tape.backward(loss)
    state.optimizer.step(
        lr, extractor_lr_multiplier=state.config.extractor_lr_multiplier, groups=groups
    )


def _source_pairs(model: CrmaModel, batch: DomainBatch):
    pairs = []
    for m, x in enumerate(batch.source_features):
        feats = model.forward_features(x)
        pairs.append(model.predict_pair(m, feats))
    return pairs


def step_source(state: TrainState, batch: DomainBatch, lr: float) -> float:
    """Minimize the summed source cross entropy over all parameters."""
    with Tape() as tape:
        loss = losses.source_ce_loss(_source_pairs(state.model, batch), batch.source_labels)
    value = _loss_value(loss, state)
    _apply(state, tape, loss, lr)
    return value


def step_classifiers(state: TrainState, batch: DomainBatch, lr: float):
    """One classifier-only step on (source CE - L_intra); extractor frozen.

    Skipped entirely when the intra-consistency component is ablated.
    Returns the pre-step (L_src, L_intra) values.
    """
    if not state.config.ablation.intra_da:
        return None
    model = state.model
    with Tape() as tape:
        src_loss = losses.source_ce_loss(_source_pairs(model, batch), batch.source_labels)
        target_feats = model.forward_features(batch.target_features)
        intra, _ = losses.intra_consistency_loss(model.predict_all_pairs(target_feats))
        objective = losses.classifier_objective(src_loss, intra)
    value = _loss_value(objective, state)  # guards both component losses
    src_value, intra_value = src_loss.item(), intra.item()
    _apply(state, tape, objective, lr, groups=_classifier_groups(model))
    return src_value, intra_value


def step_extractor(state: TrainState, batch: DomainBatch, lr: float):
    """Extractor-only steps on L_intra + alpha * L_inter; classifiers frozen.

    Ablated terms are dropped; with no terms left (both ablated, or a
    single source with intra ablated) the phase is skipped as a true no-op.
    Returns the first step's pre-step (L_intra, L_inter) values.
    """
    cfg = state.config
    model = state.model
    use_intra = cfg.ablation.intra_da
    use_inter = cfg.ablation.inter_da and model.num_domains >= 2
    if not use_intra and not use_inter:
        return None
    first_values = None
    for _ in range(cfg.num_extractor_steps):
        with Tape() as tape:
            feats = model.forward_features(batch.target_features)
            pairs = model.predict_all_pairs(feats)
            intra_value = inter_value = 0.0
            terms = []
            if use_intra:
                intra, _ = losses.intra_consistency_loss(pairs)
                intra_value = intra.item()
                terms.append(intra)
            if use_inter:
                means = [mean_pair_prediction(pa, pb) for pa, pb in pairs]
                inter = losses.inter_consistency_loss(means)
                inter_value = inter.item()
                terms.append(inter * cfg.alpha)
            objective = terms[0]
            for t in terms[1:]:
                objective = objective + t
        _loss_value(objective, state)
        if first_values is None:
            first_values = (intra_value, inter_value)
        _apply(state, tape, objective, lr, groups={EXTRACTOR_GROUP})
    return first_values


def step_ast(state: TrainState, batch: DomainBatch, lr: float):
    """Self-training step: fuse pseudo-labels, then minimize the KL loss.

    Per batch: measure the per-sample pair discrepancies, update the
    confidence tracker, THEN compute weights from the updated means
    (update-then-weight), fuse pseudo-labels and betas, and take one step
    on all parameters with the targets held constant.
    """
    cfg = state.config
    if not cfg.ablation.ast or state.epoch < cfg.ast_start_epoch:
        return None
    model = state.model
    with Tape() as tape:
        feats = model.forward_features(batch.target_features)
        pairs = model.predict_all_pairs(feats)
        d_matrix = np.stack(
            [
                losses._per_sample_discrepancy(pa.probs.values, pb.probs.values)
                for pa, pb in pairs
            ],
            axis=1,
        )
        state.tracker.update(d_matrix)
        mean_values = np.stack(
            [(pa.probs.values + pb.probs.values) * 0.5 for pa, pb in pairs]
        )
        fused = losses.fuse_pseudo_labels(
            d_matrix,
            mean_values,
            state.tracker.means,
            cfg.lam,
            uniform=cfg.uniform_pseudo_weights,
        )
        loss = losses.ast_loss(pairs, fused.probs, fused.betas)
    value = _loss_value(loss, state)
    if cfg.record_ast_trace:
        state.ast_trace.append(
            {
                "iteration": state.iteration,
                "d_matrix": d_matrix.copy(),
                "running_means": state.tracker.means.copy(),
                "raw_weights": fused.raw_weights.copy(),
                "normalized_weights": fused.normalized_weights.copy(),
                "pseudo_probs": fused.probs.copy(),
                "betas": fused.betas.copy(),
            }
        )
    _apply(state, tape, loss, lr)
    return value, fused


def evaluate(model: CrmaModel, features: np.ndarray, labels: np.ndarray):
    """Accuracy of the averaged-head prediction, plus per-class accuracy."""
    _, predicted = model.final_prediction(features)
    labels = np.asarray(labels)
    accuracy = float(np.mean(predicted == labels))
    per_class = np.array(
        [
            float(np.mean(predicted[labels == c] == c)) if np.any(labels == c) else math.nan
            for c in range(model.num_classes)
        ]
    )
    return accuracy, per_class


def train(config: TrainConfig, task: GeneratedTask):
    """Run the full alternating loop; returns (state, per-epoch history).

    History rows carry the epoch-mean phase losses, the epoch's learning
    rate, target test accuracy, and the per-domain mean normalized weight
    and running-mean columns. Skipped phases log 0.0.
    """
    config.validate()
    num_domains = task.num_sources
    model = CrmaModel(
        input_dim=task.input_dim,
        num_classes=task.spec.num_classes,
        num_domains=num_domains,
        extractor_hidden=config.extractor_hidden,
        head_hidden=config.head_hidden,
        rng=stream_rng(config.seed, "init"),
    )
    momentum = MOMENTUM if config.optimizer == "sgd_momentum" else 0.0
    state = TrainState(
        model=model,
        optimizer=SgdOptimizer(model.parameters(), momentum=momentum),
        tracker=ConfidenceTracker(num_domains),
        config=config,
    )
    iterator = BatchIterator(
        task.sources, task.target, config.batch_per_domain,
        stream_seed(config.seed, "shuffle"),
    )
    batches = iter(iterator)

    try:
        for epoch in range(config.epochs):
            state.epoch = epoch
            lr = learning_rate(config, epoch)
            sums = {"L_src": 0.0, "L_intra": 0.0, "L_inter": 0.0, "L_AST": 0.0}
            weight_sum = np.zeros(num_domains)
            weight_batches = 0
            for _ in range(iterator.batches_per_epoch):
                batch = next(batches)
                sums["L_src"] += step_source(state, batch, lr)
                clf = step_classifiers(state, batch, lr)
                ext = step_extractor(state, batch, lr)
                if ext is not None:
                    sums["L_intra"] += ext[0]
                    sums["L_inter"] += ext[1]
                elif clf is not None:
                    sums["L_intra"] += clf[1]
                ast = step_ast(state, batch, lr)
                if ast is not None:
                    sums["L_AST"] += ast[0]
                    weight_sum += ast[1].normalized_weights.mean(axis=0)
                    weight_batches += 1
                state.iteration += 1
            accuracy, _ = evaluate(model, task.target_test_features, task.target_test_labels)
            row = {
                "epoch": epoch,
                "L_src": sums["L_src"] / iterator.batches_per_epoch,
                "L_intra": sums["L_intra"] / iterator.batches_per_epoch,
                "L_inter": sums["L_inter"] / iterator.batches_per_epoch,
                "L_AST": sums["L_AST"] / iterator.batches_per_epoch,
                "lr": lr,
                "target_acc": accuracy,
            }
            mean_w = weight_sum / weight_batches if weight_batches else np.zeros(num_domains)
            for m in range(num_domains):
                row[f"mean_w_{m}"] = float(mean_w[m])
            for m in range(num_domains):
                row[f"bar_L_{m}"] = float(state.tracker.means[m])
            state.history.append(row)
    except DivergedRunError as err:
        err.history = state.history
        raise
    except NumericError as err:
        # a forward overflowed mid-run; surface it as a diverged run
        raise DivergedRunError(
            f"numeric overflow at iteration {state.iteration}: {err}",
            state.iteration,
            state.history,
        ) from err
    return state, state.history


def history_columns(num_domains: int) -> list[str]:
    cols = ["epoch", "L_src", "L_intra", "L_inter", "L_AST", "lr", "target_acc"]
    cols += [f"mean_w_{m}" for m in range(num_domains)]
    cols += [f"bar_L_{m}" for m in range(num_domains)]
    return cols


def write_history_csv(history: Sequence[dict], num_domains: int, fileobj: IO[str]) -> None:
    cols = history_columns(num_domains)
    fileobj.write(",".join(cols) + "\n")
    for row in history:
        fileobj.write(",".join(repr(row[c]) if c != "epoch" else str(row[c]) for c in cols) + "\n")


# checkpointing ---------------------------------------------------------------


def save_checkpoint(state: TrainState, path) -> None:
    """Model bytes plus optimizer velocity, tracker state, and counters."""
    model_blob = model_to_bytes(state.model)
    parts = [
        TRAINER_CHECKPOINT_MAGIC,
        struct.pack("<I", TRAINER_CHECKPOINT_VERSION),
        struct.pack("<Q", len(model_blob)),
        model_blob,
    ]
    for p in state.optimizer.params:
        parts.append(
            np.ascontiguousarray(state.optimizer.velocity[p.name], dtype="<f8").tobytes()
        )
    tracker = state.tracker
    parts.append(struct.pack("<I", tracker.sums.size))
    parts.append(np.ascontiguousarray(tracker.sums, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(tracker.counts, dtype="<i8").tobytes())
    parts.append(struct.pack("<QQ", state.iteration, state.epoch))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path, config: TrainConfig) -> TrainState:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, "trainer checkpoint")
    if r.take(8) != TRAINER_CHECKPOINT_MAGIC:
        raise FormatError("bad trainer checkpoint magic")
    (version,) = r.unpack("<I")
    if version != TRAINER_CHECKPOINT_VERSION:
        raise FormatError(f"unsupported trainer checkpoint version {version}")
    (model_len,) = r.unpack("<Q")
    model = model_from_bytes(r.take(model_len))
    momentum = MOMENTUM if config.optimizer == "sgd_momentum" else 0.0
    optimizer = SgdOptimizer(model.parameters(), momentum=momentum)
    for p in optimizer.params:
        arr = r.array("<f8", p.tensor.values.size)
        optimizer.velocity[p.name] = arr.reshape(p.tensor.values.shape)
    (num_domains,) = r.unpack("<I")
    tracker = ConfidenceTracker(num_domains)
    tracker.sums = r.array("<f8", num_domains)
    tracker.counts = r.array("<i8", num_domains)
    iteration, epoch = r.unpack("<QQ")
    return TrainState(
        model=model,
        optimizer=optimizer,
        tracker=tracker,
        config=config,
        iteration=iteration,
        epoch=epoch,
    )
