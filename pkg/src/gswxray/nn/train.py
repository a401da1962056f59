"""SGD with momentum and the freeze / pretrain / finetune (FPT) regime."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from gswxray.core import AnnotatedImage
from gswxray.formats.weights import load_weights, save_weights
from gswxray.nn.network import (
    BACKBONE,
    HEAD,
    Network,
    as_batch,
    backward,
    build_classifier,
    forward,
    init_parameters,
    loss,
    predict_proba,
)
from gswxray.synth import blob_count_set

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 50
    seed: int = 42

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch_size and epochs must be positive")


@dataclass(frozen=True)
class FptPlan:
    backbone: tuple[str, ...] = BACKBONE
    head: tuple[str, ...] = HEAD
    hidden_units: int = 16
    stage_a_epochs: int = 40
    stage_a_lr: float = 1e-2
    stage_b_epochs: int = 20
    stage_b_lr: float = 1e-4
    pretext_epochs: int = 15
    pretext_images: int = 400
    pretext_lr: float = 2e-2


def sgd_momentum_step(params, grads, velocity, config: OptimizerConfig, frozen=frozenset(), learning_rate=None):
    """One momentum update: ``v <- momentum*v - lr*g``; ``p <- p + v``.

    Returns new ``(params, velocity)`` dicts; inputs are not modified. Frozen
    keys keep their values and a zero velocity.
    """
    lr = config.learning_rate if learning_rate is None else learning_rate
    bad = [key for key, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradient in {sorted(bad)}")
    new_p, new_v = {}, {}
    for key, p in params.items():
        v = velocity.get(key)
        if v is None:
            v = np.zeros_like(p)
        g = grads.get(key)
        if key in frozen or g is None:
            new_p[key] = p
            new_v[key] = v if key not in frozen else np.zeros_like(p)
            continue
        v = config.momentum * v - lr * g
        new_p[key] = p + v
        new_v[key] = v
    return new_p, new_v


@dataclass
class EpochLog:
    epoch: int
    stage: str
    loss: float
    train_acc: float
    val_acc: float | None


def accuracy(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    probs = predict_proba(net, x)
    return float(np.mean(probs.argmax(axis=1) == y))


def dataset_loss(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    """Inference-mode loss over a whole set."""
    probs = predict_proba(net, x)
    return loss(probs, y, net.loss_kind)


def train_epochs(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    config: OptimizerConfig,
    epochs: int,
    stage: str,
    learning_rate: float,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    stream: int = 0,
) -> list[EpochLog]:
    """Mini-batch training; the batch order and dropout masks derive only from the seed."""
    frozen = net.frozen_keys()
    velocity: dict = {}
    history = []
    n = len(x)
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([config.seed, stream, epoch]).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            rng = np.random.default_rng([config.seed, stream, epoch, b])
            probs, trace = forward(net, x[idx], training=True, rng=rng)
            batch_loss = loss(probs, y[idx], net.loss_kind)
            if not np.isfinite(batch_loss):
                raise FloatingPointError(f"non-finite loss at {stage} epoch {epoch}")
            total += batch_loss * len(idx)
            grads = backward(net, trace, y[idx])
            params, velocity = sgd_momentum_step(
                net.parameters(), grads, velocity, config, frozen=frozen, learning_rate=learning_rate
            )
            net.set_parameters({k: v for k, v in params.items() if k not in frozen})
        entry = EpochLog(
            epoch=epoch,
            stage=stage,
            loss=total / n,
            train_acc=accuracy(net, x, y),
            val_acc=accuracy(net, *val) if val is not None and len(val[0]) else None,
        )
        log.info("%s epoch %d loss %.5f train_acc %.4f", stage, epoch, entry.loss, entry.train_acc)
        history.append(entry)
    return history


def images_to_arrays(images: Sequence[AnnotatedImage], net: Network) -> tuple[np.ndarray, np.ndarray]:
    if any(a.image is None for a in images):
        raise ValueError("training images must carry pixels")
    x = as_batch([a.image for a in images], net.input_shape)
    y = np.array([net.class_names.index(a.label) for a in images], dtype=np.int64)
    return x, y


def pretrain_backbone(input_shape: tuple[int, int], plan: FptPlan, config: OptimizerConfig) -> bytes:
    """Train the backbone on a blob-counting pretext task; return its saved weights."""
    h, w = input_shape
    x, y = blob_count_set(plan.pretext_images, (w, h), seed=config.seed)
    net = build_classifier(
        input_shape, class_names=("0", "1", "2", "3"), head="softmax", hidden=plan.hidden_units, seed=config.seed
    )
    with threadpool_limits(limits=1):
        train_epochs(net, x, y, config, plan.pretext_epochs, "pretext", plan.pretext_lr, stream=1)
    return save_weights(net, layers=plan.backbone)


@dataclass
class FptResult:
    network: Network
    history: list[EpochLog]
    checkpoint: bytes
    initial_backbone: dict = field(repr=False, default_factory=dict)
    stage_a_backbone: dict = field(repr=False, default_factory=dict)
    stage_a_end_loss: float = float("nan")
    stage_b_start_loss: float = float("nan")


def train_fpt(
    train: Sequence[AnnotatedImage],
    plan: FptPlan = FptPlan(),
    config: OptimizerConfig = OptimizerConfig(),
    val: Sequence[AnnotatedImage] = (),
    backbone_weights: bytes | None = None,
    class_names: tuple[str, str] = ("Normal", "GSW"),
) -> FptResult:
    """Stage A trains the two-layer head over a frozen pretrained backbone and
    checkpoints; stage B reloads that checkpoint, unfreezes everything and
    fine-tunes at the stage-B learning rate.
    """
    labels = {a.label for a in train}
    if len(labels) < 2:
        raise ValueError(f"training set has a single class {labels}")
    input_shape = (train[0].height, train[0].width)
    if backbone_weights is None:
        backbone_weights = pretrain_backbone(input_shape, plan, config)

    net = build_classifier(input_shape, class_names, hidden=plan.hidden_units, seed=config.seed)
    load_weights(net, backbone_weights, partial=True)
    init_parameters(net, config.seed + 1, names=plan.head)
    x, y = images_to_arrays(train, net)
    v = images_to_arrays(val, net) if len(val) else None

    with threadpool_limits(limits=1):
        net.freeze(plan.backbone)
        initial = {k: p.copy() for k, p in net.named_parameters() if k[0] in plan.backbone}
        history = train_epochs(net, x, y, config, plan.stage_a_epochs, "A", plan.stage_a_lr, v, stream=2)
        stage_a_backbone = {k: p.copy() for k, p in net.named_parameters() if k[0] in plan.backbone}
        end_a = dataset_loss(net, x, y)
        checkpoint = save_weights(net)

        net_b = Network.from_architecture(net.architecture())
        load_weights(net_b, checkpoint)
        net_b.unfreeze_all()
        start_b = dataset_loss(net_b, x, y)
        cfg_b = replace(config, learning_rate=plan.stage_b_lr)
        history += train_epochs(net_b, x, y, cfg_b, plan.stage_b_epochs, "B", plan.stage_b_lr, v, stream=3)
    return FptResult(net_b, history, checkpoint, initial, stage_a_backbone, end_a, start_b)
