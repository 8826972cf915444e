"""Adam, the path-wise-then-joint training schedule and checkpointing.

Every source of randomness in an epoch (shuffle order, dropout masks) comes
from ``make_rng(seed, phase_index, epoch)``, so a run resumed from an
epoch-boundary checkpoint replays exactly the same batches as an
uninterrupted one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .crf import CrfConfig
from .errors import ConfigError, ShapeError, TrainingError
from .fileio import load_checkpoint, save_checkpoint
from .layers import NetworkParams
from .metrics import binarize, dice
from .model import (
    NetworkConfig, class_nll, cgl_forward, fused_forward, lpl_forward, seg_loss_for_batch, segment_forward,
)
from .tensor import Tensor, get_dtype, make_rng

log = logging.getLogger(__name__)


# -- Adam ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: NetworkParams, **hyper) -> "AdamState":
        st = cls(**hyper)
        for name, p in params.items():
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        return st


def adam_step(params: NetworkParams, state: AdamState, trainable: Sequence[str] | None = None) -> None:
    """One bias-corrected Adam update of the ``trainable`` names (all when ``None``).

    A trainable parameter without a gradient is updated with a zero gradient.
    Frozen parameters and their moments are left untouched.
    """
    names = list(params) if trainable is None else list(trainable)
    for name in names:
        g = params[name].grad
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name in names:
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data[...] = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if not np.all(np.isfinite(p.data)):
            raise TrainingError(f"parameter {name} became non-finite after step {t}")


# -- plan ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs_lpl: int = 10
    epochs_cgl_seg: int = 30
    epochs_cgl_cls: int = 10
    epochs_joint: int = 5
    lr_seg: float = 3e-3
    lr_joint: float = 3e-4
    seg_lambda: float = 0.67
    joint_aux_weight: float = 0.0
    joint_seg_loss: bool = False
    cgl_cls_train_unet: bool = False
    dice_threshold: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.seg_lambda <= 1.0:
            raise ConfigError(f"seg_lambda must lie in [0, 1], got {self.seg_lambda}")
        if min(self.lr, self.lr_seg, self.lr_joint) <= 0:
            raise ConfigError("learning rates must be positive")
        for name in ("epochs_lpl", "epochs_cgl_seg", "epochs_cgl_cls", "epochs_joint"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class Phase:
    name: str
    epochs: int
    lr: float
    loss: str
    trainable: tuple  # parameter-name prefixes


def build_plan(tcfg: TrainConfig) -> list[Phase]:
    """LPL alone, CGL segmentation, CGL classification, then joint."""
    cls_groups = ("cgl_head.", "cgl_unet.") if tcfg.cgl_cls_train_unet else ("cgl_head.",)
    phases = [
        Phase("lpl", tcfg.epochs_lpl, tcfg.lr, "lpl", ("lpl.",)),
        Phase("cgl_seg", tcfg.epochs_cgl_seg, tcfg.lr_seg, "seg", ("cgl_unet.",)),
        Phase("cgl_cls", tcfg.epochs_cgl_cls, tcfg.lr, "cgl", cls_groups),
        Phase("joint", tcfg.epochs_joint, tcfg.lr_joint, "joint", ("lpl.", "cgl_unet.", "cgl_head.", "fusion.")),
    ]
    return [p for p in phases if p.epochs > 0]


# -- batches ------------------------------------------------------------------------

def make_batch(samples: Sequence, net_cfg: NetworkConfig) -> dict:
    dtype = get_dtype()
    ctx = np.stack([s.context_roi for s in samples]).astype(dtype)[:, None]
    if net_cfg.in_channels > 1:
        ctx = np.repeat(ctx, net_cfg.in_channels, axis=1)
    bbox = np.stack([s.bbox_roi for s in samples]).astype(dtype)[:, None]
    mask = np.stack([s.mask_roi for s in samples]).astype(np.int64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return {"context": ctx, "bbox": bbox, "mask": mask, "labels": labels, "ids": [s.id for s in samples]}


def phase_loss(phase_loss_kind: str, batch: dict, params: NetworkParams, net_cfg: NetworkConfig,
               crf_cfg: CrfConfig, tcfg: TrainConfig, train_mode: bool, rng) -> tuple[Tensor, dict]:
    """Loss for one batch plus the outputs needed for the epoch metric."""
    labels = batch["labels"]
    if phase_loss_kind == "lpl":
        probs, _ = lpl_forward(batch["context"], params, net_cfg, train_mode, rng)
        return class_nll(probs, labels), {"probs": probs.data}
    if phase_loss_kind == "seg":
        seg = segment_forward(batch["bbox"], params, net_cfg, crf_cfg)
        loss = seg_loss_for_batch(seg["unet_probs"], seg["crf_probs"], batch["mask"], batch["bbox"],
                                  net_cfg, crf_cfg, tcfg.seg_lambda)
        return loss, {"soft_mask": seg["soft_mask"].data}
    if phase_loss_kind == "cgl":
        out = cgl_forward(batch["bbox"], params, net_cfg, crf_cfg, train_mode, rng)
        return class_nll(out["probs"], labels), {"probs": out["probs"].data}
    if phase_loss_kind == "joint":
        out = fused_forward(batch["context"], batch["bbox"], params, net_cfg, crf_cfg, train_mode, rng)
        loss = class_nll(out.class_probs, labels)
        if tcfg.joint_aux_weight:
            loss = loss + tcfg.joint_aux_weight * (class_nll(out.lpl_probs, labels) + class_nll(out.cgl_probs, labels))
        if tcfg.joint_seg_loss:
            loss = loss + seg_loss_for_batch(out.unet_probs, out.crf_probs, batch["mask"], batch["bbox"],
                                             net_cfg, crf_cfg, tcfg.seg_lambda)
        return loss, {"probs": out.class_probs.data}
    raise ConfigError(f"unknown loss kind {phase_loss_kind!r}")


def _batch_metric(kind: str, extras: dict, batch: dict, tcfg: TrainConfig) -> list[float]:
    if kind == "seg":
        pred = binarize(extras["soft_mask"], tcfg.dice_threshold)
        return [dice(p, m) for p, m in zip(pred, batch["mask"])]
    return list((extras["probs"].argmax(axis=1) == batch["labels"]).astype(float))


def trainable_names(params: NetworkParams, prefixes: Sequence[str]) -> list[str]:
    names = [n for n in params if n.startswith(tuple(prefixes))]
    if not names:
        raise ConfigError(f"no parameters match prefixes {prefixes}")
    return names


def set_mask_prior(params: NetworkParams, train: Sequence, name: str = "cgl_unet.out.bias") -> float:
    """Set the mask logit bias to the training foreground log-odds; returns the fraction.

    With the output weight starting at zero the first updates no longer have
    to shift every logit towards the prior, which otherwise tends to switch
    off narrow decoder stages for good.
    """
    frac = float(np.mean([np.mean(s.mask_roi) for s in train]))
    frac = min(max(frac, 1e-3), 1 - 1e-3)
    params[name].data[...] = np.log(frac / (1 - frac))
    return frac


def run_phase(phase: Phase, phase_index: int, train: Sequence, params: NetworkParams, state: AdamState,
              net_cfg: NetworkConfig, crf_cfg: CrfConfig, tcfg: TrainConfig, start_epoch: int = 0,
              on_epoch_end: Callable | None = None) -> list[dict]:
    """Mini-batch training for one phase; returns one record per epoch run.

    ``on_epoch_end(record, next_epoch)`` is called after every epoch, e.g. to
    write checkpoints.
    """
    if not train:
        raise TrainingError("empty training set")
    names = trainable_names(params, phase.trainable)
    if phase.loss == "seg" and start_epoch == 0 and "cgl_unet.out.bias" in names:
        set_mask_prior(params, train)
    history = []
    for epoch in range(start_epoch, phase.epochs):
        rng = make_rng(tcfg.seed, phase_index, epoch)
        order = rng.permutation(len(train))
        losses, metric = [], []
        for start in range(0, len(order), tcfg.batch_size):
            batch = make_batch([train[i] for i in order[start:start + tcfg.batch_size]], net_cfg)
            params.zero_grad()
            loss, extras = phase_loss(phase.loss, batch, params, net_cfg, crf_cfg, tcfg, True, rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss in phase {phase.name} epoch {epoch}: ids {batch['ids']}")
            loss.backward()
            adam_step(params, state, names)
            losses.append(value * len(batch["ids"]))
            metric.extend(_batch_metric(phase.loss, extras, batch, tcfg))
        record = {"phase": phase.name, "epoch": epoch, "loss": float(np.sum(losses) / len(train)),
                  "metric": float(np.mean(metric))}
        log.info("%s epoch %d loss %.5f metric %.4f", phase.name, epoch, record["loss"], record["metric"])
        history.append(record)
        if on_epoch_end is not None:
            on_epoch_end(record, epoch + 1)
    params.zero_grad()
    return history


# -- checkpoints --------------------------------------------------------------------

def checkpoint_arrays(params: NetworkParams, state: AdamState | None = None,
                      phase_index: int = 0, epoch: int = 0) -> dict[str, np.ndarray]:
    arrays = {name: p.data for name, p in params.items()}
    if state is not None:
        for name in params:
            arrays[f"adam.m.{name}"] = state.m[name]
            arrays[f"adam.v.{name}"] = state.v[name]
        arrays["adam.step"] = np.array([state.step], dtype=np.float32)
    arrays["train.position"] = np.array([phase_index, epoch], dtype=np.float32)
    return arrays


def checkpoint_save(path, params: NetworkParams, state: AdamState | None = None,
                    phase_index: int = 0, epoch: int = 0) -> None:
    save_checkpoint(path, checkpoint_arrays(params, state, phase_index, epoch))


def checkpoint_load(path, params: NetworkParams, state: AdamState | None = None) -> tuple[int, int]:
    """Load tensors into ``params`` (and moments/step into ``state``) in place.

    Optimizer hyperparameters stay as configured in ``state``; only the step
    counter and moment tensors are restored.  Returns ``(phase, next epoch)``.
    Raises :class:`ShapeError` listing every missing or mis-shaped tensor.
    """
    arrays = load_checkpoint(path)
    problems = []
    for name, p in params.items():
        if name not in arrays:
            problems.append(f"{name}: missing")
        elif arrays[name].shape != p.shape:
            problems.append(f"{name}: checkpoint {arrays[name].shape} vs model {p.shape}")
    extra = [n for n in arrays if not n.startswith(("adam.", "train.")) and n not in params]
    problems += [f"{n}: not in model" for n in extra]
    if problems:
        raise ShapeError("checkpoint does not match architecture:\n  " + "\n  ".join(problems))
    dtype = get_dtype()
    for name, p in params.items():
        p.data = arrays[name].astype(dtype)
        p.grad = None
    if state is not None and "adam.step" in arrays:
        state.step = int(arrays["adam.step"][0])
        for name in params:
            state.m[name] = arrays[f"adam.m.{name}"].astype(dtype)
            state.v[name] = arrays[f"adam.v.{name}"].astype(dtype)
    pos = arrays.get("train.position", np.zeros(2))
    return int(pos[0]), int(pos[1])
