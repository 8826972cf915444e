"""End-to-end runs: the full training schedule with checkpoints, and evaluation.

A training run directory holds

* ``history.tsv``: one ``phase epoch loss metric`` row per epoch,
* ``last.ckpt``: parameters, Adam moments and position after the latest epoch,
* ``<phase>.ckpt``: a snapshot at the end of each phase,
* ``best.ckpt``: the best-metric epoch of the last phase run,
* ``final.ckpt``: parameters after the whole schedule.

Resuming reads ``last.ckpt`` and continues from the recorded epoch; every
random draw after that point is keyed on ``(seed, phase, epoch)``, so the
result matches an uninterrupted run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .crf import CrfConfig
from .data import augment_flips
from .errors import TrainingError
from .layers import NetworkParams
from .metrics import MetricReport, binarize, dice, roc_auc
from .model import NetworkConfig, cgl_forward, fused_forward, init_network, lpl_forward
from .tensor import make_rng, no_grad
from .training import AdamState, TrainConfig, build_plan, checkpoint_load, checkpoint_save, make_batch, run_phase

log = logging.getLogger(__name__)

HISTORY_HEADER = "phase\tepoch\tloss\tmetric"
# Phase whose end snapshot scores the single-path classifiers: both path heads
# are trained by then and the joint phase has not touched them yet.
PATH_SNAPSHOT = "cgl_cls"


@dataclass
class TrainResult:
    params: NetworkParams
    history: list = field(default_factory=list)
    path_params: NetworkParams | None = None  # snapshot scoring the LPL-only and CGL-only heads


def training_samples(train: Sequence, augment: bool) -> list:
    if not augment:
        return list(train)
    return [a for s in train for a in augment_flips(s)]


def _write_history(path: Path, history: list) -> None:
    rows = [HISTORY_HEADER] + [f"{r['phase']}\t{r['epoch']}\t{r['loss']!r}\t{r['metric']!r}" for r in history]
    path.write_text("\n".join(rows) + "\n")


def _read_history(path: Path) -> list:
    if not path.is_file():
        return []
    out = []
    for line in path.read_text().splitlines()[1:]:
        phase, epoch, loss, metric = line.split("\t")
        out.append({"phase": phase, "epoch": int(epoch), "loss": float(loss), "metric": float(metric)})
    return out


def train_model(train: Sequence, net_cfg: NetworkConfig, crf_cfg: CrfConfig, tcfg: TrainConfig,
                out_dir=None, resume: bool = False, augment: bool = False,
                on_epoch_end: Callable[[dict], None] | None = None, negatives: Sequence = ()) -> TrainResult:
    """Run every phase of the schedule on ``train`` (the test half is never passed in).

    With ``out_dir`` set, checkpoints and ``history.tsv`` are written there;
    ``resume=True`` continues from ``out_dir/last.ckpt`` when it exists.
    ``augment`` adds the three flipped copies of every training ROI.
    ``negatives`` (mass-free crops) join the segmentation phases only.
    """
    samples = training_samples(train, augment)
    seg_samples = samples + training_samples(negatives, augment)
    if not samples:
        raise TrainingError("empty training set")
    plan = build_plan(tcfg)
    if not plan:
        raise TrainingError("every phase has zero epochs")
    params = init_network(net_cfg, make_rng(tcfg.seed, 0))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    start_phase, start_epoch, history = 0, 0, []
    resume_state = None
    if resume and out is not None and (out / "last.ckpt").is_file():
        resume_state = AdamState.for_params(params)
        start_phase, start_epoch = checkpoint_load(out / "last.ckpt", params, resume_state)
        history = [r for r in _read_history(out / "history.tsv")
                   if (_phase_index(plan, r["phase"]), r["epoch"]) < (start_phase, start_epoch)]
        log.info("resuming at phase %d epoch %d", start_phase, start_epoch)

    path_params = None
    best_metric = -np.inf
    for index, phase in enumerate(plan):
        if index < start_phase:
            if phase.name == PATH_SNAPSHOT and out is not None:
                path_params = params.clone()
                checkpoint_load(out / f"{phase.name}.ckpt", path_params)
            continue
        if index == start_phase and resume_state is not None:
            state = resume_state
            state.lr, state.beta1, state.beta2, state.eps = phase.lr, tcfg.beta1, tcfg.beta2, tcfg.eps
            first = start_epoch
        else:
            state = AdamState.for_params(params, lr=phase.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps)
            first = 0
        if index == len(plan) - 1 and out is not None and first > 0:
            best_metric = max((r["metric"] for r in history if r["phase"] == phase.name), default=-np.inf)

        def epoch_done(record, next_epoch, index=index, phase=phase, state=state):
            nonlocal best_metric
            history.append(record)
            if out is not None:
                checkpoint_save(out / "last.ckpt", params, state, index, next_epoch)
                _write_history(out / "history.tsv", history)
                if index == len(plan) - 1 and record["metric"] > best_metric:
                    best_metric = record["metric"]
                    checkpoint_save(out / "best.ckpt", params)
            if on_epoch_end is not None:
                on_epoch_end(record)

        run_phase(phase, index, seg_samples if phase.loss == "seg" else samples, params, state, net_cfg, crf_cfg, tcfg, first, epoch_done)
        if out is not None:
            checkpoint_save(out / f"{phase.name}.ckpt", params)
        if phase.name == PATH_SNAPSHOT:
            path_params = params.clone()

    if out is not None:
        checkpoint_save(out / "final.ckpt", params)
        _write_history(out / "history.tsv", history)
    return TrainResult(params, history, path_params)


def _phase_index(plan, name: str) -> int:
    for i, p in enumerate(plan):
        if p.name == name:
            return i
    return len(plan)


# -- evaluation ---------------------------------------------------------------------

def predict(samples: Sequence, params: NetworkParams, net_cfg: NetworkConfig, crf_cfg: CrfConfig,
            batch_size: int = 16) -> dict:
    """Inference-mode outputs over ``samples``: malignancy scores per head and soft masks."""
    fused, lpl, cgl, masks = [], [], [], []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            b = make_batch(samples[start:start + batch_size], net_cfg)
            out = fused_forward(b["context"], b["bbox"], params, net_cfg, crf_cfg)
            fused.append(out.class_probs.data[:, 1])
            lpl.append(out.lpl_probs.data[:, 1])
            cgl.append(out.cgl_probs.data[:, 1])
            masks.append(out.soft_mask.data)
    cat = lambda xs: np.concatenate(xs).astype(np.float64)  # noqa: E731
    return {"fused": cat(fused), "lpl": cat(lpl), "cgl": cat(cgl), "soft_mask": np.concatenate(masks)}


def path_scores(samples: Sequence, params: NetworkParams, net_cfg: NetworkConfig, crf_cfg: CrfConfig,
                batch_size: int = 16) -> dict:
    """Scores of the two single-path heads only (no fusion head needed)."""
    lpl, cgl = [], []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            b = make_batch(samples[start:start + batch_size], net_cfg)
            probs, _ = lpl_forward(b["context"], params, net_cfg)
            lpl.append(probs.data[:, 1])
            cgl.append(cgl_forward(b["bbox"], params, net_cfg, crf_cfg)["probs"].data[:, 1])
    return {"lpl": np.concatenate(lpl).astype(np.float64), "cgl": np.concatenate(cgl).astype(np.float64)}


def evaluate(samples: Sequence, params: NetworkParams, net_cfg: NetworkConfig, crf_cfg: CrfConfig,
             path_params: NetworkParams | None = None, threshold: float = 0.5) -> MetricReport:
    """Per-sample Dice of the binarized mask and ROC/AUC for fused, LPL and CGL heads.

    When ``path_params`` is given the two single-path AUCs come from that
    snapshot; otherwise from the heads of ``params``.
    """
    if not samples:
        raise TrainingError("nothing to evaluate")
    pred = predict(samples, params, net_cfg, crf_cfg)
    report = MetricReport()
    for s, soft in zip(samples, pred["soft_mask"]):
        report.dice.append((s.id, dice(binarize(soft, threshold), np.asarray(s.mask_roi))))
    labels = np.array([s.label for s in samples])
    paths = path_scores(samples, path_params, net_cfg, crf_cfg) if path_params is not None else pred
    if len(set(labels.tolist())) == 2:
        report.add_roc("fused", roc_auc(pred["fused"], labels))
        report.add_roc("lpl", roc_auc(paths["lpl"], labels))
        report.add_roc("cgl", roc_auc(paths["cgl"], labels))
    else:
        log.warning("evaluation set holds a single class; AUC is undefined and omitted")
    return report
