"""Dice overlap, ROC curves and AUC, plus the text/SVG report formats."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, MetricError


def dice(pred_mask, true_mask) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks score 1.0."""
    a = np.asarray(pred_mask)
    b = np.asarray(true_mask)
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not (np.isin(a, (0, 1)).all() and np.isin(b, (0, 1)).all()):
        raise ContractError("dice expects binary masks")
    a, b = a.astype(bool), b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def binarize(soft_mask, threshold: float = 0.5) -> np.ndarray:
    """Foreground where p(mass) >= threshold; accepts (..., 2) fields or p(mass) maps."""
    if not 0 < threshold < 1:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    p = np.asarray(getattr(soft_mask, "data", soft_mask))
    if p.ndim >= 3 and p.shape[-1] == 2:
        p = p[..., 1]
    return (p >= threshold).astype(np.float32)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_auc(scores, labels) -> RocCurve:
    """ROC by sweeping a threshold over every distinct score, highest first.

    The first point is (0, 0) at threshold +inf.  Tied scores move together,
    which gives ties half credit in the trapezoidal area.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ContractError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: need at least one positive and one negative")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s_sorted.size - 1]
    tps = np.cumsum(y_sorted == 1)[last_of_run]
    fps = np.cumsum(y_sorted == 0)[last_of_run]
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s_sorted[last_of_run]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, thresholds, auc)


def mann_whitney_auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative; ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("AUC undefined: need at least one positive and one negative")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


@dataclass
class MetricReport:
    dice: list = field(default_factory=list)   # (sample_id, value)
    auc: dict = field(default_factory=dict)    # split -> value
    roc: dict = field(default_factory=dict)    # split -> RocCurve

    def add_roc(self, split: str, curve: RocCurve) -> None:
        self.roc[split] = curve
        self.auc[split] = curve.auc

    def mean_dice(self) -> float:
        return float(np.mean([v for _, v in self.dice])) if self.dice else float("nan")

    def to_text(self) -> str:
        lines = [f"dice {sid} {v:.6f}" for sid, v in self.dice]
        lines += [f"auc {split} {v:.6f}" for split, v in self.auc.items()]
        for split, c in self.roc.items():
            lines += [f"roc {split} {f:.6f} {t:.6f} {th:.6g}" for f, t, th in zip(c.fpr, c.tpr, c.thresholds)]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def parse(cls, text: str) -> "MetricReport":
        rep = cls()
        rocs: dict = {}
        for line in text.splitlines():
            parts = line.split()
            if not parts:
                continue
            kind = parts[0]
            if kind == "dice":
                rep.dice.append((parts[1], float(parts[2])))
            elif kind == "auc":
                rep.auc[parts[1]] = float(parts[2])
            elif kind == "roc":
                rocs.setdefault(parts[1], []).append([float(v) for v in parts[2:5]])
            else:
                raise ValueError(f"unknown report line: {line!r}")
        for split, rows in rocs.items():
            arr = np.array(rows)
            rep.roc[split] = RocCurve(arr[:, 0], arr[:, 1], arr[:, 2], rep.auc.get(split, float("nan")))
        return rep


def roc_svg(curves: dict, size: int = 320) -> str:
    """ROC curves as SVG polylines on a unit square with a chance diagonal."""
    pad = 30
    inner = size - 2 * pad
    colors = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="#000"/>',
             f'<line x1="{pad}" y1="{pad + inner}" x2="{pad + inner}" y2="{pad}" stroke="#999" stroke-dasharray="4"/>']
    for i, (name, c) in enumerate(curves.items()):
        pts = " ".join(f"{pad + f * inner:.2f},{pad + (1 - t) * inner:.2f}" for f, t in zip(c.fpr, c.tpr))
        color = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{pad + inner - 110}" y="{pad + inner - 10 - 14 * i}" font-size="11" '
                     f'fill="{color}">{name} AUC={c.auc:.3f}</text>')
    parts.append(f'<text x="{size / 2}" y="{size - 6}" font-size="11" text-anchor="middle">FPR</text>')
    parts.append(f'<text x="10" y="{size / 2}" font-size="11" transform="rotate(-90 10 {size / 2})">TPR</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
