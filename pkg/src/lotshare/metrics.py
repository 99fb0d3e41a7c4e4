"""Evaluation metrics: AUC, MSE, the MTL-gain comparison, and the rank score."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedMetricError
from .model import Task


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(labels, scores) -> float:
    """Mann-Whitney AUC: P(random positive outranks random negative), ties 0.5."""
    labels = np.asarray(labels, dtype=np.float64).ravel()
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if labels.shape != scores.shape:
        raise ValueError(f"auc: {len(labels)} labels vs {len(scores)} scores")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc needs both a positive and a negative sample")
    ranks = _average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mse(labels, predictions) -> float:
    labels = np.asarray(labels, dtype=np.float64).ravel()
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    if labels.size == 0:
        raise ValueError("mse: empty input")
    if labels.shape != predictions.shape:
        raise ValueError(f"mse: {len(labels)} labels vs {len(predictions)} predictions")
    return float(np.mean(np.square(predictions - labels)))


def mtl_gain(metric_single: float, metric_mtl: float, task: Task) -> tuple[float, float]:
    """(absolute, relative) multi-task gain over the single-task model.

    Sign convention: an improvement is positive for both tasks — AUC going up
    for CTR and MSE going down for CVR both give a positive gain. Relative
    gain is absolute gain over the single-task metric.
    """
    if not (np.isfinite(metric_single) and np.isfinite(metric_mtl)):
        raise ValueError("mtl_gain: non-finite metric")
    if Task(task) is Task.CTR:
        absolute = metric_mtl - metric_single
    else:
        absolute = metric_single - metric_mtl
    if metric_single == 0:
        raise ValueError("mtl_gain: relative gain undefined for zero single-task metric")
    return absolute, absolute / metric_single


def format_gain(absolute: float, relative: float) -> str:
    """Comparison-table cell, e.g. '+0.00462 (+3.38%)'."""
    return f"{absolute:+.5f} ({relative * 100.0:+.2f}%)"


@dataclass(frozen=True)
class RankInput:
    pctr: float
    pcvr: float
    video_length: float
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.pctr < 1.0 or not 0.0 < self.pcvr < 1.0:
            raise ValueError(f"probabilities must be in (0,1): pctr={self.pctr}, pcvr={self.pcvr}")
        if self.video_length <= 0:
            raise ValueError(f"video_length must be positive, got {self.video_length}")


def rank_score(inp: RankInput) -> float:
    """pCTR^alpha * pCVR^beta * video_length^gamma."""
    return float(inp.pctr ** inp.alpha * inp.pcvr ** inp.beta
                 * inp.video_length ** inp.gamma)


def rank_top_k(candidates: list[RankInput], k: int) -> list[int]:
    """Indices of the k highest rank scores, ties broken by candidate index."""
    if k > len(candidates):
        raise ValueError(f"rank_top_k: k={k} exceeds {len(candidates)} candidates")
    scores = [rank_score(c) for c in candidates]
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], i))
    return order[:k]


@dataclass
class MetricsReport:
    """Per-run evaluation summary, serializable to text and key=value lines."""

    mode: str
    metrics: dict[str, float]                 # e.g. {"ctr_auc": ..., "cvr_mse": ...}
    sparsity: dict[str, float] = field(default_factory=dict)   # per task
    overlap: dict[str, int] = field(default_factory=dict)
    gains: dict[str, str] = field(default_factory=dict)
    config_fingerprint: str = ""
    notes: dict[str, str] = field(default_factory=dict)

    def to_kv_lines(self) -> list[str]:
        lines = [f"mode={self.mode}"]
        if self.config_fingerprint:
            lines.append(f"config_fingerprint={self.config_fingerprint}")
        for k in sorted(self.metrics):
            lines.append(f"metric.{k}={self.metrics[k]:.10g}")
        for k in sorted(self.sparsity):
            lines.append(f"sparsity.{k}={self.sparsity[k]:.10g}")
        for k in sorted(self.overlap):
            lines.append(f"overlap.{k}={self.overlap[k]}")
        for k in sorted(self.gains):
            lines.append(f"gain.{k}={self.gains[k]}")
        for k in sorted(self.notes):
            lines.append(f"note.{k}={self.notes[k]}")
        return lines

    def to_text(self) -> str:
        lines = [f"sharing mode : {self.mode}"]
        if self.config_fingerprint:
            lines.append(f"config       : {self.config_fingerprint}")
        for k in sorted(self.metrics):
            lines.append(f"{k:<13}: {self.metrics[k]:.5f}")
        for k in sorted(self.sparsity):
            lines.append(f"sparsity {k:<4}: {self.sparsity[k]:.5f}")
        for k in sorted(self.overlap):
            lines.append(f"overlap {k:<5}: {self.overlap[k]}")
        for k in sorted(self.gains):
            lines.append(f"gain {k:<8}: {self.gains[k]}")
        for k in sorted(self.notes):
            lines.append(f"{k}: {self.notes[k]}")
        return "\n".join(lines)

    @classmethod
    def from_kv_lines(cls, lines) -> "MetricsReport":
        rep = cls(mode="", metrics={})
        for line in lines:
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, val = line.split("=", 1)
            if key == "mode":
                rep.mode = val
            elif key == "config_fingerprint":
                rep.config_fingerprint = val
            elif key.startswith("metric."):
                rep.metrics[key[7:]] = float(val)
            elif key.startswith("sparsity."):
                rep.sparsity[key[9:]] = float(val)
            elif key.startswith("overlap."):
                rep.overlap[key[8:]] = int(val)
            elif key.startswith("gain."):
                rep.gains[key[5:]] = val
            elif key.startswith("note."):
                rep.notes[key[5:]] = val
        return rep
