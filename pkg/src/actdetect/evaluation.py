"""Detector evaluation: ranking metrics, attack-strength metrics, baselines.

Convention everywhere: anomalous/adversarial inputs are the positive
class and higher scores mean more anomalous. Baseline scores (MSP,
MC-dropout) are sign-normalized to match before any ranking metric sees
them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .dataio import PredictionRecord

COACT_EPS = 1e-9


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray  # 0 regular, 1 anomalous

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels must align")


def _require_both_classes(s: ScoredSet):
    if not (np.any(s.labels == 1) and np.any(s.labels == 0)):
        raise ValueError("need at least one positive and one negative")


def auroc(s: ScoredSet) -> float:
    """Probability a positive outranks a negative, ties counting half.

    Computed as the Mann-Whitney statistic via rank sums with average
    ranks for ties.
    """
    _require_both_classes(s)
    ranks = rankdata(s.scores, method="average")
    n_pos = int(np.sum(s.labels == 1))
    n_neg = len(s.labels) - n_pos
    rank_sum = float(np.sum(ranks[s.labels == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def aupr(s: ScoredSet) -> float:
    """Average precision over descending unique score thresholds."""
    if not np.any(s.labels == 1):
        raise ValueError("need at least one positive")
    order = np.argsort(-s.scores, kind="stable")
    scores = s.scores[order]
    labels = s.labels[order]
    tp = np.cumsum(labels == 1)
    fp = np.cumsum(labels == 0)
    # collapse runs of tied scores to their last (lowest-threshold) point
    last_of_tie = np.r_[scores[1:] != scores[:-1], True]
    tp, fp = tp[last_of_tie], fp[last_of_tie]
    n_pos = tp[-1]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev_recall) * precision))


def fpr_at_tpr(s: ScoredSet, n_percent: float) -> float:
    """Lowest FPR among thresholds reaching TPR >= n_percent / 100."""
    _require_both_classes(s)
    target = n_percent / 100.0
    if target <= 0.0:
        return 0.0
    pos = s.scores[s.labels == 1]
    neg = s.scores[s.labels == 0]
    best = 1.0
    for theta in np.unique(s.scores):
        tpr = np.mean(pos >= theta)
        if tpr >= target:
            best = min(best, float(np.mean(neg >= theta)))
    return best


def attack_metrics(orig_labels: np.ndarray, pert_labels: np.ndarray, n_classes: int):
    """Attack strength between clean and perturbed output label maps.

    AAcc is the fraction of pixels whose label changed. AIoU is one minus
    the mean IoU over classes present in either map; classes absent from
    both are skipped. Both are symmetric in their arguments.
    """
    orig = np.asarray(orig_labels)
    pert = np.asarray(pert_labels)
    if orig.shape != pert.shape:
        raise ValueError("label maps must have identical dims")
    if orig.max() >= n_classes or pert.max() >= n_classes:
        raise ValueError("label id out of range")
    aacc = float(np.mean(orig != pert))
    ious = []
    for c in range(n_classes):
        in_orig = orig == c
        in_pert = pert == c
        union = np.sum(in_orig | in_pert)
        if union == 0:
            continue
        ious.append(np.sum(in_orig & in_pert) / union)
    aiou = float(1.0 - np.mean(ious))
    return aacc, aiou


def msp_score(pred: PredictionRecord, tol: float = 1e-4) -> float:
    """Negated max-over-pixels max softmax probability (T = 1).

    The sign flip makes confident predictions score low, matching the
    higher = more anomalous convention.
    """
    maps = np.asarray(pred.softmax_maps, dtype=np.float64)
    if maps.shape[0] != 1:
        raise ValueError("MSP expects a single softmax pass")
    if not np.all(np.abs(maps.sum(axis=1) - 1.0) <= tol):
        raise ValueError("probabilities not normalized")
    return float(-maps[0].max(axis=0).max())


def mcd_score(pred: PredictionRecord, tol: float = 1e-4) -> float:
    """Max-over-pixels population variance of the per-pass MSP (T >= 2)."""
    maps = np.asarray(pred.softmax_maps, dtype=np.float64)
    if maps.shape[0] < 2:
        raise ValueError("MC-dropout scoring needs T >= 2 passes")
    if not np.all(np.abs(maps.sum(axis=1) - 1.0) <= tol):
        raise ValueError("probabilities not normalized")
    per_pass_msp = maps.max(axis=1)  # (T, H, W)
    return float(per_pass_msp.var(axis=0).max())


def coactivation_diff(features_pert, features_clean) -> np.ndarray:
    """Difference of log-magnitude pairwise activation products.

    Rows/columns are ordered by clean co-activation strength (descending
    row sums of the clean matrix), so perturbation-induced structure
    stands out against an ordered background.
    """
    a = np.asarray(features_pert, dtype=np.float64)
    b = np.asarray(features_clean, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("feature vectors must have equal length")
    m_pert = np.log(np.abs(np.outer(a, a)) + COACT_EPS)
    m_clean = np.log(np.abs(np.outer(b, b)) + COACT_EPS)
    order = np.argsort(-m_clean.sum(axis=1), kind="stable")
    return m_pert[np.ix_(order, order)] - m_clean[np.ix_(order, order)]


@dataclass
class EvalReport:
    per_perturbation: dict[str, dict[str, float]] = field(default_factory=dict)
    attack_strength: dict[str, dict[str, float]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "per_perturbation": self.per_perturbation,
            "attack_strength": self.attack_strength,
            "metadata": self.metadata,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls(
            per_perturbation=doc.get("per_perturbation", {}),
            attack_strength=doc.get("attack_strength", {}),
            metadata=doc.get("metadata", {}),
        )

    def render_table(self) -> str:
        """Aligned plain-text table, one row per perturbation."""
        lines = []
        header = f"{'Perturbation':<28} {'AUROC':>7} {'AUPR':>7} {'FPR95':>7}"
        lines.append(header)
        lines.append("-" * len(header))
        for name in sorted(self.per_perturbation):
            row = self.per_perturbation[name]
            lines.append(
                f"{name:<28} {row.get('auroc', float('nan')):>7.3f} "
                f"{row.get('aupr', float('nan')):>7.3f} {row.get('fpr95', float('nan')):>7.3f}"
            )
        if self.attack_strength:
            lines.append("")
            lines.append(f"{'Perturbation':<28} {'AAcc':>7} {'AIoU':>7}")
            lines.append("-" * 44)
            for name in sorted(self.attack_strength):
                row = self.attack_strength[name]
                lines.append(f"{name:<28} {row['aacc']:>7.3f} {row['aiou']:>7.3f}")
        return "\n".join(lines) + "\n"


def evaluate_perturbation(clean_scores, pert_scores, fpr_tpr_percent: float = 95.0) -> dict[str, float]:
    """AUROC/AUPR/FPR@N for one perturbation against the clean test set."""
    scores = np.concatenate([clean_scores, pert_scores])
    labels = np.concatenate([np.zeros(len(clean_scores)), np.ones(len(pert_scores))])
    s = ScoredSet(scores=scores, labels=labels)
    return {
        "auroc": auroc(s),
        "aupr": aupr(s),
        "fpr95": fpr_at_tpr(s, fpr_tpr_percent),
    }
