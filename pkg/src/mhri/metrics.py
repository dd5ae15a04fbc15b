"""Gaze-stratified response accuracy."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .data import Category, Episode
from .errors import ContractError
from .model import MHRIModel, collate, readout


@dataclass
class MetricsReport:
    acc_misaligned: float | None
    acc_aligned: float | None
    acc_average: float | None
    n_misaligned: int
    n_aligned: int
    correct_misaligned: int = 0
    correct_aligned: int = 0
    per_decision_seconds: float | None = None
    speaker_acc: float | None = None
    listener_acc: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "MetricsReport":
        return cls(**values)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def compute_metrics(predictions, truth, categories, masks=None) -> MetricsReport:
    """Exact-match 4-way accuracy on scored positions, split by gaze alignment.

    G=L is the Consistency category; G!=L the two misaligned categories. The
    average is micro-averaged over both subsets. An empty subset reports
    ``None`` rather than 0.
    """
    pred = np.asarray(predictions).reshape(-1)
    true = np.asarray(truth).reshape(-1)
    cats = [c.value if isinstance(c, Category) else c for c in np.asarray(categories, dtype=object).reshape(-1)]
    if masks is None:
        scored = np.ones(pred.shape, dtype=bool)
    else:
        scored = np.asarray(masks, dtype=bool).reshape(-1)
    if not (pred.shape == true.shape == scored.shape) or len(cats) != pred.size:
        raise ContractError("predictions, truth, categories and masks must align")
    hit = pred == true
    aligned = np.array([c == Category.CONSISTENCY.value for c in cats]) & scored
    misaligned = np.array([c in (Category.LOOK_WITHOUT_SPEAK.value, Category.SPEAK_WITHOUT_LOOK.value)
                           for c in cats]) & scored
    n_a, n_m = int(aligned.sum()), int(misaligned.sum())
    c_a, c_m = int((hit & aligned).sum()), int((hit & misaligned).sum())
    return MetricsReport(
        acc_misaligned=_ratio(c_m, n_m),
        acc_aligned=_ratio(c_a, n_a),
        acc_average=_ratio(c_a + c_m, n_a + n_m),
        n_misaligned=n_m,
        n_aligned=n_a,
        correct_misaligned=c_m,
        correct_aligned=c_a,
    )


def predict_episodes(model: MHRIModel, episodes: Sequence[Episode], coupling: str | None = None,
                     batch_size: int = 16) -> list[list[dict]]:
    """Per-episode discrete readouts (eval mode, no dropout)."""
    results = []
    for start in range(0, len(episodes), batch_size):
        chunk = episodes[start:start + batch_size]
        batch = collate(chunk)
        with ag.no_grad():
            out = model.forward_batch(batch, coupling=coupling)
        for row, ep in enumerate(chunk):
            results.append(readout(out, row, len(ep)))
    return results


def evaluate_model(model: MHRIModel, episodes: Sequence[Episode], coupling: str | None = None) -> MetricsReport:
    preds = predict_episodes(model, episodes, coupling)
    flat_pred, flat_true, flat_cat, flat_mask = [], [], [], []
    spk_hit = lis_hit = n = 0
    for ep, rows in zip(episodes, preds):
        for u, p in zip(ep.utterances, rows):
            flat_pred.append(p["response"])
            flat_true.append(int(u.response))
            flat_cat.append(u.gaze.category.value)
            flat_mask.append(u.is_human)
            spk_hit += p["speaker"] == u.speaker
            lis_hit += tuple(p["listeners"]) == tuple(u.scene.listeners)
            n += 1
    report = compute_metrics(flat_pred, flat_true, flat_cat, flat_mask)
    report.speaker_acc = _ratio(spk_hit, n)
    report.listener_acc = _ratio(lis_hit, n)
    return report


def mean_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Unweighted mean of each accuracy over reports that define it; counts are summed."""

    def avg(attr):
        vals = [getattr(r, attr) for r in reports if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else None

    return MetricsReport(
        acc_misaligned=avg("acc_misaligned"),
        acc_aligned=avg("acc_aligned"),
        acc_average=avg("acc_average"),
        n_misaligned=sum(r.n_misaligned for r in reports),
        n_aligned=sum(r.n_aligned for r in reports),
        correct_misaligned=sum(r.correct_misaligned for r in reports),
        correct_aligned=sum(r.correct_aligned for r in reports),
        per_decision_seconds=avg("per_decision_seconds"),
        speaker_acc=avg("speaker_acc"),
        listener_acc=avg("listener_acc"),
    )
