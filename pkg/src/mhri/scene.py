"""Turn-taking prior and the composite scene loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Dist, Tensor
from .data import N_PARTICIPANTS
from .errors import ConfigError, ContractError
from .model import ScenePrediction


@dataclass(frozen=True)
class ScenePriorParams:
    alpha_repeat: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.alpha_repeat < 1.0:
            raise ConfigError(f"alpha_repeat={self.alpha_repeat} must lie in (0, 1)")


@dataclass
class LossTerms:
    """A head's loss: ``ce + weight * kl`` (``kl`` is None when the regularizer is off)."""

    ce: Tensor
    kl: Tensor | None
    weight: float

    @property
    def total(self) -> Tensor:
        if self.kl is None or self.weight == 0.0:
            return self.ce
        return self.ce + self.kl * self.weight

    def components(self) -> tuple[float, float]:
        return float(self.ce.data), 0.0 if self.kl is None else float(self.kl.data)


def scene_prior(previous_speaker: int | None, params: ScenePriorParams = ScenePriorParams()) -> Dist:
    """Next-speaker prior that damps immediate self-continuation."""
    if previous_speaker is None or previous_speaker < 0:
        return Dist(np.full(N_PARTICIPANTS, 1.0 / N_PARTICIPANTS))
    probs = np.full(N_PARTICIPANTS, (1.0 - params.alpha_repeat) / (N_PARTICIPANTS - 1))
    probs[previous_speaker] = params.alpha_repeat
    return Dist(probs)


def scene_prior_table(prev_speaker: np.ndarray, params: ScenePriorParams = ScenePriorParams()) -> np.ndarray:
    """Priors for an array of previous speakers (``-1`` = none); shape ``prev.shape + (3,)``."""
    table = np.stack([scene_prior(p, params).probs for p in (None, 0, 1, 2)])
    return table[np.asarray(prev_speaker) + 1]


def masked_row_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``values`` over positions where ``mask`` is true (0 if none)."""
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        return (values * 0.0).sum()
    return (values * mask).sum() * (1.0 / count)


def scene_loss(
    pred: ScenePrediction,
    speaker: np.ndarray,
    listeners: np.ndarray,
    scene_mask: np.ndarray,
    priors: np.ndarray | None,
    lambda_s: float = 0.01,
    use_kl: bool = True,
) -> LossTerms:
    """Speaker CE + listener BCE (speaker's own bit excluded), plus the prior KL.

    ``speaker``/``scene_mask`` have shape ``[..., L]``; ``listeners`` and
    ``priors`` ``[..., L, 3]``.
    """
    if lambda_s < 0:
        raise ConfigError("lambda_s must be non-negative")
    logits = pred.speaker_logits
    lead = logits.shape[:-1]
    speaker = np.asarray(speaker)
    scene_mask = np.asarray(scene_mask, dtype=bool)
    listeners = np.asarray(listeners, dtype=np.float64)
    if speaker.shape != lead or scene_mask.shape != lead or listeners.shape != logits.shape:
        raise ContractError(
            f"scene truth shapes {speaker.shape}/{scene_mask.shape}/{listeners.shape} do not match {logits.shape}")
    flat = logits.reshape(-1, N_PARTICIPANTS)
    ce_speaker = ag.masked_cross_entropy(flat, speaker.reshape(-1), scene_mask.reshape(-1))
    own = np.eye(N_PARTICIPANTS)[np.where(scene_mask, speaker, 0)]
    weights = scene_mask[..., None] * (1.0 - own)
    ce_listener = ag.masked_bce_with_logits(pred.listener_logits, listeners, weights)
    ce = ce_speaker + ce_listener
    kl = None
    if use_kl:
        if priors is None or np.shape(priors) != logits.shape:
            raise ContractError("scene KL needs priors shaped like the speaker distribution")
        kl = masked_row_mean(ag.kl_divergence(pred.speaker_dist, priors), scene_mask)
    return LossTerms(ce, kl, lambda_s)
