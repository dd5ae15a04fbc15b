"""Robot-address prior and the composite response loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Dist
from .data import N_DECISIONS, Decision, Participant
from .errors import ConfigError, ContractError
from .model import ResponsePrediction
from .scene import LossTerms, masked_row_mean


@dataclass(frozen=True)
class ResponsePriorParams:
    p_respond_addressed: float = 0.8
    p_none_addressed: float = 0.1
    p_none_unaddressed: float = 0.9
    beta_self_turn: float = 0.5

    def __post_init__(self):
        for name in ("p_respond_addressed", "p_none_addressed", "p_none_unaddressed", "beta_self_turn"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name}={value} must lie in (0, 1)")
        if self.p_respond_addressed + self.p_none_addressed > 1.0:
            raise ConfigError("p_respond_addressed + p_none_addressed must not exceed 1")


def response_prior(
    speaker: int,
    listeners: Sequence[int],
    previous_speaker: int | None,
    params: ResponsePriorParams = ResponsePriorParams(),
) -> Dist:
    """Prior over {None, RespondH1, RespondH2, RespondBoth} for one utterance.

    The robot cannot address itself, so a robot speaker always takes the
    unaddressed branch.
    """
    probs = np.empty(N_DECISIONS)
    addressed = speaker != Participant.R and bool(listeners[Participant.R])
    if addressed:
        target = 1 + int(speaker)  # RespondH1 / RespondH2
        rest = (1.0 - params.p_none_addressed - params.p_respond_addressed) / 2.0
        probs[:] = rest
        probs[Decision.NONE] = params.p_none_addressed
        probs[target] = params.p_respond_addressed
    else:
        probs[:] = (1.0 - params.p_none_unaddressed) / 3.0
        probs[Decision.NONE] = params.p_none_unaddressed
    if previous_speaker is not None and previous_speaker == Participant.R:
        probs[1:] *= params.beta_self_turn
        probs /= probs.sum()
    return Dist(probs)


def response_prior_table(
    speaker: np.ndarray,
    listeners: np.ndarray,
    prev_speaker: np.ndarray,
    params: ResponsePriorParams = ResponsePriorParams(),
) -> np.ndarray:
    """Vectorised priors from ground-truth scenes; ``prev_speaker`` uses -1 for none."""
    speaker = np.asarray(speaker)
    out = np.empty(speaker.shape + (N_DECISIONS,))
    cache: dict[tuple, np.ndarray] = {}
    for idx in np.ndindex(speaker.shape):
        prev = int(prev_speaker[idx])
        key = (int(speaker[idx]), tuple(int(x) for x in listeners[idx]), prev)
        if key not in cache:
            cache[key] = response_prior(key[0], key[1], None if prev < 0 else prev, params).probs
        out[idx] = cache[key]
    return out


def response_loss(
    pred: ResponsePrediction,
    response: np.ndarray,
    response_mask: np.ndarray,
    priors: np.ndarray | None,
    lambda_r: float = 0.01,
    use_kl: bool = True,
) -> LossTerms:
    """Masked 4-way CE plus KL to the robot-address prior (robot turns and padding excluded)."""
    if lambda_r < 0:
        raise ConfigError("lambda_r must be non-negative")
    logits = pred.logits
    response = np.asarray(response)
    response_mask = np.asarray(response_mask, dtype=bool)
    if response.shape != logits.shape[:-1] or response_mask.shape != logits.shape[:-1]:
        raise ContractError(
            f"response truth {response.shape}/{response_mask.shape} does not match logits {logits.shape}")
    ce = ag.masked_cross_entropy(logits.reshape(-1, N_DECISIONS), response.reshape(-1), response_mask.reshape(-1))
    kl = None
    if use_kl:
        if priors is None or np.shape(priors) != logits.shape:
            raise ContractError("response KL needs priors shaped like the response distribution")
        kl = masked_row_mean(ag.kl_divergence(pred.response_dist, priors), response_mask)
    return LossTerms(ce, kl, lambda_r)
