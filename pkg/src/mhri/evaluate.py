"""Gaze baseline, ablation runner, latency measurement and embedding export."""

from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

from threadpoolctl import threadpool_limits

from . import autograd as ag
from .data import Decision, Episode, Participant, respond_to
from .errors import ContractError, MhriError
from .metrics import MetricsReport, compute_metrics, mean_reports
from .model import MHRIModel, collate
from .train import AblationFlags, TrainConfig, cross_validate

log = logging.getLogger(__name__)

ABLATION_FLAGS: dict[str, AblationFlags] = {
    "a": AblationFlags(multitask=False, kl_s=False, kl_r=False),
    "b": AblationFlags(multitask=False, kl_s=False, kl_r=True),
    "c": AblationFlags(multitask=True, kl_s=False, kl_r=False),
    "d": AblationFlags(multitask=True, kl_s=False, kl_r=True),
    "e": AblationFlags(multitask=True, kl_s=True, kl_r=False),
    "f": AblationFlags(multitask=True, kl_s=True, kl_r=True),
}


@dataclass
class AblationRow:
    row_id: str
    flags: AblationFlags
    metrics: MetricsReport
    per_seed: list[MetricsReport] = field(default_factory=list)
    # summed logged KL components over every epoch of every fold and seed
    kl_s_logged: float = 0.0
    kl_r_logged: float = 0.0

    def to_dict(self) -> dict:
        return {
            "row_id": self.row_id,
            "flags": {"multitask": self.flags.multitask, "kl_s": self.flags.kl_s, "kl_r": self.flags.kl_r},
            "metrics": self.metrics.to_dict(),
            "per_seed": [m.to_dict() for m in self.per_seed],
            "kl_s_logged": self.kl_s_logged,
            "kl_r_logged": self.kl_r_logged,
        }


# ------------------------------------------------------------------ baseline
def gaze_rule(u) -> Decision:
    if u.speaker != Participant.R and u.gaze.target == Participant.R:
        return respond_to(u.speaker)
    return Decision.NONE


def run_gaze_baseline(episodes: Sequence[Episode]) -> MetricsReport:
    """If-then rule: gaze on the robot means respond to the speaker, otherwise stay silent."""
    pred, truth, cats, mask = [], [], [], []
    for ep in episodes:
        for u in ep.utterances:
            pred.append(int(gaze_rule(u)))
            truth.append(int(u.response))
            cats.append(u.gaze.category.value)
            mask.append(u.is_human)
    return compute_metrics(pred, truth, cats, mask)


# ------------------------------------------------------------------ ablation
def run_ablation(episodes: Sequence[Episode], base: TrainConfig, seeds: Sequence[int],
                 rows: Sequence[str] = tuple(ABLATION_FLAGS), workers: int | None = None) -> list[AblationRow]:
    """Cross-validate every flag pattern for every seed; metrics are means over seeds."""
    if not seeds:
        raise ContractError("run_ablation needs at least one seed")
    out = []
    for row_id in rows:
        flags = ABLATION_FLAGS[row_id]
        reports, kl_s, kl_r = [], 0.0, 0.0
        for seed in seeds:
            config = base.with_flags(flags, seed=int(seed))
            try:
                cv = cross_validate(episodes, config, workers=workers)
            except MhriError as exc:
                raise type(exc)(f"ablation row ({row_id}), seed {seed}: {exc}") from exc
            reports.append(cv.aggregate)
            for fold in cv.folds:
                kl_s += sum(e["l_kl_s"] for e in fold.epochs)
                kl_r += sum(e["l_kl_r"] for e in fold.epochs)
        row = AblationRow(row_id, flags, mean_reports(reports), reports, kl_s, kl_r)
        log.info("ablation row (%s): average %.4f", row_id, row.metrics.acc_average or float("nan"))
        out.append(row)
    return out


def _pct(value: float | None) -> str:
    return "-" if value is None else f"{100 * value:.1f}"


def render_ablation_table(rows: Sequence[AblationRow]) -> str:
    mark = {True: "x", False: " "}
    lines = [f"{'':4}{'M':>3}{'KLs':>5}{'KLr':>5}{'G!=L':>8}{'G=L':>8}{'Average':>9}"]
    for r in rows:
        m = r.metrics
        lines.append(
            f"({r.row_id}) {mark[r.flags.multitask]:>2}{mark[r.flags.kl_s]:>5}{mark[r.flags.kl_r]:>5}"
            f"{_pct(m.acc_misaligned):>8}{_pct(m.acc_aligned):>8}{_pct(m.acc_average):>9}"
        )
    return "\n".join(lines)


def render_results_table(reports: dict[str, MetricsReport]) -> str:
    width = max([len("Method")] + [len(k) for k in reports])
    lines = [f"{'Method':<{width}}{'G!=L':>8}{'G=L':>8}{'Average':>9}{'Time (s)':>10}"]
    for name, m in reports.items():
        t = "-" if m.per_decision_seconds is None else f"{m.per_decision_seconds:.4f}"
        lines.append(f"{name:<{width}}{_pct(m.acc_misaligned):>8}{_pct(m.acc_aligned):>8}"
                     f"{_pct(m.acc_average):>9}{t:>10}")
    return "\n".join(lines)


# ------------------------------------------------------------------- latency
def measure_latency(model: MHRIModel, episodes: Sequence[Episode], repetitions: int = 5) -> tuple[float, float]:
    """Mean and standard deviation of per-decision forward time in seconds.

    Inputs are collated before timing; one warm-up pass is discarded; BLAS is
    pinned to a single thread.
    """
    if repetitions < 3:
        raise ContractError("repetitions must be at least 3")
    if not episodes:
        raise ContractError("measure_latency needs at least one episode")
    batches = [(collate([ep]), len(ep)) for ep in episodes]
    samples = []
    with threadpool_limits(limits=1), ag.no_grad():
        for b, _ in batches:
            model.forward_batch(b)
        for _ in range(repetitions):
            for b, n in batches:
                t0 = time.perf_counter()
                model.forward_batch(b)
                samples.append((time.perf_counter() - t0) / n)
    return statistics.fmean(samples), statistics.pstdev(samples)


# ---------------------------------------------------------------- embeddings
def export_embeddings(model: MHRIModel, episodes: Sequence[Episode], path, which: str = "hidden") -> int:
    """Write one CSV row per scored (human) utterance; returns the row count."""
    if which not in ("hidden", "fused"):
        raise ContractError("which must be 'hidden' or 'fused'")
    d = model.config.d_model
    header = (["episode_id", "index"] + [f"{which}_{i}" for i in range(d)]
              + ["speaker", "listener_h1", "listener_h2", "listener_r", "response", "category"])
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for ep in episodes:
            with ag.no_grad():
                out = model.forward_batch(collate([ep]))
            vectors = (out.hidden.values if which == "hidden" else out.fused).data[0]
            for j, u in enumerate(ep.utterances):
                if not u.is_human:
                    continue
                writer.writerow([ep.episode_id, j] + [repr(float(x)) for x in vectors[j]]
                                + [int(u.speaker), *u.scene.listeners, int(u.response), u.gaze.category.value])
                count += 1
    return count

