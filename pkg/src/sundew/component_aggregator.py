"""Cross-component arbitration with a hard fallback to the OS verdict under load."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

from .domain import (
    COMPONENTS,
    CAStrategy,
    Component,
    EnsembleConfig,
    Label,
    RiskTable,
    risk_rank,
)
from .model_aggregator import TIE_EPS, ComponentVerdict

log = logging.getLogger(__name__)

CONSENSUS_SOURCE = "consensus"
Source = Union[Component, str]


@dataclass(frozen=True)
class FinalVerdict:
    label: Label
    confidence: float
    source: Source

    @property
    def source_name(self) -> str:
        return self.source.value if isinstance(self.source, Component) else str(self.source)


def _check_complete(m: Mapping[Component, object], what: str):
    missing = [c.value for c in COMPONENTS if c not in m]
    if missing:
        raise ValueError(f"{what} missing components: {', '.join(missing)}")


def _argmax_components(values: Mapping[Component, float]) -> list:
    best = max(values[c] for c in COMPONENTS)
    return [c for c in COMPONENTS if values[c] >= best - TIE_EPS]


def _pick_riskiest(
    candidates: Sequence[Component],
    verdicts: Mapping[Component, ComponentVerdict],
    risks: Optional[RiskTable],
) -> Component:
    # max() keeps the first of equal keys, so component order settles remaining ties
    return max(
        candidates,
        key=lambda c: (risk_rank(verdicts[c].label, risks), verdicts[c].confidence),
    )


def aggregate_components(
    verdicts: Mapping[Component, ComponentVerdict],
    strengths: Mapping[Component, float],
    load: int,
    strategy: CAStrategy = CAStrategy.PRIOR_KNOWN,
    tau: int = 10,
    risks: Optional[RiskTable] = None,
) -> FinalVerdict:
    """Combine the three component verdicts into one.

    ``strengths`` carries the prior-knowledge strength of each component's verdict.
    At ``load >= tau`` the OS verdict is returned unchanged.
    """
    _check_complete(verdicts, "verdicts")
    _check_complete(strengths, "strengths")
    if load < 0:
        raise ValueError("load must be nonnegative")
    if load >= tau:
        v = verdicts[Component.OS]
        return FinalVerdict(v.label, v.confidence, Component.OS)

    if strategy is CAStrategy.MAJORITY:
        labels = [verdicts[c].label for c in COMPONENTS]
        shared = {lab for lab in labels if labels.count(lab) >= 2}
        if shared:
            members = [c for c in COMPONENTS if verdicts[c].label in shared]
            best = _pick_riskiest(members, verdicts, risks)
            return FinalVerdict(verdicts[best].label, verdicts[best].confidence, CONSENSUS_SOURCE)
        strategy = CAStrategy.MOST_CONFIDENT

    if strategy is CAStrategy.MOST_CONFIDENT:
        candidates = _argmax_components({c: verdicts[c].confidence for c in COMPONENTS})
    elif strategy is CAStrategy.PRIOR_KNOWN:
        candidates = _argmax_components(strengths)
    else:
        raise ValueError(f"unknown CA strategy {strategy}")
    best = _pick_riskiest(candidates, verdicts, risks)
    return FinalVerdict(verdicts[best].label, verdicts[best].confidence, best)


def aggregate_with_config(
    verdicts: Mapping[Component, ComponentVerdict],
    strengths: Mapping[Component, float],
    load: int,
    cfg: EnsembleConfig,
) -> FinalVerdict:
    return aggregate_components(verdicts, strengths, load, cfg.ca_strategy, cfg.tau, cfg.risks)


def max_probability_vote(prob_malware: Mapping[Component, float]) -> bool:
    """Pick the single most certain component, in either direction, and follow it.

    Returns True for malware. This is the naive cross-component rule that ignores
    risk and prior knowledge; it is kept as a reference point for comparisons.
    """
    _check_complete(prob_malware, "probabilities")
    best_v, best_malware = -1.0, False
    for c in COMPONENTS:
        p1 = prob_malware[c]
        for v, malware in ((p1, True), (1.0 - p1, False)):
            if v > best_v:
                best_v, best_malware = v, malware
    return best_malware


def measure_load(supplied: Optional[int] = None) -> int:
    """System load as a process count.

    A supplied value (from the harness or ``--load``) wins; otherwise the host's
    current process count is read, degrading to 0 with a warning on failure.
    """
    if supplied is not None:
        if supplied < 0:
            raise ValueError("load must be nonnegative")
        return int(supplied)
    try:
        import psutil

        return len(psutil.pids())
    except Exception as exc:  # noqa: BLE001 - any failure means "unknown load"
        log.warning("could not read process count (%s); assuming load 0", exc)
        return 0

