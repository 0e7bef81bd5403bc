"""Evaluate mitigation gadgets against the attack."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict

from .analysis import decoder_accuracy, jz_signal
from .attack import AttackConfig, DecodeRule, VictimSpec, attack_mapping, victim_mapping
from .core import MicroConfig
from .gadgets import (  # noqa: F401  (re-exported)
    DEFAULT_DELAY,
    Gadget,
    GadgetError,
    GadgetKind,
    apply_gadget,
    flag_rewrite_semantics,
    guarded_jump,
)

CHANCE = 1 / 256


@dataclass(frozen=True)
class MitigationReport:
    gadget: Gadget
    experiments: int
    baseline_accuracy: float
    mitigated_accuracy: float
    signal_before: int
    signal_after: int

    def __post_init__(self):
        for acc in (self.baseline_accuracy, self.mitigated_accuracy):
            if not 0.0 <= acc <= 1.0:
                raise ValueError("accuracy outside [0, 1]")

    def to_dict(self) -> Dict[str, object]:
        return {
            "gadget": self.gadget.name,
            "experiments": self.experiments,
            "baseline_accuracy": f"{self.baseline_accuracy:.6f}",
            "mitigated_accuracy": f"{self.mitigated_accuracy:.6f}",
            "chance": f"{CHANCE:.6f}",
            "signal_before": self.signal_before,
            "signal_after": self.signal_after,
        }

    def to_text(self) -> str:
        return "".join(f"{k}: {v}\n" for k, v in self.to_dict().items())


def evaluate_mitigation(micro: MicroConfig, attack: AttackConfig, victim: VictimSpec,
                        gadget: Gadget, experiments: int) -> MitigationReport:
    """Accuracy with and without ``gadget`` on the same experiment seeds and secrets."""
    def accuracy(g):
        return decoder_accuracy(micro, attack, victim, DecodeRule.ARGMAX_MODE, experiments,
                                random_secret=True, gadget=g)

    return MitigationReport(gadget, experiments, accuracy(None), accuracy(gadget),
                            jz_signal(micro), jz_signal(micro, gadget))


def report_json(report: MitigationReport, micro: MicroConfig, attack: AttackConfig,
                victim: VictimSpec) -> str:
    body = dict(report.to_dict())
    body["config"] = {"micro": micro.to_mapping(), "attack": attack_mapping(attack),
                      "victim": victim_mapping(victim)}
    return json.dumps(body, indent=2) + "\n"
