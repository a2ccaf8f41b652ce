"""Purification-wrapped classification: the four evaluation scenarios.

``p1`` guards the classifier with a multi-step teacher-chain purifier, ``p2``
with the precision-optimized student purifier; the ``_plus`` variants model a
defender who knows the input is adversarial and purifies one extra time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .attacks import derive_seed, purify, teacher_purify
from .distill import StudentModel, TeacherModel
from .inversion import EditLossConfig, RegWeightSchedule
from .models import Autoencoder
from .schedule import Condition, GuidanceConfig, NULL_CONDITION

DEFENSE_ERROR = -1  # sentinel prediction, never a valid label

PURIFIER_KINDS = ("teacher_chain", "student_precise")


@dataclass(frozen=True)
class DefenseScenario:
    id: str
    purifier: str
    strength: float
    extra_pass: bool = False

    def __post_init__(self):
        if self.purifier not in PURIFIER_KINDS:
            raise ValueError(f"purifier must be one of {PURIFIER_KINDS}")
        if self.strength < 0 or self.strength > 1:
            raise ValueError("scenario strength must be in [0, 1]")
        if self.id.endswith("_plus") and not self.extra_pass:
            raise ValueError("'+' scenarios purify twice")


def standard_scenarios() -> dict[str, DefenseScenario]:
    """The evaluation grid: teacher purifier at 5/50, student purifier at 0.1."""
    return {
        "p1": DefenseScenario("p1", "teacher_chain", 5 / 50, False),
        "p1_plus": DefenseScenario("p1_plus", "teacher_chain", 5 / 50, True),
        "p2": DefenseScenario("p2", "student_precise", 0.1, False),
        "p2_plus": DefenseScenario("p2_plus", "student_precise", 0.1, True),
    }


@dataclass
class PurifierHandles:
    """Models shared by every scenario, plus a call counter for audits."""

    autoencoder: Autoencoder
    teacher: TeacherModel | None = None
    student: StudentModel | None = None
    condition: Condition = NULL_CONDITION
    guidance: GuidanceConfig = GuidanceConfig()
    edit_config: EditLossConfig = field(default_factory=EditLossConfig)
    precision_steps: int = 10
    calls: int = 0

    def run(self, scenario: DefenseScenario, x: torch.Tensor, seed: int) -> torch.Tensor:
        self.calls += 1
        if scenario.purifier == "teacher_chain":
            if self.teacher is None:
                raise ValueError("scenario needs a teacher purifier")
            return teacher_purify(
                x, scenario.strength, self.teacher, self.autoencoder, self.condition, self.guidance, seed
            )
        if self.student is None:
            raise ValueError("scenario needs a student purifier")
        return purify(
            x,
            scenario.strength,
            self.student,
            self.autoencoder,
            self.condition,
            self.guidance,
            RegWeightSchedule.constant(1.0, self.precision_steps),
            self.edit_config,
            self.precision_steps,
            seed,
        )


def defend_classify(
    x: torch.Tensor,
    scenario: DefenseScenario | None,
    classifier,
    handles: PurifierHandles,
    seed: int = 0,
) -> torch.Tensor:
    """Purify (once, or twice for '+' scenarios) and classify.

    ``scenario=None`` is the undefended path. Purifier failures return the
    DEFENSE_ERROR sentinel instead of a label. The input is never mutated.
    """
    with torch.no_grad():
        if scenario is None:
            return classifier(x).argmax(dim=1)
        try:
            x_p = handles.run(scenario, x, derive_seed(seed, 0))
            if scenario.extra_pass:
                x_p = handles.run(scenario, x_p, derive_seed(seed, 1))
        except Exception:
            return torch.full((len(x),), DEFENSE_ERROR, dtype=torch.long)
        return classifier(x_p).argmax(dim=1)
