"""Adversary harness: attack scenarios run against a harness-mode host."""

from .scenarios import SCENARIOS, AttackScenario, Outcome, Verdict, guessing_bound, run_scenario
from .server import ManagedServer

__all__ = ["SCENARIOS", "AttackScenario", "ManagedServer", "Outcome", "Verdict", "guessing_bound", "run_scenario"]
