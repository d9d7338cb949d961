"""Gated trajectory reward used for leaf evaluation and trajectory filtering."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class RewardConfig:
    lam: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


def trajectory_reward(success: bool, tool_step_count: int, cfg: RewardConfig = RewardConfig()) -> float:
    """Zero for failures; otherwise a base of ``1 - lam`` plus a length bonus ``lam / (1 + n)``."""
    if tool_step_count < 0:
        raise ValueError("tool_step_count must be nonnegative")
    if not success:
        return 0.0
    return (1.0 - cfg.lam) + cfg.lam / (1.0 + tool_step_count)
