from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from sga.reward import RewardConfig, trajectory_reward


@pytest.mark.parametrize("success,n,lam,expected", [
    (False, 7, 0.1, 0.0),
    (True, 0, 0.1, 1.0),
    (True, 4, 0.1, 0.92),
    (True, 4, 0.0, 1.0),
])
def test_examples(success, n, lam, expected):
    assert trajectory_reward(success, n, RewardConfig(lam)) == pytest.approx(expected, abs=1e-12)


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        trajectory_reward(True, -1)
    with pytest.raises(ValueError):
        RewardConfig(1.5)


lams = st.floats(0, 1)
counts = st.integers(0, 1000)


@given(counts, lams)
def test_bounds(n, lam):
    r = trajectory_reward(True, n, RewardConfig(lam))
    assert 1 - lam - 1e-12 <= r <= 1 + 1e-12
    assert trajectory_reward(False, n, RewardConfig(lam)) == 0.0


@given(counts, counts, st.floats(0.01, 1))
def test_monotone(a, b, lam):
    a, b = sorted((a, b))
    cfg = RewardConfig(lam)
    if a < b:
        assert trajectory_reward(True, a, cfg) > trajectory_reward(True, b, cfg)
