"""Shared fixtures"""
from pathlib import Path

import pytest

from fluidsched.config import get_settings
from fluidsched.core import state_analysis
from fluidsched.core.fluid_model import PipeState, SystemState

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def make_state():
    def build(pairs, t_upd=10.0, m=5.0):
        pipes = tuple(PipeState(a=a, b=b) for a, b in pairs)
        return SystemState(pipes=pipes, t_upd=t_upd, m=m)
    return build


@pytest.fixture
def random_steady_states():
    """Reproducible steady states with 2..max_n pipes and a nonempty polytope"""
    return state_analysis.random_steady_states


@pytest.fixture
def fresh_settings():
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()
