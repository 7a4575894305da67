import pytest

from endosim import default_config, new_initial, start_user
from endosim import transitions as tr


def booted(variant: str = "secc_eph", seed: int = 0):
    """A machine that finished monitor init and dropped to the app domain."""
    state = new_initial(default_config(variant), seed=seed)
    return start_user(state)


def run_ok(state, t):
    state, result = tr.apply_transition(state, t)
    assert result.ok, f"{t.kind} failed: {result.status} {result.reason}"
    return state, result


@pytest.fixture
def app_state():
    return booted()


@pytest.fixture
def rand_state():
    return booted("secc_rand:32")


@pytest.fixture
def cet_state():
    return booted("secc_cet")
