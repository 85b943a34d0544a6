import pytest

from damagelab.dp import GridSpec, extract_share_schedule, solve_dp
from damagelab.env import ActivitySpec, DynamicsParams, EnvConfig, LoadModel, RoleRule
from damagelab.presets import bricklayer_config


def tiny_grid_instance() -> tuple[EnvConfig, GridSpec]:
    """Two activities, H=3, dynamics chosen so every successor lands on a 0.25 grid node.

    Load equals dominant share times dominant effort (the other activity has
    zero hazard); damage and meniscal drain move by exactly that amount.
    """
    config = EnvConfig(
        name="tiny",
        activities=(ActivitySpec("heavy", 50, 100, 100), ActivitySpec("light", 10, 0, 50)),
        load_model=LoadModel(variant="weighted", composite=1.0, shear_fraction=1.0),
        dynamics=DynamicsParams(
            damage_scale=1.0,
            baratz_intercept=1.0,
            baratz_slope=0.0,
            recovery_scale=0.0,
            meniscal_base_rate=1.0,
            amp_slope=0.0,
            onset_age=1000.0,
        ),
        role=RoleRule(window=1, alpha=0.01),
        horizon=3,
        start_age=20.0,
    )
    grid = GridSpec(dD=0.25, dM=0.25, effort_levels=(0.5, 1.0), share_levels=(0.5, 1.0))
    return config, grid


@pytest.fixture(scope="session")
def brick():
    return bricklayer_config()


@pytest.fixture(scope="session")
def brick_table(brick):
    return solve_dp(brick)


@pytest.fixture(scope="session")
def brick_schedule(brick_table, brick):
    return extract_share_schedule(brick_table, brick)


_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record the one-line outcome of an acceptance criterion."""

    def record(number: int, passed: bool, detail: str, blocking: bool = True) -> None:
        label = ("PASS" if passed else "FAIL") if blocking else ("in range" if passed else "out of range")
        _VERDICTS[number] = f"criterion {number:>2}: {label:<12} {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
