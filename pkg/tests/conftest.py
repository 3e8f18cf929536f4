import pytest

from mmbackhaul.channel import RayTraceConfig, default_distance_grid, fit_channel_stats, generate_terrain
from mmbackhaul.optimizer import solve_network
from mmbackhaul.profiles import ieee80211ad
from mmbackhaul.topology import SurveySpec

DESK = SurveySpec(2400, 2400, 400)  # 12 WGNs


@pytest.fixture(scope="session")
def profile():
    return ieee80211ad()


@pytest.fixture(scope="session")
def desk_stats():
    grid = generate_terrain(0.2, 6000, 10, 7)
    return fit_channel_stats(grid, RayTraceConfig(n_trials=2000), default_distance_grid(3000, 40))


@pytest.fixture(scope="session")
def desk_plan(desk_stats, profile):
    return solve_network(DESK, desk_stats, profile)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[n])
