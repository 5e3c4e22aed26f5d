import pytest

from ppclearn.pipeline import make_samples
from ppclearn.simscene import CorrSimConfig, StartPoseSpec, add_start_poses, gen_scenes


@pytest.fixture(scope="session")
def small_cases():
    cases = gen_scenes(2, 5)
    add_start_poses(cases, StartPoseSpec(count=10, mtre_range=(0.0, 10.0), bin_width=2.0), 5)
    return cases


@pytest.fixture(scope="session")
def small_samples(small_cases):
    sim = CorrSimConfig(sigma_d=0.3, outlier_rate=0.3, max_points=256)
    return make_samples(small_cases, sim, 0, 0.25, 5)


# one line per acceptance criterion, printed after the run
_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_line():
    def record(number: int, title: str, ok: bool, detail: str) -> None:
        _ACCEPTANCE[number] = f"criterion {number} {title}: {'PASS' if ok else 'FAIL'} ({detail})"

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
