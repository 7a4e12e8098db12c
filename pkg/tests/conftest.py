import numpy as np
import pytest

from sfgan import synth


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    synth.generate_dataset(4, 0, root)
    return root


@pytest.fixture(scope="session")
def synthetic_index(synthetic_root):
    from sfgan.dataset import build_index

    return build_index(synthetic_root, "train", "synthetic")


@pytest.fixture
def pfm_fixture_bytes():
    """1x2 single-channel little-endian PFM holding [1.0, 2.0]."""
    return b"Pf\n2 1\n-1.0\n" + np.array([1.0, 2.0], dtype="<f4").tobytes()


# -- acceptance reporting ----------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


@pytest.fixture
def criterion():
    """Context-manager factory recording PASS/FAIL for one acceptance criterion."""
    import contextlib

    @contextlib.contextmanager
    def record(number: int, title: str):
        try:
            yield
        except BaseException:
            ACCEPTANCE_RESULTS[number] = ("FAIL", title)
            print(f"FAIL criterion {number}: {title}")
            raise
        ACCEPTANCE_RESULTS[number] = ("PASS", title)
        print(f"PASS criterion {number}: {title}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        status, title = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"{status} criterion {n}: {title}")
