import numpy as np
import pytest

from laifusion.dataio import MaskClass, SceneSample

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_sample(rng, tile=8, cloud_p=0.2) -> SceneSample:
    masks = rng.choice(
        [MaskClass.LAND_VEGETATED, MaskClass.WATER, MaskClass.CLOUD, MaskClass.LAND_BARE],
        size=(3, tile, tile),
        p=[0.6, 0.1, cloud_p, 0.3 - cloud_p],
    ).astype(np.uint8)
    return SceneSample(
        s1=rng.standard_normal((3, 2, tile, tile)).astype(np.float32),
        s2_lai_past=rng.random((2, tile, tile)).astype(np.float32),
        masks=masks,
        day_of_year=float(rng.uniform(0, 365)),
        lai_target=rng.random((tile, tile)).astype(np.float32),
    )


@pytest.fixture
def make_samples(rng):
    def make(n=3, tile=8, cloud_p=0.2):
        return [random_sample(rng, tile, cloud_p) for _ in range(n)]

    return make
