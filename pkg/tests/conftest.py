import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gmfm.model import FactorParams, FamilyBlock, FamilyMap, MatrixSeries
from gmfm.families import FamilyKind, sample_array

settings.register_profile("gmfm", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("gmfm")


def mixed_map(p1, p2):
    """Every family present: quadrants plus a tobit strip."""
    h1, h2 = p1 // 2, p2 // 2
    return FamilyMap(
        FamilyKind.GAUSSIAN,
        (
            FamilyBlock(FamilyKind.POISSON, rows=(1, h1), cols=(h2 + 1, p2)),
            FamilyBlock(FamilyKind.LOGIT, rows=(h1 + 1, p1), cols=(1, h2)),
            FamilyBlock(FamilyKind.PROBIT, rows=(h1 + 1, p1), cols=(h2 + 1, p2)),
            FamilyBlock(FamilyKind.TOBIT, rows=(1, 1)),
        ),
    )


def make_data(fmap, p1, p2, T, k1, k2, seed=0, scale=0.5):
    """Random parameters and data drawn from the model."""
    gen = np.random.default_rng(seed)
    theta = FactorParams(
        gen.uniform(-1, 1, (p1, k1)), gen.uniform(-1, 1, (p2, k2)), scale * gen.uniform(-1, 1, (T, k1, k2))
    )
    codes = fmap.resolve(p1, p2, T) if isinstance(fmap, FamilyMap) else fmap
    from gmfm.model import natural_params

    x = sample_array(codes, natural_params(theta), gen)
    return MatrixSeries(x), theta


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


#: one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
