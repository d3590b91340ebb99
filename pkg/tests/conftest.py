import numpy as np
import pytest

from diffcopula.marginal import N_COMPONENTS, N_STUDENT, MixtureParams


def random_mixture(rng, batch=()):
    w = rng.dirichlet(np.ones(N_COMPONENTS), size=batch or None)
    return MixtureParams(
        weights=w,
        loc=rng.normal(0, 1, size=(*batch, N_COMPONENTS)),
        scale=np.exp(rng.uniform(-2, 1, size=(*batch, N_COMPONENTS))),
        dof=rng.uniform(2.1, 30, size=(*batch, N_STUDENT)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
