import numpy as np
import pytest

from panelmix import (
    ComponentParams,
    MixtureParams,
    ModelSpec,
    PanelDataset,
    builtin_design,
    simulate_panel,
)


@pytest.fixture(scope="session")
def two_comp_params():
    """Well-separated static two-component point (the size design)."""
    return MixtureParams(
        alpha=[0.5, 0.5],
        components=(
            ComponentParams(mu=[-1.0], sigma2=0.64),
            ComponentParams(mu=[1.0], sigma2=1.44),
        ),
    )


@pytest.fixture(scope="session")
def static_spec():
    return ModelSpec()


@pytest.fixture(scope="session")
def small_panel(two_comp_params):
    """n=150, T=3 static normal panel; reused across estimation tests."""
    dgp = builtin_design("table1", n=150)
    return simulate_panel(dgp, seed=11)


@pytest.fixture(scope="session")
def one_comp_panel():
    """Single-component panel for null-model tests."""
    rng = np.random.Generator(np.random.Philox(7))
    y = 0.3 + 0.9 * rng.standard_normal((200, 3))
    return PanelDataset(y=y)
