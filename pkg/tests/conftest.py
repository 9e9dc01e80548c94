import numpy as np
import pytest

from lagtse import (
    BoundaryTrajectory,
    ParamDistribution,
    SignalSpec,
    historical_sample,
)
from lagtse.units import kmh_to_mps


@pytest.fixture(scope="session")
def example_dist() -> ParamDistribution:
    """The reference Beta law: v_f 40-80 km/h, d 5.88-9.09 m, c 1100-5100 veh/h."""
    return ParamDistribution.from_traffic_units()


@pytest.fixture(scope="session")
def example_sample(example_dist):
    return historical_sample(example_dist, 10_000, np.random.default_rng(424242))


@pytest.fixture(scope="session")
def signal_spec() -> SignalSpec:
    return SignalSpec(
        cycle_s=120.0,
        red_s=70.0,
        go_speed=kmh_to_mps(60.0),
        n_cycles=6,
        post_speed=kmh_to_mps(60.0),
    )


@pytest.fixture(scope="session")
def signal_boundary(signal_spec) -> BoundaryTrajectory:
    return BoundaryTrajectory.from_signal(signal_spec)


@pytest.fixture()
def rng():
    return np.random.default_rng(20250808)
