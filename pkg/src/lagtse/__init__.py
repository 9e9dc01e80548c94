"""Stochastic Lagrangian platoon dynamics with probe-vehicle assimilation.

The package simulates heterogeneous car-following platoons whose only
randomness is per-driver parameters, derives the matching mean and
covariance dynamics, and runs a discretized Kalman-Bucy filter that
estimates every vehicle's spacing and position from a sparse set of probe
measurements.
"""

from .assimilation import (
    FilterConfig,
    FilterOutput,
    MeasurementBatch,
    ProbeSet,
    kb_predict,
    kb_update,
    measure_equipped,
    measure_unequipped,
    run_filter,
    select_probes,
)
from .errors import ConfigurationError, OracleFailure, PhysicsError
from .macro import eulerian_fields, mape, queue_estimate, queue_series, rmse
from .moments import (
    CovMatrix,
    MeanState,
    apply_D,
    cov_step,
    integrate_moments,
    mean_step,
)
from .params import (
    BetaMarginal,
    ParamDistribution,
    filter_dt,
    fit_params,
    historical_sample,
    sample_params,
    simulation_dt,
)
from .relations import (
    DriverParams,
    HistoricalSample,
    mean_speed,
    mean_speed_gradient,
    mean_spacing,
    nf_spacing,
    nf_speed,
    speed_variance,
)
from .sim import (
    BoundaryTrajectory,
    SignalSpec,
    TrajectorySet,
    leader_speed,
    simulate_ensemble,
    simulate_sample_path,
)

__version__ = "0.1.0"
