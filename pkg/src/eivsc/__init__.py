"""Error-in-variables constrained least squares and synthetic control inference."""

from .errors import (ConfigError, CSVFormatError, DimensionError, EivscError, EmptyInputError,
                     ExperimentError, InfeasibleError, NotPSDError, UnboundedProblemError)
from .inference import (EstimatorConfig, InferenceReport, confidence_interval, deviation_bound,
                        normality_diagnostics, synthetic_control, variance_estimate)
from .paneldata import (GroundTruth, LayoutConfig, NoiseSpec, PanelObservation, SignalSpec,
                        generate_panel, generate_truth, load_panel_csv, write_panel_csv)
from .rates import (RateReport, RefinedRateParams, SetDescriptor, SimplifiedRateParams,
                    effective_sample_size, solve_fixed_point, solve_fixed_point_refined,
                    width_monte_carlo, width_upper_bound)
from .simlab import ReplicationTable, Scenario, run_scenario
from .solver import (ConstraintSet, FitResult, ProblemSpec, SolverOptions, optimality_residual,
                     project_l1_ball, project_simplex, solve, solve_oracle)
from .spectral import ridge_min_value, svd, typicality_D

__version__ = "0.1.0"
