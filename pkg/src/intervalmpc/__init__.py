"""Interval prediction, set-membership estimation and dual MPC for uncertain linear systems."""
from .errors import (ConfigError, ContractError, ControllerFault, DivergenceError, DomainError, ExcitationError,
                     IntervalMPCError, PEFailure, StructuralError, SynthesisFailure)
from .estimation import (ConfidenceRegion, NoiseBudget, PeWitness, RegressorStream, SetMembershipEstimator,
                         build_regression, check_pe, data_error_bound, error_bound, eta_bound, least_squares,
                         update_confidence)
from .model import (Box, ConstraintBoxes, Envelope, ParametricLinearSystem, PlantTrace, SignalBounds, assemble_A,
                    measure, rk4_step, simulate_plant)
from .mpc import (ControlLaw, ControlPlan, Experiment, ExperimentLog, HeldSignal, OcpSpec, PredictionModel,
                  TerminalLaw, design_terminal, evaluate_plan, evaluate_plans, run_receding_horizon, solve_ocp,
                  switching_control)
from .prediction import (EnhancedPredictor, ExtendedSystem, IntervalMatrix, IntervalState, NaivePredictor,
                         PolytopicModel, assemble_extended, choose_predictor, find_metzler_transform,
                         interval_hull, metzler_check, metzler_shift, polytopic_vertices, predict,
                         transform_system)
from .stabilization import (FeedbackGains, LyapunovCertificate, SynthesisConfig, TerminalSet, build_upsilon,
                            check_terminal_admissible, feedback_control, lyapunov_value, select_S, synthesize,
                            synthesize_gains, terminal_set, verify_certificate)

__version__ = "0.1.0"
