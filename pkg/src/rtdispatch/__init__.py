"""Online emergency responder dispatch: incident prediction, tree-search
dispatch over sampled incident chains, and time-dependent routing."""
from .core import (BBox, Depot, Grid, GridCell, Incident, Responder, Status, build_grid,
                   grid_of, nearest_euclidean)
from .incidents import IncidentChain, generate_chain, generate_chains
from .planner import (DispatchAction, DispatchState, Enqueue, EnvironmentSnapshot, Planner,
                      PlannerConfig, chain_evaluation, create_state_tree, dispatch_decision,
                      response_time, select_candidate_actions, update_state, utility_update)
from .road import (LandmarkTable, RoadGraph, Router, TravelTimeCache, alt_shortest_path,
                   load_graph, select_landmarks, travel_time)
from .simulator import ComparisonReport, Scenario, compare_policies, run_replay
from .speed import BinnedSpeedRegressor, SpeedProfiles, evaluate_mae, fit_profiles, predict_speed
from .survival import (FeatureSchema, SurvivalDataset, SurvivalModel, SurvivalRegressor,
                       build_features, expected_interarrival, fit_batch, gradient,
                       log_likelihood, sample_interarrival, update_streaming)

__version__ = "0.1.0"
