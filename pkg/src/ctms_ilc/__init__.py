"""Highway traffic simulation and service-station ramp metering.

A cell-transmission plant with one service station, a relaxed-linear MPC
metering the station's merge-back flow, and an iterative learning scheme
that corrects parameter-estimation errors across repeated daily demand
patterns.
"""

from .plant import (CellParams, DemandProfile, HighwayConfig, PlantState,
                    StationParams, StepOutput, Trajectory, cell_demand,
                    cell_supply, simulate, station_demand, step)
from .lifted import (CostWeights, Estimates, HorizonWindow, LiftedQP,
                     build_lifted, ground_truth_lifted)
from .qp import QPProblem, QPSolution, SolverSettings, kkt_residuals, solve
from .controllers import (ControllerConfig, IterationRecord,
                          RecedingHorizonPlanner, WindowSlice, ilc_plan,
                          mpc_plan, run_day, tightness_report)
from .metrics import MetricsReport, compare, delta_emax, evaluate, tts, ttt, twt
from .demand import PeakShape, generate_peak_profile, load_demand_csv, \
    save_demand_csv

__version__ = "0.1.0"
