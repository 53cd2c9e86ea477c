"""Grid-aware siting of EV charging stations on unbalanced feeders.

The pipeline: allocate charger ports across census blocks (``demand``),
model the feeder and pick candidate poles (``feeder``), rank candidates by
grid impact (``prioritize``), assemble and exactly lift the siting program
(``problem``), and solve it to a certified gap with bound-tightening
presolve and spatial branch-and-bound (``sbnb``), verifying every answer
against the full nonlinear power flow (``acpf``).
"""

from .acpf import (
    InjectionOverlay,
    PowerFlowState,
    check_limits,
    kcl_residual,
    solve_powerflow,
)
from .demand import (
    CensusBlock,
    DemandAllocation,
    DemandInfeasibleError,
    allocate_ports,
    feeder_demand,
)
from .feeder import (
    CandidateSet,
    CandidateSite,
    FeederModel,
    assemble_admittance,
    haversine_distance,
    load_feeder,
    save_feeder,
    select_candidates,
)
from .prioritize import (
    GiConfig,
    current_impact,
    grid_impact,
    prioritize_candidates,
    priority_weights,
    voltage_impact,
)
from .problem import (
    CostConfig,
    MiblpProblem,
    anti_clustering_constraints,
    build_minlp,
    filter_and_decompose,
    lift_to_miblp,
    mccormick_envelope,
)
from .sbnb import (
    PlacementSolution,
    SolverConfig,
    branch_and_bound,
    local_incumbent,
    sbt_presolve,
    solve_placement,
    verify_ac_feasibility,
)

__version__ = "0.1.0"
