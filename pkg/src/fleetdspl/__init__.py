"""Dynamic product-line adaptation for IoT fleets, with a deterministic fleet simulator."""

from fleetdspl.adaptation import (
    AdaptationEngine,
    AdaptationPlan,
    Goal,
    LoopSettings,
    NoChange,
    NoFeasibleConfiguration,
    Projection,
    analyze,
    evaluate_goal,
    execute,
    plan,
    score,
)
from fleetdspl.fleetsim import InitialSelectionInvalid, ScenarioError, World, load_scenario, load_scenario_file, run
from fleetdspl.knowledge import (
    DeviceDescriptor,
    Dimension,
    DimensionMap,
    EvaluationContext,
    Fact,
    KnowledgeBase,
    Reading,
)
from fleetdspl.trace import Trace, TraceEvent, check_trace
from fleetdspl.variability import (
    DConfig,
    FConfig,
    FeatureModel,
    check_selection,
    derive_fconfig,
    diff_selections,
    enumerate_configurations,
    parse_model,
)

__version__ = "0.1.0"
