"""Static batching of irregular GPU workloads, simulated on the CPU.

Tasks are cut into tiles, a compressed prefix array maps block indices back to
(task, tile) pairs via warp vote and population count, and empty tasks are
skipped through an injection from non-empty slots to real tasks. The MoE
planner turns token routing into such a batch.
"""

from tilebatch.cost_model import H20, H800, CostReport, DeviceProfile, estimate, scenario_compare
from tilebatch.dispatch import (
    DispatchRecord,
    ExecutionTrace,
    TaskFuncRegistry,
    TileDemand,
    dispatch_block,
    dispatch_block_extended,
    launch,
)
from tilebatch.errors import (
    CapacityError,
    ConfigurationError,
    DispatchError,
    EmptyBatchError,
    EmptyTaskError,
    MappingRangeError,
    ModelError,
    RoutingError,
    TileBatchError,
    VerificationFailure,
)
from tilebatch.executor import (
    VerificationReport,
    gemm_registry,
    gemm_tile_taskfunc,
    naive_moe_oracle,
    run_and_verify,
)
from tilebatch.moe_planner import (
    ExpertWorkload,
    MoEPlan,
    RoutingTable,
    TokenIndexArrays,
    build_moe_batch,
    build_token_index_arrays,
    order_experts,
    plan_expert_tasks,
)
from tilebatch.simt import (
    MappingResult,
    map_block,
    map_block_chunked,
    map_block_single_warp,
    popcount,
    warp_vote,
)
from tilebatch.task_model import (
    Batch,
    GemmShape,
    StrategyCatalog,
    Task,
    TaskParams,
    TilingStrategy,
    default_catalog,
    tile_count,
)
from tilebatch.tile_prefix import (
    Injection,
    TilePrefixArray,
    build_nonempty_tile_prefix,
    build_tile_prefix,
)

__version__ = "0.1.0"
