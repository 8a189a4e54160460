"""Wave-based analytic cost model for a launch trace.

Blocks are issued in block-index order, ``sm_count`` at a time. A wave lasts
as long as its slower resource: the summed FLOPs over peak FLOP/s or the
summed bytes over peak bandwidth. Mixing compute-heavy and memory-heavy
blocks in the same wave therefore shortens it, which is what expert ordering
tries to exploit. Only relative comparisons are meaningful.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from tilebatch.errors import ConfigurationError, ModelError

PROFILE_ENV = "TILEBATCH_PROFILE"

COMPUTE = "compute"
MEMORY = "memory"


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    sm_count: int
    peak_flops: float
    peak_bandwidth: float

    def __post_init__(self):
        if self.sm_count < 1 or self.peak_flops <= 0 or self.peak_bandwidth <= 0:
            raise ConfigurationError(f"profile {self.name!r}: all parameters must be positive")

    @property
    def machine_balance(self) -> float:
        """FLOPs per byte at which compute and memory time are equal."""
        return self.peak_flops / self.peak_bandwidth

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "DeviceProfile":
        try:
            return cls(
                str(data["name"]),
                int(data["sm_count"]),
                float(data["peak_flops"]),
                float(data["peak_bandwidth"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid device profile: {exc}") from None


# Peak tensor throughput is the published fp16/bf16 figure; bandwidth and
# SM count are vendor datasheet estimates.
H20 = DeviceProfile("H20", sm_count=78, peak_flops=146e12, peak_bandwidth=4.0e12)
H800 = DeviceProfile("H800", sm_count=132, peak_flops=989e12, peak_bandwidth=3.35e12)

PROFILES = {"h20": H20, "h800": H800}


def load_profile(name_or_path: Optional[str] = None) -> DeviceProfile:
    """Bundled profile by name, or a JSON profile file.

    Falls back to ``$TILEBATCH_PROFILE`` and then to the H800 profile.
    """
    name_or_path = name_or_path or os.environ.get(PROFILE_ENV) or "h800"
    if name_or_path.lower() in PROFILES:
        return PROFILES[name_or_path.lower()]
    try:
        with open(name_or_path) as fh:
            return DeviceProfile.from_json(json.load(fh))
    except FileNotFoundError:
        raise ConfigurationError(
            f"unknown profile {name_or_path!r}; use one of {sorted(PROFILES)} or a JSON file"
        ) from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"profile {name_or_path}: {exc}") from None


@dataclass(frozen=True)
class WaveCost:
    blocks: int
    compute_time: float
    memory_time: float
    bound: str

    @property
    def time(self) -> float:
        return max(self.compute_time, self.memory_time)


@dataclass(frozen=True)
class CostReport:
    profile: str
    total_time: float
    total_flops: float
    total_bytes: float
    achieved_flops: float
    peak_fraction: float
    waves: tuple

    @property
    def tflops(self) -> float:
        return self.achieved_flops / 1e12

    def to_json(self) -> dict:
        return {
            "profile": self.profile,
            "total_time": self.total_time,
            "total_flops": self.total_flops,
            "total_bytes": self.total_bytes,
            "achieved_flops": self.achieved_flops,
            "tflops": self.tflops,
            "peak_fraction": self.peak_fraction,
            "num_waves": len(self.waves),
            "waves": [
                {"blocks": w.blocks, "compute_time": w.compute_time, "memory_time": w.memory_time, "bound": w.bound}
                for w in self.waves
            ],
        }


def estimate_demands(flops: Sequence[float], nbytes: Sequence[float], profile: DeviceProfile) -> CostReport:
    """Cost of blocks issued in the given order with the given per-block demands."""
    flops = np.asarray(flops, dtype=np.float64)
    nbytes = np.asarray(nbytes, dtype=np.float64)
    if flops.size == 0:
        raise ModelError("cannot estimate an empty trace")
    if flops.shape != nbytes.shape:
        raise ModelError("flops and bytes must have one entry per block")
    if np.isnan(flops).any() or np.isnan(nbytes).any():
        raise ModelError("trace is missing per-block demand data")
    waves = []
    for start in range(0, flops.size, profile.sm_count):
        f = float(flops[start : start + profile.sm_count].sum())
        b = float(nbytes[start : start + profile.sm_count].sum())
        ct, mt = f / profile.peak_flops, b / profile.peak_bandwidth
        waves.append(WaveCost(min(profile.sm_count, flops.size - start), ct, mt, COMPUTE if ct >= mt else MEMORY))
    total_time = sum(w.time for w in waves)
    total_flops = float(flops.sum())
    achieved = total_flops / total_time if total_time > 0 else 0.0
    return CostReport(
        profile.name,
        total_time,
        total_flops,
        float(nbytes.sum()),
        achieved,
        achieved / profile.peak_flops,
        tuple(waves),
    )


def estimate(trace, profile: DeviceProfile) -> CostReport:
    """Cost of an :class:`~tilebatch.dispatch.ExecutionTrace` (records sorted by block)."""
    records = sorted(trace, key=lambda r: r.block)
    if any(r.flops is None or r.bytes is None for r in records):
        raise ModelError("trace is missing per-block demand data")
    return estimate_demands([r.flops for r in records], [r.bytes for r in records], profile)


def lower_bound(flops: Sequence[float], nbytes: Sequence[float], profile: DeviceProfile) -> float:
    """Time no block order can beat: the whole workload on its slower resource."""
    return max(float(np.sum(flops)) / profile.peak_flops, float(np.sum(nbytes)) / profile.peak_bandwidth)


DEFAULT_SCENARIO = {"num_tokens": 4096, "num_experts": 64, "top_k": 8, "weight_shape": (3584, 2560)}


def scenario_trace(
    scenario: str,
    num_tokens: int = 4096,
    num_experts: int = 64,
    top_k: int = 8,
    weight_shape: tuple = (3584, 2560),
    catalog=None,
    ordering: str = "half_interval",
    seed: Optional[int] = None,
):
    """Demand-only launch trace of a routing scenario (no arithmetic performed)."""
    from tilebatch.dispatch import launch
    from tilebatch.executor import gemm_registry
    from tilebatch.moe_planner import build_moe_batch, scenario_routing
    from tilebatch.task_model import default_catalog

    catalog = catalog or default_catalog()
    routing = scenario_routing(scenario, num_tokens, num_experts, top_k, seed)
    plan = build_moe_batch(routing, tuple(weight_shape), None, None, catalog, ordering)
    return launch(plan.batch, gemm_registry(catalog), prefix=plan.prefix, sigma=plan.sigma)


def scenario_compare(
    profile: DeviceProfile,
    scenarios: Sequence[str] = ("balanced", "best", "worst"),
    **params,
) -> dict:
    """Cost report per scenario, all built from the same token/expert/weight parameters."""
    params = {**DEFAULT_SCENARIO, **params}
    return {s: estimate(scenario_trace(s, **params), profile) for s in scenarios}
