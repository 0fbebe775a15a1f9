"""
Configuration module for hybridtrain

Process settings come from the environment; run settings come from a YAML file
validated into the models of models.py.
"""

import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml
from pydantic import ValidationError

from analytics import activation_units
from models import (
    BatchConfig,
    CostModel,
    MemoryConfig,
    NetworkSpec,
    OptimizerConfig,
    ParallelConfig,
    RunConfig,
    TrainingConfig,
    ValidatedRun,
    Violation,
)

logger = logging.getLogger(__name__)


class Config:
    """Process-level settings read from the environment"""

    def __init__(self):
        self.LOG_LEVEL = os.getenv("HYBRIDTRAIN_LOG_LEVEL", "INFO").upper()
        self.OUTPUT_DIR = os.getenv("HYBRIDTRAIN_OUTPUT_DIR", "runs")
        seed = os.getenv("HYBRIDTRAIN_SEED")
        self.SEED = int(seed) if seed not in (None, "") else None

        if self.LOG_LEVEL not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"HYBRIDTRAIN_LOG_LEVEL must be a logging level name, got {self.LOG_LEVEL!r}")

    @property
    def log_level(self) -> str:
        return self.LOG_LEVEL

    @property
    def output_dir(self) -> str:
        return self.OUTPUT_DIR

    @property
    def seed(self) -> Optional[int]:
        return self.SEED


class ConfigFileError(Exception):
    """The run configuration file is missing or is not parseable YAML"""

    def __init__(self, path: str, message: str, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = f"{path}:{line}" if line is not None else path
        super().__init__(f"{where}: {message}")


class ConfigValidationError(Exception):
    """The run configuration violates one or more constraints"""

    def __init__(self, violations: List[Violation]):
        self.violations = violations
        super().__init__("; ".join(f"{v.code}: {v.message}" for v in violations))


# ---------------------------------------------------------------------------
# Checkpoint interval selection
# ---------------------------------------------------------------------------

def divisors(n: int) -> List[int]:
    small, large = [], []
    for d in range(1, math.isqrt(n) + 1):
        if n % d == 0:
            small.append(d)
            if d != n // d:
                large.append(n // d)
    return small + large[::-1]


def select_checkpoint_interval(num_layers: int, g_inter: int) -> int:
    """Factor of the per-worker layer count closest to sqrt(num_layers).

    Ties go to the smaller factor.
    """
    if num_layers % g_inter != 0:
        raise ValueError(f"g_inter={g_inter} does not divide num_layers={num_layers}")
    target = math.sqrt(num_layers)
    return min(divisors(num_layers // g_inter), key=lambda d: (abs(d - target), d))


def minimize_activation_units(num_layers: int, g_inter: int) -> int:
    """Divisor of the per-worker layer count with the fewest activation units"""
    if num_layers % g_inter != 0:
        raise ValueError(f"g_inter={g_inter} does not divide num_layers={num_layers}")
    return min(divisors(num_layers // g_inter), key=lambda d: (activation_units(num_layers, g_inter, d), d))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def collect_violations(parallel: ParallelConfig, net: NetworkSpec, batch: BatchConfig) -> List[Violation]:
    violations = []
    g_inter, g_data = parallel.g_inter, parallel.g_data

    if parallel.workers is not None and g_inter * g_data != parallel.workers:
        violations.append(Violation(
            code="GridMismatch",
            message=f"g_inter * g_data = {g_inter} * {g_data} = {g_inter * g_data} != workers = {parallel.workers}",
            path="parallel.workers",
        ))

    if batch.batch_size % g_data != 0:
        violations.append(Violation(
            code="NonDivisibleBatch",
            message=f"g_data={g_data} does not divide batch_size={batch.batch_size}",
            path="batch.batch_size",
        ))
    elif (batch.batch_size // g_data) % parallel.microbatch_size != 0:
        violations.append(Violation(
            code="NonDivisibleShard",
            message=f"microbatch_size={parallel.microbatch_size} does not divide shard_size={batch.batch_size // g_data}",
            path="parallel.microbatch_size",
        ))

    if net.num_layers % g_inter != 0:
        violations.append(Violation(
            code="NonDivisibleLayers",
            message=f"g_inter={g_inter} does not divide num_layers={net.num_layers}",
            path="parallel.g_inter",
        ))
    elif parallel.checkpoint_interval is not None:
        per_worker = net.num_layers // g_inter
        if per_worker % parallel.checkpoint_interval != 0:
            violations.append(Violation(
                code="BadCheckpointInterval",
                message=f"checkpoint_interval={parallel.checkpoint_interval} does not divide layers per worker={per_worker}",
                path="parallel.checkpoint_interval",
            ))

    return violations


def validate(
    parallel: ParallelConfig,
    net: NetworkSpec,
    batch: BatchConfig,
    optimizer: Optional[OptimizerConfig] = None,
    cost_model: Optional[CostModel] = None,
    training: Optional[TrainingConfig] = None,
    memory: Optional[MemoryConfig] = None,
) -> ValidatedRun:
    """Check divisibility constraints and fill every derived field"""
    violations = collect_violations(parallel, net, batch)
    if violations:
        for v in violations:
            logger.error(f"Config violation {v.code}: {v.message}")
        raise ConfigValidationError(violations)

    g_inter = parallel.g_inter
    per_worker = net.num_layers // g_inter
    warnings = []

    ac = parallel.checkpoint_interval
    if ac is None:
        nearest = select_checkpoint_interval(net.num_layers, g_inter)
        best = minimize_activation_units(net.num_layers, g_inter)
        ac = nearest if parallel.checkpoint_rule == "nearest" else best
        if activation_units(net.num_layers, g_inter, nearest) != activation_units(net.num_layers, g_inter, best):
            warnings.append(
                f"nearest-factor checkpoint interval {nearest} uses more activation units than {best} "
                f"(layers per worker {per_worker} has few factors)"
            )

    shard_size = batch.batch_size // parallel.g_data
    resolved_batch = batch.model_copy(update={
        "shard_size": shard_size,
        "microbatches_per_shard": shard_size // parallel.microbatch_size,
        "total_microbatches": batch.batch_size // parallel.microbatch_size,
    })
    resolved_parallel = parallel.model_copy(update={
        "pipeline_limit": parallel.pipeline_limit or g_inter,
        "checkpoint_interval": ac,
        "workers": g_inter * parallel.g_data,
    })

    for message in warnings:
        logger.warning(message)

    return ValidatedRun(
        parallel=resolved_parallel,
        network=net,
        batch=resolved_batch,
        optimizer=optimizer or OptimizerConfig(),
        cost_model=cost_model or CostModel(),
        training=training or TrainingConfig(),
        memory=memory or MemoryConfig(),
        layers_per_worker=per_worker,
        warnings=warnings,
    )


def validate_run(run: RunConfig) -> ValidatedRun:
    return validate(run.parallel, run.network, run.batch, run.optimizer, run.cost_model, run.training, run.memory)


# ---------------------------------------------------------------------------
# YAML loading
# ---------------------------------------------------------------------------

def _parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ValueError(f"override {item!r} is not of the form dotted.key=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply dotted-key overrides such as parallel.g_inter=4"""
    for item in overrides:
        key, value = _parse_override(item)
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return data


def _line_of(root: Optional[yaml.Node], path: Sequence[Any]) -> Optional[int]:
    """1-based line of the deepest key of path present in the composed YAML"""
    node, line = root, None
    for part in path:
        if not isinstance(node, yaml.MappingNode):
            break
        for key_node, value_node in node.value:
            if key_node.value == str(part):
                line = key_node.start_mark.line + 1
                node = value_node
                break
        else:
            break
    return line


def load_run_config(path: str, overrides: Sequence[str] = ()) -> RunConfig:
    """Read and schema-check a YAML run configuration"""
    config_path = Path(path)
    try:
        text = config_path.read_text()
    except OSError as e:
        logger.error(f"Failed to read config from {config_path}: {e}")
        raise ConfigFileError(str(config_path), f"cannot read file ({e.strerror or e})")

    try:
        data = yaml.safe_load(text) or {}
        root = yaml.compose(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        logger.error(f"Failed to parse config {config_path}: {e}")
        raise ConfigFileError(str(config_path), f"invalid YAML: {getattr(e, 'problem', e)}", line)

    if not isinstance(data, dict):
        raise ConfigFileError(str(config_path), "top level must be a mapping", 1)

    try:
        data = apply_overrides(data, overrides)
    except ValueError as e:
        raise ConfigValidationError([Violation(code="InvalidValue", message=str(e))])

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        violations = []
        for err in e.errors():
            loc = [p for p in err["loc"] if not isinstance(p, int)]
            code = "UnknownKey" if err["type"] == "extra_forbidden" else "InvalidValue"
            violations.append(Violation(
                code=code,
                message=f"{'.'.join(map(str, err['loc']))}: {err['msg']}",
                path=".".join(map(str, loc)),
                line=_line_of(root, loc),
            ))
        raise ConfigValidationError(violations)


def load_validated(path: str, overrides: Sequence[str] = ()) -> ValidatedRun:
    return validate_run(load_run_config(path, overrides))


def resolved_config_dict(run: ValidatedRun) -> Dict[str, Any]:
    """JSON-ready dump of a validated run, embedded into every artifact"""
    return run.model_dump(mode="json")
