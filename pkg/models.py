"""
Pydantic models for the hybridtrain engine and simulator
"""

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class StrictModel(BaseModel):
    """Base for every run-configuration section: unknown keys are errors"""

    model_config = ConfigDict(extra="forbid", frozen=True)


class ParallelConfig(StrictModel):
    g_inter: int = Field(..., ge=1, description="Workers per pipeline (inter-layer parallelism)")
    g_data: int = Field(..., ge=1, description="Data-parallel groups")
    microbatch_size: int = Field(1, ge=1, description="Samples per microbatch")
    pipeline_limit: Optional[int] = Field(None, ge=1, description="Max in-flight microbatches; defaults to g_inter")
    bucket_size: int = Field(16_000_000, ge=1, description="Parameters per offload bucket (bsize)")
    coarsening_k: int = Field(1, ge=1, description="All-reduce coarsening factor k")
    checkpoint_interval: Optional[int] = Field(None, ge=1, description="Activation checkpoint interval (ac); selected when unset")
    checkpoint_rule: Literal["nearest", "min_units"] = Field("nearest", description="Rule used when checkpoint_interval is unset")
    workers: Optional[int] = Field(None, ge=1, description="Total worker count; defaults to g_inter * g_data")


class NetworkSpec(StrictModel):
    num_layers: int = Field(..., ge=1, description="Number of layers (N)")
    layer_dims: Optional[List[Tuple[int, int]]] = Field(None, description="(input width, output width) per layer")
    width: Optional[int] = Field(None, ge=1, description="Square layer width when layer_dims is omitted")
    activation: Literal["tanh", "relu", "linear"] = "tanh"
    output_activation: Literal["tanh", "relu", "linear"] = "linear"
    loss: Literal["mse", "cross_entropy"] = "mse"
    uniform_activation_bytes: Optional[int] = Field(None, ge=1, description="Activation bytes per sample between layers")

    @model_validator(mode="before")
    @classmethod
    def _fill_dims(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        if data.get("layer_dims") is None and data.get("width") is not None and data.get("num_layers") is not None:
            data["layer_dims"] = [(data["width"], data["width"])] * int(data["num_layers"])
        dims = data.get("layer_dims")
        if data.get("uniform_activation_bytes") is None and dims:
            # half-precision activations of the first layer output
            data["uniform_activation_bytes"] = 2 * int(dims[0][1])
        return data

    @model_validator(mode="after")
    def _check_dims(self) -> "NetworkSpec":
        dims = self.layer_dims
        if dims is None:
            raise ValueError("network needs either layer_dims or width")
        if len(dims) != self.num_layers:
            raise ValueError(f"num_layers={self.num_layers} but {len(dims)} layer_dims given")
        for i, (fan_in, fan_out) in enumerate(dims):
            if fan_in < 1 or fan_out < 1:
                raise ValueError(f"layer {i} has non-positive width ({fan_in}, {fan_out})")
        for i in range(len(dims) - 1):
            if dims[i][1] != dims[i + 1][0]:
                raise ValueError(f"layer {i} output width {dims[i][1]} does not chain into layer {i + 1} input width {dims[i + 1][0]}")
        return self

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0][0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1][1]

    def layer_parameter_count(self, index: int) -> int:
        fan_in, fan_out = self.layer_dims[index]
        return fan_out * fan_in + fan_out

    @property
    def parameter_count_total(self) -> int:
        return sum(self.layer_parameter_count(i) for i in range(self.num_layers))

    def layer_forward_flops(self, index: int) -> int:
        """Multiply-add flops of one layer for one sample"""
        fan_in, fan_out = self.layer_dims[index]
        return 2 * fan_in * fan_out


class BatchConfig(StrictModel):
    batch_size: int = Field(..., ge=1)
    shard_size: Optional[int] = Field(None, description="Derived: batch_size / g_data")
    microbatches_per_shard: Optional[int] = Field(None, description="Derived: shard_size / microbatch_size")
    total_microbatches: Optional[int] = Field(None, description="Derived: batch_size / microbatch_size")


class OptimizerConfig(StrictModel):
    learning_rate: float = 1e-3
    beta1: float = Field(0.9, gt=0.0, lt=1.0)
    beta2: float = Field(0.999, gt=0.0, lt=1.0)
    epsilon: float = Field(1e-8, gt=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    loss_scale: float = Field(1.0, gt=0.0, description="Mixed-precision loss scaling factor")
    dynamic_loss_scale: bool = Field(False, description="Halve loss_scale when a step overflows")

    @field_validator("learning_rate", "epsilon", "weight_decay", "loss_scale")
    @classmethod
    def _finite(cls, value: float) -> float:
        if value != value or value in (float("inf"), float("-inf")):
            raise ValueError("must be finite")
        return value


class CostModel(StrictModel):
    device_flops: float = Field(125e12, gt=0, description="Device flop/s")
    backward_multiplier: float = Field(2.0, ge=1.0, description="Backward cost relative to forward")
    link_latency: float = Field(5e-6, gt=0, description="Point-to-point latency (s)")
    link_bandwidth: float = Field(12.5e9, gt=0, description="Point-to-point bandwidth (B/s)")
    allreduce_bandwidth: float = Field(3e9, gt=0, description="Effective ring all-reduce bandwidth (B/s)")
    collective_overhead: float = Field(4.5e-3, gt=0, description="Fixed cost per all-reduce call (s)")
    host_bandwidth: float = Field(50e9, gt=0, description="Host<->device copy bandwidth (B/s)")
    optimizer_rate: float = Field(1e11, gt=0, description="Adam parameter updates per second on device")
    bucket_overhead: float = Field(1e-5, gt=0, description="Fixed cost per optimizer bucket (s)")


class TrainingConfig(StrictModel):
    steps: int = Field(10, ge=0)
    seed: int = 0
    mixed_precision: bool = False
    offload: bool = True
    overlap: bool = False
    dataset: Literal["regression", "classification"] = "regression"
    dataset_size: Optional[int] = Field(None, ge=1, description="Samples in the synthetic pool; defaults to 4 batches")
    input_noise: float = Field(0.01, ge=0.0)


class TransformerShape(StrictModel):
    layers: int = Field(..., ge=1)
    hidden: int = Field(..., ge=1)
    vocab: int = Field(0, ge=0)
    sequence: int = Field(512, ge=1)


class MemoryConfig(StrictModel):
    parameters_per_worker: Optional[int] = Field(None, ge=1, description="Override of phi for ledgers of models too large to build")
    bytes_per_activation_unit: Optional[int] = Field(None, ge=1)
    transformer: Optional[TransformerShape] = None


class RunConfig(StrictModel):
    parallel: ParallelConfig
    network: NetworkSpec
    batch: BatchConfig
    optimizer: OptimizerConfig = OptimizerConfig()
    cost_model: CostModel = CostModel()
    training: TrainingConfig = TrainingConfig()
    memory: MemoryConfig = MemoryConfig()


class Violation(BaseModel):
    code: str
    message: str
    path: Optional[str] = None
    line: Optional[int] = None


class ValidatedRun(StrictModel):
    """Normalized run descriptor: every derived field is filled in"""

    parallel: ParallelConfig
    network: NetworkSpec
    batch: BatchConfig
    optimizer: OptimizerConfig
    cost_model: CostModel
    training: TrainingConfig
    memory: MemoryConfig
    layers_per_worker: int
    warnings: List[str] = Field(default_factory=list)

    @property
    def workers(self) -> int:
        return self.parallel.g_inter * self.parallel.g_data

    def stage_layers(self, row: int) -> range:
        start = row * self.layers_per_worker
        return range(start, start + self.layers_per_worker)


class BatchResult(BaseModel):
    loss: float = Field(..., description="Batch-mean loss with loss_scale divided out")
    grads_reduced: bool = False
    skipped: bool = False
    loss_scale: float = 1.0
    max_in_flight: int = 0
    comm_bytes: int = 0


class StepRecord(BaseModel):
    step: int
    loss: float
    loss_scale: float
    skipped: bool
    simulated_time: Optional[float] = Field(None, description="Simulated batch time of the config (s)")
    p2p_bytes: int
    allreduce_bytes: float
    messages: int
    max_in_flight: int


class WorkerTimes(BaseModel):
    row: int
    busy: float
    idle: float
    warmup_idle: float
    p2p_bytes_sent: int
    flops: float


class PerfReport(BaseModel):
    makespan: float = Field(..., description="Simulated batch time t (s)")
    inter_layer_time: float
    allreduce_optimizer_time: float
    sequential_allreduce_optimizer_time: float
    optimizer_only_time: float
    allreduce_calls: int
    collective_overhead_time: float
    warmup_idle_max: float
    workers: List[WorkerTimes]
    p2p_bytes_per_worker: int
    flops_per_worker: float
    allreduce_bytes_per_worker: float
    timeline: List[Dict] = Field(default_factory=list)


class RunManifest(BaseModel):
    command: Literal["validate", "train", "simulate", "sweep", "memory"]
    config_path: str
    seed: int
    output_dir: str
    overrides: List[str] = Field(default_factory=list)
