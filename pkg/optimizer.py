"""
Optimizer module for hybridtrain

Adam with decoupled weight decay over full-precision master weights, plus the
bucketed host-offload execution: optimizer state lives on the host and only one
bucket of it is device resident at a time.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from models import OptimizerConfig
from nn_core import HALF_MAX, dequantize, quantize_half

logger = logging.getLogger(__name__)

# device bytes per parameter while its bucket is being stepped
MASTER_BYTES = 4
STATE_BYTES = 8
SCRATCH_BYTES = 4
BUCKET_BYTES_PER_PARAM = MASTER_BYTES + STATE_BYTES + SCRATCH_BYTES


class NonFiniteGradient(ArithmeticError):
    """A descaled gradient contains NaN or Inf; the step must be skipped"""

    def __init__(self, buckets: List[int]):
        self.buckets = list(buckets)
        super().__init__(f"non-finite gradient in bucket(s) {self.buckets}")


def promote_and_descale(grad16, loss_scale: float) -> np.ndarray:
    """Full-precision gradient from a half-precision one, with the loss scale divided out"""
    if loss_scale <= 0:
        raise ValueError(f"loss_scale must be positive, got {loss_scale}")
    return dequantize(grad16) / loss_scale


def gradient_overflow(grad, mixed_precision: bool) -> bool:
    """True when a gradient has NaN/Inf or, in half precision, has saturated"""
    grad = np.asarray(grad)
    if not np.all(np.isfinite(grad)):
        return True
    return bool(mixed_precision and grad.size and np.max(np.abs(grad)) >= HALF_MAX)


@dataclass
class OptimizerState:
    master_params: np.ndarray
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def from_params(cls, params: np.ndarray) -> "OptimizerState":
        params = np.asarray(params, dtype=np.float64).copy()
        return cls(params, np.zeros_like(params), np.zeros_like(params))

    @property
    def parameter_count(self) -> int:
        return self.master_params.size


def _adam_update(theta: np.ndarray, m: np.ndarray, v: np.ndarray, grad: np.ndarray, cfg: OptimizerConfig, step: int):
    """In-place elementwise AdamW on matching slices"""
    lr = cfg.learning_rate
    if cfg.weight_decay != 0.0:
        theta *= 1.0 - lr * cfg.weight_decay

    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * grad * grad

    bias1 = 1.0 - cfg.beta1 ** step
    bias2 = 1.0 - cfg.beta2 ** step
    step_size = lr * np.sqrt(bias2) / bias1
    theta -= step_size * m / (np.sqrt(v) + cfg.epsilon)


def adam_step(state: OptimizerState, grad, cfg: OptimizerConfig) -> np.ndarray:
    """One monolithic Adam step; returns the refreshed half-precision mirror"""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.master_params.shape:
        raise ValueError(f"gradient has {grad.size} entries, state has {state.parameter_count}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient([0])
    state.step_count += 1
    _adam_update(state.master_params, state.first_moment, state.second_moment, grad, cfg, state.step_count)
    return quantize_half(state.master_params)


class OffloadStore:
    """Host-resident optimizer state stepped one bucket at a time"""

    def __init__(self, params: np.ndarray, bucket_size: int):
        if bucket_size < 1:
            raise ValueError("bucket_size must be positive")
        self.host = OptimizerState.from_params(params)
        self.bucket_size = bucket_size
        self.theta16 = quantize_half(self.host.master_params)
        self.residency = ["host"] * self.num_buckets
        self.device_bytes = 0
        self.peak_device_bytes = 0
        self.residency_trace: List[Tuple[str, int, int]] = []
        self._staged: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    @property
    def parameter_count(self) -> int:
        return self.host.parameter_count

    @property
    def num_buckets(self) -> int:
        return -(-self.parameter_count // self.bucket_size)

    @property
    def step_count(self) -> int:
        return self.host.step_count

    def bucket_slice(self, index: int) -> slice:
        start = index * self.bucket_size
        return slice(start, min(start + self.bucket_size, self.parameter_count))

    def _account(self, event: str, index: int, delta: int):
        self.device_bytes += delta
        self.peak_device_bytes = max(self.peak_device_bytes, self.device_bytes)
        self.residency_trace.append((event, index, self.device_bytes))

    def fetch(self, index: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.residency[index] != "host":
            raise RuntimeError(f"bucket {index} is already device resident")
        part = self.bucket_slice(index)
        n = part.stop - part.start
        self.residency[index] = "device"
        self._account("fetch", index, (MASTER_BYTES + STATE_BYTES) * n)
        host = self.host
        return host.master_params[part].copy(), host.first_moment[part].copy(), host.second_moment[part].copy()

    def write_back(self, index: int, theta: np.ndarray, m: np.ndarray, v: np.ndarray):
        part = self.bucket_slice(index)
        self.host.master_params[part] = theta
        self.host.first_moment[part] = m
        self.host.second_moment[part] = v
        self.theta16[part] = quantize_half(theta)
        self.residency[index] = "host"
        self._account("write_back", index, -(MASTER_BYTES + STATE_BYTES) * (part.stop - part.start))

    def begin_step(self):
        self.host.step_count += 1

    def _update_bucket(self, index: int, grad16_slice, cfg: OptimizerConfig, loss_scale: float):
        theta, m, v = self.fetch(index)
        self._account("descale", index, SCRATCH_BYTES * theta.size)
        grad = promote_and_descale(grad16_slice, loss_scale)
        _adam_update(theta, m, v, grad, cfg, self.host.step_count)
        self._account("release_scratch", index, -SCRATCH_BYTES * theta.size)
        return theta, m, v

    def step_bucket(self, index: int, grad16_slice, cfg: OptimizerConfig, loss_scale: float):
        """fetch, descale, update and write back a single bucket"""
        theta, m, v = self._update_bucket(index, grad16_slice, cfg, loss_scale)
        self.write_back(index, theta, m, v)
        logger.debug(f"Stepped bucket {index} ({theta.size} params)")

    def stage_bucket(self, index: int, grad16_slice, cfg: OptimizerConfig, loss_scale: float):
        """Like step_bucket, but the updated bucket is held until commit_staged"""
        theta, m, v = self._update_bucket(index, grad16_slice, cfg, loss_scale)
        self._staged[index] = (theta, m, v)
        self.residency[index] = "staged"
        self._account("stage", index, -(MASTER_BYTES + STATE_BYTES) * theta.size)

    @property
    def staged_buckets(self) -> List[int]:
        return sorted(self._staged)

    def commit_staged(self):
        for index in sorted(self._staged):
            theta, m, v = self._staged.pop(index)
            part = self.bucket_slice(index)
            self.host.master_params[part] = theta
            self.host.first_moment[part] = m
            self.host.second_moment[part] = v
            self.theta16[part] = quantize_half(theta)
            self.residency[index] = "host"

    def abort_step(self):
        """Drop staged buckets and undo begin_step; host state is left as before the step"""
        for index in self._staged:
            self.residency[index] = "host"
        self._staged.clear()
        self.host.step_count -= 1


def bucketed_step(store: OffloadStore, grad16, cfg: OptimizerConfig, loss_scale: Optional[float] = None,
                  buckets: Optional[Iterable[int]] = None) -> np.ndarray:
    """Adam over host-offloaded state in ascending bucket order.

    Every bucket is checked for non-finite values before any bucket is written,
    so an overflowing step leaves the store untouched.
    """
    grad16 = np.asarray(grad16)
    if grad16.size != store.parameter_count:
        raise ValueError(f"gradient has {grad16.size} entries, store has {store.parameter_count}")
    scale = cfg.loss_scale if loss_scale is None else loss_scale
    order = sorted(range(store.num_buckets) if buckets is None else buckets)

    bad = [i for i in order if not np.all(np.isfinite(promote_and_descale(grad16[store.bucket_slice(i)], scale)))]
    if bad:
        raise NonFiniteGradient(bad)

    store.begin_step()
    for index in order:
        store.step_bucket(index, grad16[store.bucket_slice(index)], cfg, scale)
    return store.theta16
