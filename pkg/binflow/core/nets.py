"""
FiLM-gated MLP backbone with sinusoidal time embedding and optional
class or vector conditioning.
"""

import logging
import math
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple, Union

import numpy as np

from binflow.core.ndmath import Rng, Tensor, as_tensor, linear, sigmoid, silu, take_rows
from binflow.errors import ConfigError, DimensionError, DomainError, NonFiniteParameterError
from binflow.models import MlpConfig
from binflow.storage import read_records, write_records

logger = logging.getLogger(__name__)


def time_embed(t: Union[float, np.ndarray], dim: int) -> Tensor:
    """Interleaved (sin, cos) pairs at frequencies geometric from 1 to 1e4"""
    if dim % 2 or dim <= 0:
        raise ConfigError(f"time embedding dimension must be positive and even, got {dim}")
    half = dim // 2
    freqs = np.geomspace(1.0, 1e4, half) if half > 1 else np.ones(1)
    angles = np.asarray(t, dtype=np.float64)[..., None] * freqs
    emb = np.empty(angles.shape[:-1] + (dim,))
    emb[..., 0::2] = np.sin(angles)
    emb[..., 1::2] = np.cos(angles)
    return Tensor(emb)


class Params:
    """Named trainable tensors"""

    def __init__(self, tensors: Dict[str, Tensor]):
        self._tensors = dict(tensors)
        for name, tensor in self._tensors.items():
            tensor.requires_grad = True
            tensor.name = name

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def values(self) -> Iterator[Tensor]:
        return iter(self._tensors.values())

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def grads(self) -> Dict[str, np.ndarray]:
        return {
            name: tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            for name, tensor in self._tensors.items()
        }

    def check_finite(self, step: Optional[int] = None) -> None:
        for name, tensor in self._tensors.items():
            if not np.all(np.isfinite(tensor.data)):
                raise NonFiniteParameterError(name, step)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self._tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "Params":
        return cls({name: Tensor(array) for name, array in arrays.items()})

    def snapshot(self) -> "Params":
        return Params.from_arrays(self.to_arrays())


def _weight(rng: Rng, fan_in: int, fan_out: int) -> Tensor:
    return Tensor(rng.normal((fan_in, fan_out)) * math.sqrt(1.0 / fan_in))


def init_params(config: MlpConfig, rng: Rng) -> Params:
    """Weights ~ N(0, 1/fan_in), biases zero, class table ~ N(0, 1)"""
    tensors: Dict[str, Tensor] = {
        "input.weight": _weight(rng, config.in_dim, config.hidden),
        "input.bias": Tensor(np.zeros(config.hidden)),
    }
    for layer in range(config.layers):
        tensors[f"hidden.{layer}.weight"] = _weight(rng, config.hidden, config.hidden)
        tensors[f"hidden.{layer}.bias"] = Tensor(np.zeros(config.hidden))
        tensors[f"gate.{layer}.weight"] = _weight(rng, config.embed_dim, config.hidden)
        tensors[f"gate.{layer}.bias"] = Tensor(np.zeros(config.hidden))
    tensors["output.weight"] = _weight(rng, config.hidden, config.out_dim)
    tensors["output.bias"] = Tensor(np.zeros(config.out_dim))

    if config.cond_classes is not None:
        tensors["cond.table"] = Tensor(rng.normal((config.cond_classes, config.embed_dim)))
    if config.cond_vec_dim is not None:
        tensors["cond.weight"] = _weight(rng, config.cond_vec_dim, config.embed_dim)
        tensors["cond.bias"] = Tensor(np.zeros(config.embed_dim))
    return Params(tensors)


class GatedMlp:
    """Shared backbone for x- and v-prediction; the objective decides how the
    output is read.

    Each hidden layer computes ``h <- silu(W h + b) * sigmoid(G emb + g)`` where
    ``emb`` is the time embedding plus the condition embedding.
    """

    def __init__(self, config: MlpConfig, rng: Optional[Rng] = None, params: Optional[Params] = None):
        if params is None:
            if rng is None:
                raise ConfigError("GatedMlp needs either params or an rng for initialization")
            params = init_params(config, rng)
        self.config = config
        self.params = params

    @property
    def conditioned(self) -> bool:
        return self.config.cond_classes is not None or self.config.cond_vec_dim is not None

    def embed_condition(self, cond: np.ndarray, params: Optional[Params] = None) -> Tensor:
        """Class lookup or linear projection of a condition vector"""
        p = params if params is not None else self.params
        if self.config.cond_classes is not None:
            index = np.asarray(cond)
            if not np.issubdtype(index.dtype, np.integer):
                if not np.all(np.equal(np.mod(index, 1), 0)):
                    raise DomainError("class conditions must be integers")
                index = index.astype(np.int64)
            index = np.atleast_1d(index)
            if np.any((index < 0) | (index >= self.config.cond_classes)):
                raise DomainError(f"class index outside [0, {self.config.cond_classes})")
            return take_rows(p["cond.table"], index)

        if self.config.cond_vec_dim is not None:
            vector = np.atleast_2d(np.asarray(cond, dtype=np.float64))
            if vector.shape[1] != self.config.cond_vec_dim:
                raise ConfigError(
                    f"condition vector has width {vector.shape[1]}, expected {self.config.cond_vec_dim}")
            return linear(Tensor(vector), p["cond.weight"], p["cond.bias"])

        raise ConfigError("model is not configured for conditioning")

    def forward(self, z, t, cond=None, params: Optional[Params] = None) -> Tensor:
        """Raw output of shape (batch, out_dim); ``t`` is a scalar or one per row"""
        p = params if params is not None else self.params
        z = as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.config.in_dim:
            raise DimensionError(f"expected (batch, {self.config.in_dim}) input, got {z.shape}")
        if (cond is not None) != self.conditioned:
            raise ConfigError("condition provided does not match the configured conditioning")

        batch = z.shape[0]
        t_rows = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        emb = time_embed(t_rows, self.config.embed_dim)
        if cond is not None:
            cond_emb = self.embed_condition(cond, p)
            if cond_emb.shape != emb.shape:
                raise DimensionError(f"{cond_emb.shape[0]} conditions for a batch of {batch}")
            emb = emb + cond_emb

        h = linear(z, p["input.weight"], p["input.bias"])
        for layer in range(self.config.layers):
            hidden = silu(linear(h, p[f"hidden.{layer}.weight"], p[f"hidden.{layer}.bias"]))
            gate = sigmoid(linear(emb, p[f"gate.{layer}.weight"], p[f"gate.{layer}.bias"]))
            h = hidden * gate
        return linear(h, p["output.weight"], p["output.bias"])

    def predict(self, z: np.ndarray, t, cond=None, params: Optional[Params] = None) -> np.ndarray:
        """Forward pass as a plain array (no gradient recording intended)"""
        return self.forward(z, t, cond, params).data


def save_params(params: Params, path: Union[str, Path]) -> Path:
    logger.debug("writing checkpoint %s (%d tensors)", path, len(params))
    return write_records(path, params.to_arrays())


def load_params(path: Union[str, Path]) -> Params:
    return Params.from_arrays(read_records(path))
