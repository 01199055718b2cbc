"""
Euler integration of a learned flow, bit error rate, and sample export.
"""

from pathlib import Path
from typing import Optional, Protocol, Union

import numpy as np

from binflow.core.flowcore import denoising_init
from binflow.core.ndmath import Rng, Tensor
from binflow.core.nets import Params
from binflow.core.objectives import check_bipolar, velocity_estimate
from binflow.errors import ContractError, IntegrationDivergenceError
from binflow.models import MlpConfig, ObjectiveConfig, SampleConfig
from binflow.storage import write_records


class FlowModel(Protocol):
    config: MlpConfig

    def predict(self, z: np.ndarray, t, cond=None, params: Optional[Params] = None) -> np.ndarray:
        ...


def time_grid(config: SampleConfig) -> np.ndarray:
    """Left endpoints of the uniform grid from t0 to 1; t = 1 itself is never evaluated"""
    dt = (1.0 - config.t0) / config.steps
    return config.t0 + dt * np.arange(config.steps)


def euler_sample(model: FlowModel, objective: ObjectiveConfig, config: SampleConfig,
                 cond=None, rng: Optional[Rng] = None, prior: Optional[np.ndarray] = None,
                 batch: Optional[int] = None, params: Optional[Params] = None) -> Tensor:
    """Integrate z <- z + v dt from t0 to 1.

    Generative mode (no ``prior``) starts from (1 - t0) e with e ~ N(0, I),
    which is pure noise at t0 = 0. Denoising mode starts from
    ``denoising_init(prior, t0)``. x-prediction models contribute
    v = (x_hat - z) / (1 - t + epsilon_t); v-prediction models their raw output.
    """
    if rng is None:
        raise ContractError("euler_sample needs an rng for the initial noise")
    if prior is None:
        if batch is None:
            raise ContractError("generative sampling needs a batch size")
        prior = np.zeros((batch, model.config.in_dim))
    z = denoising_init(Tensor(prior), config.t0, rng).data

    dt = (1.0 - config.t0) / config.steps
    with np.errstate(over="ignore", invalid="ignore"):
        for step, t in enumerate(time_grid(config)):
            output = model.predict(z, float(t), cond, params)
            velocity = velocity_estimate(objective, output, z, float(t), config.epsilon_t)
            z = z + velocity * dt
            if not np.all(np.isfinite(z)):
                raise IntegrationDivergenceError(step)

    if config.hard_threshold:
        z = np.where(z >= 0, 1.0, -1.0)
    return Tensor(z)


def ber(x_hat: Union[Tensor, np.ndarray], x_true: Union[Tensor, np.ndarray]) -> float:
    """Fraction of coordinates where sign(x_hat) differs from x_true; sign(0) is an error"""
    x_hat = x_hat.data if isinstance(x_hat, Tensor) else np.asarray(x_hat, dtype=np.float64)
    x_true = x_true.data if isinstance(x_true, Tensor) else np.asarray(x_true, dtype=np.float64)
    check_bipolar(x_true)
    return float(np.mean(np.sign(x_hat) != x_true))


def save_samples(path: Union[str, Path], samples: np.ndarray) -> Path:
    return write_records(path, {"samples": np.asarray(samples, dtype=np.float64)})


def tile_grid(images: np.ndarray, cols: int) -> np.ndarray:
    """Arrange (count, H, W) images row-major into one canvas; missing tiles stay -1"""
    count, height, width = images.shape
    rows = -(-count // cols)
    canvas = -np.ones((rows * height, cols * width))
    for k in range(count):
        r, c = divmod(k, cols)
        canvas[r * height:(r + 1) * height, c * width:(c + 1) * width] = images[k]
    return canvas


def write_pgm(path: Union[str, Path], image: np.ndarray) -> Path:
    """Binary (P5) greymap; values in [-1, 1] map linearly to [0, 255]"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.round((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + pixels.tobytes())
    return path
