"""
Binarized-image generation: IDX ingestion, binarization, class-conditional
training per objective cell, Euler sampling and sample-quality proxies.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from binflow.core.engine import TrainResult, ValidationRecord, ValidationSet, train, validate, validation_spread
from binflow.core.ndmath import Rng
from binflow.core.nets import GatedMlp, Params
from binflow.core.sampler import euler_sample, save_samples, tile_grid, write_pgm
from binflow.core.tables import (
    create_run_summary, summarize_cell, summary_frame, write_frame, write_history, write_trace,
)
from binflow.errors import DimensionError, FormatError, IntegrationDivergenceError, MissingInputError
from binflow.models import BmnistConfig, MlpConfig, ObjectiveConfig, SampleConfig, TrainConfig
from binflow.storage import read_records, write_records
from binflow.utils.helpers import is_nonincreasing, smooth
from binflow.utils.validation import validate_bipolar_images

logger = logging.getLogger(__name__)

METRIC_NAMES = ("binariness", "marginal_l1", "nn_hamming")

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
NUM_CLASSES = 10

DATASET_HINT = ("Download the MNIST training files (train-images-idx3-ubyte, "
                "train-labels-idx1-ubyte), decompress them and pass --images/--labels.")

PathLike = Union[str, Path]


@dataclass
class GrayscaleSet:
    """Raw IDX content: unsigned byte pixels and labels"""
    pixels: np.ndarray
    labels: np.ndarray

    @property
    def source_dims(self) -> Tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]


@dataclass
class BinaryImageSet:
    """Images with entries exactly +-1 and labels in [0, 9]"""
    images: np.ndarray
    labels: np.ndarray
    source_dims: Tuple[int, int] = (28, 28)

    @property
    def count(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def flat(self) -> np.ndarray:
        return self.images.reshape(self.count, -1)


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(str(path), DATASET_HINT)
    return path.read_bytes()


def _header(blob: bytes, fields: int, magic: int, what: str) -> Tuple[int, ...]:
    size = 4 * fields
    if len(blob) < size:
        raise FormatError(f"truncated {what} header", len(blob))
    values = struct.unpack_from(f">{fields}I", blob, 0)
    if values[0] != magic:
        raise FormatError(f"bad {what} magic 0x{values[0]:08x}, expected 0x{magic:08x}", 0)
    return values[1:]


def _payload(blob: bytes, offset: int, nbytes: int, what: str) -> np.ndarray:
    if len(blob) < offset + nbytes:
        raise FormatError(f"truncated {what} payload: expected {nbytes} bytes", len(blob))
    if len(blob) > offset + nbytes:
        raise FormatError(f"trailing bytes after {what} payload", offset + nbytes)
    return np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=offset).copy()


def load_idx(images_path: PathLike, labels_path: PathLike) -> GrayscaleSet:
    """
    Parse big-endian IDX image and label files.

    Args:
        images_path: idx3 file (magic 0x00000803, dims count/rows/cols)
        labels_path: idx1 file (magic 0x00000801, dim count)

    Returns:
        GrayscaleSet with uint8 pixels of shape (count, rows, cols)
    """
    image_blob = _read_bytes(images_path)
    label_blob = _read_bytes(labels_path)

    count, rows, cols = _header(image_blob, 4, IMAGES_MAGIC, "images")
    pixels = _payload(image_blob, 16, count * rows * cols, "images").reshape(count, rows, cols)

    (label_count,) = _header(label_blob, 2, LABELS_MAGIC, "labels")
    if label_count != count:
        raise FormatError(f"label count {label_count} does not match image count {count}", 4)
    labels = _payload(label_blob, 8, label_count, "labels")
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} outside [0, 9]", 8 + int(bad[0]))

    logger.info("loaded %d images of %dx%d", count, rows, cols)
    return GrayscaleSet(pixels=pixels, labels=labels.astype(np.int64))


def binarize_and_downscale(grayscale: GrayscaleSet, threshold: float = 0.5,
                           factor: int = 2) -> BinaryImageSet:
    """Mean-pool by ``factor`` then map pixel/255 >= threshold to +1, else -1"""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if factor not in (1, 2):
        raise ValueError("factor must be 1 or 2")
    pixels = grayscale.pixels.astype(np.float64) / 255.0
    count, rows, cols = pixels.shape
    if rows % factor or cols % factor:
        raise DimensionError(f"{rows}x{cols} images do not pool by {factor}")
    if factor > 1:
        pixels = pixels.reshape(count, rows // factor, factor, cols // factor, factor).mean(axis=(2, 4))
    images = np.where(pixels - threshold >= 0, 1.0, -1.0)
    return BinaryImageSet(images=images, labels=grayscale.labels.copy(), source_dims=(rows, cols))


def save_cache(path: PathLike, data: BinaryImageSet) -> Path:
    return write_records(path, {
        "images": data.images,
        "labels": data.labels.astype(np.float64),
        "source_dims": np.asarray(data.source_dims, dtype=np.float64),
    })


def load_cache(path: PathLike) -> BinaryImageSet:
    records = read_records(path)
    data = BinaryImageSet(
        images=records["images"],
        labels=records["labels"].astype(np.int64),
        source_dims=tuple(int(v) for v in records["source_dims"]),
    )
    errors = validate_bipolar_images(data.images, data.labels)
    if errors:
        raise ValueError(f"corrupt dataset cache {path}: {'; '.join(errors)}")
    return data


def prepare_dataset(config: BmnistConfig) -> BinaryImageSet:
    """Binarized subset, reusing the cache when present"""
    if config.cache_path and Path(config.cache_path).is_file():
        data = load_cache(config.cache_path)
        if data.count >= config.subset:
            logger.info("using dataset cache %s", config.cache_path)
            return BinaryImageSet(images=data.images[:config.subset], labels=data.labels[:config.subset],
                                  source_dims=data.source_dims)
        logger.info("dataset cache holds %d images, rebuilding for %d", data.count, config.subset)
    grayscale = load_idx(config.images_path, config.labels_path)
    subset = GrayscaleSet(pixels=grayscale.pixels[:config.subset], labels=grayscale.labels[:config.subset])
    data = binarize_and_downscale(subset, config.threshold, config.downscale)
    if config.cache_path:
        save_cache(config.cache_path, data)
    return data


class ImageSource:
    """Uniform draws of flattened images with their class labels"""

    def __init__(self, data: BinaryImageSet):
        self.data = data
        self.x = data.flat()
        self.dim = self.x.shape[1]

    def sample(self, rng: Rng, batch: int) -> Tuple[np.ndarray, np.ndarray]:
        index = rng.integers(0, self.data.count, batch)
        return self.x[index], self.data.labels[index]


# ---------------------------------------------------------------------------
# Quality proxies
# ---------------------------------------------------------------------------

def threshold_samples(samples: np.ndarray) -> np.ndarray:
    return np.where(samples >= 0, 1.0, -1.0)


def binariness(samples: np.ndarray) -> float:
    """Mean |x| after the final Euler step; 1 for perfectly binary output"""
    return float(np.mean(np.abs(samples)))


def marginal_distance(samples: np.ndarray, train_x: np.ndarray) -> float:
    """Mean over pixels of |P_samples(+1) - P_train(+1)| for thresholded samples"""
    p_samples = (threshold_samples(samples).mean(axis=0) + 1.0) / 2.0
    p_train = (train_x.mean(axis=0) + 1.0) / 2.0
    return float(np.mean(np.abs(p_samples - p_train)))


def nearest_neighbor_hamming(samples: np.ndarray, train_x: np.ndarray) -> float:
    """Mean over samples of the Hamming distance to the closest training image"""
    signs = threshold_samples(samples)
    distances = (train_x.shape[1] - signs @ train_x.T) / 2.0
    return float(np.mean(distances.min(axis=1)))


def sample_metrics(samples: Optional[np.ndarray], train_x: np.ndarray) -> Dict[str, float]:
    """Quality proxies of generated samples; all NaN when sampling diverged (``samples`` is None)"""
    if samples is None:
        return {name: float("nan") for name in METRIC_NAMES}
    return {
        "binariness": binariness(samples),
        "marginal_l1": marginal_distance(samples, train_x),
        "nn_hamming": nearest_neighbor_hamming(samples, train_x),
    }


# ---------------------------------------------------------------------------
# Recipe
# ---------------------------------------------------------------------------

def model_config(config: BmnistConfig, dim: int) -> MlpConfig:
    return MlpConfig(in_dim=dim, out_dim=dim, hidden=config.hidden, layers=config.layers,
                     embed_dim=config.embed_dim, cond_classes=NUM_CLASSES)


def class_conditions(samples_per_class: int) -> np.ndarray:
    return np.repeat(np.arange(NUM_CLASSES), samples_per_class)


def draw_samples(model: GatedMlp, objective: ObjectiveConfig, config: BmnistConfig,
                 params: Optional[Params], rng: Rng) -> Optional[np.ndarray]:
    cond = class_conditions(config.samples_per_class)
    try:
        samples = euler_sample(model, objective, SampleConfig(steps=config.euler_steps), cond=cond,
                               rng=rng, batch=cond.size, params=params)
    except IntegrationDivergenceError as exc:
        logger.warning("%s: sampling failed: %s", objective.name, exc)
        return None
    return samples.data


def untrained_baseline(config: BmnistConfig, data: BinaryImageSet) -> Dict[str, float]:
    """Metrics of samples from an all-zero network (x-prediction reading)"""
    model = GatedMlp(model_config(config, data.flat().shape[1]), rng=Rng(config.seed).derive(1))
    zeros = Params.from_arrays({name: np.zeros_like(t.data) for name, t in model.params.items()})
    objective = ObjectiveConfig(prediction="x_pred", loss="x_mse")
    samples = draw_samples(model, objective, config, zeros, Rng(config.seed).derive(4))
    return sample_metrics(samples, data.flat())


def loss_monotone_tail(result: TrainResult, tail: float = 0.8, window: Optional[int] = None) -> bool:
    """Smoothed training loss nonincreasing over the final ``tail`` share of steps"""
    losses = [record.loss for record in result.history]
    if len(losses) < 2:
        return False
    window = window or max(1, len(losses) // 10)
    smoothed = smooth(losses, window)
    start = int(len(smoothed) * (1.0 - tail))
    return is_nonincreasing(smoothed[start:])


@dataclass
class BmnistCell:
    name: str
    result: TrainResult
    metrics: Dict[str, float]
    samples: Optional[np.ndarray] = None
    validation_table: Optional[pd.DataFrame] = None


@dataclass
class BmnistRun:
    cells: Dict[str, BmnistCell] = field(default_factory=dict)
    baseline: Dict[str, float] = field(default_factory=dict)
    metrics: Optional[pd.DataFrame] = None
    summary: Optional[pd.DataFrame] = None
    outputs: List[Path] = field(default_factory=list)

    @property
    def divergence_events(self):
        return {name: cell.result.divergence for name, cell in self.cells.items()
                if cell.result.divergence is not None}


def run_bmnist_cell(config: BmnistConfig, objective: ObjectiveConfig, data: BinaryImageSet,
                    cell_dir: Optional[Path] = None) -> BmnistCell:
    name = f"{objective.name}__{config.sampler.kind}"
    source = ImageSource(data)
    model = GatedMlp(model_config(config, source.dim), rng=Rng(config.seed).derive(1))
    train_config = TrainConfig(lr=config.lr, steps=config.steps, batch=config.batch, seed=config.seed,
                               sampler=config.sampler, objective=objective,
                               validate_every=config.validate_every, progress=config.progress)
    val_set = ValidationSet.draw(source, Rng(config.seed).derive(3), config.val_size)
    result = train(train_config, model, source, val_source=val_set, checkpoint_dir=cell_dir, label=name)

    params = result.evaluation_params()
    samples = draw_samples(model, objective, config, params, Rng(config.seed).derive(4))
    metrics = sample_metrics(samples, source.x)
    metrics["validation_spread"] = validation_spread(result.validation)
    metrics["loss_monotone_tail"] = loss_monotone_tail(result)

    with np.errstate(all="ignore"):
        table = validate(params, model, objective, val_set, train_config.validation_t_grid)
    return BmnistCell(name=name, result=result, metrics=metrics, samples=samples, validation_table=table)


def run_bmnist(config: BmnistConfig, out_dir: Optional[Path] = None) -> BmnistRun:
    """Train each objective with class conditioning, sample and score it against the baseline"""
    data = prepare_dataset(config)
    errors = validate_bipolar_images(data.images, data.labels)
    if errors:
        raise ValueError("; ".join(errors))

    run = BmnistRun(baseline=untrained_baseline(config, data))
    logger.info("untrained baseline: %s", run.baseline)
    metric_rows = [{"cell": "untrained", **run.baseline}]
    summary_rows = []

    for objective in config.objectives:
        cell_dir = Path(out_dir) / f"{objective.name}__{config.sampler.kind}" if out_dir is not None else None
        cell = run_bmnist_cell(config, objective, data, cell_dir)
        run.cells[cell.name] = cell
        metric_rows.append({"cell": cell.name, **cell.metrics})
        summary_rows.append(summarize_cell(cell.name, cell.result))
        if cell_dir is not None:
            run.outputs.extend(write_bmnist_cell(cell, cell_dir, data.shape, config.samples_per_class))

    run.metrics = pd.DataFrame(metric_rows)
    run.summary = summary_frame(summary_rows)
    logger.info("bmnist summary: %s", create_run_summary(run.summary))
    if out_dir is not None:
        run.outputs.append(write_frame(run.metrics, Path(out_dir) / "metrics.csv"))
        run.outputs.append(write_frame(run.summary, Path(out_dir) / "summary.csv"))
    return run


def write_bmnist_cell(cell: BmnistCell, cell_dir: Path, shape: Tuple[int, int], cols: int) -> List[Path]:
    validation = pd.DataFrame(cell.result.validation, columns=list(ValidationRecord._fields))
    outputs = [
        write_trace(cell.result.trace, cell_dir / "trace.csv"),
        write_history(cell.result, cell_dir / "history.csv"),
        write_frame(validation, cell_dir / "validation.csv"),
        write_frame(cell.validation_table, cell_dir / "validation_t.csv"),
    ]
    if cell.result.best_step is not None:
        outputs.append(cell_dir / "best.bnfm")
    if cell.samples is not None:
        outputs.append(save_samples(cell_dir / "samples.bnfm", cell.samples))
        images = threshold_samples(cell.samples).reshape(-1, *shape)
        outputs.append(write_pgm(cell_dir / "samples.pgm", tile_grid(images, cols)))
    return outputs
