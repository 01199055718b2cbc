"""
Command-line flag checks and the key=value config-file parser; validators
return a list of error messages, empty when the input is acceptable.
"""

from pathlib import Path
from typing import Any, Dict, List, Sequence

import numpy as np


PREDICTIONS = {"x": "x_pred", "v": "v_pred"}
LOSSES = {"xmse": "x_mse", "vmse": "v_mse", "bce": "bce"}


def validate_objective_flags(pred: str, loss: str, data_kind: str) -> List[str]:
    """
    Validate a prediction/loss/data combination given on the command line.

    Args:
        pred: prediction flag (x or v)
        loss: loss flag (xmse, vmse or bce)
        data_kind: gaussian_iid or bpsk_iid

    Returns:
        List of validation errors (empty if valid)
    """
    errors = []
    if pred not in PREDICTIONS:
        errors.append(f"unknown prediction '{pred}', expected one of {sorted(PREDICTIONS)}")
    if loss not in LOSSES:
        errors.append(f"unknown loss '{loss}', expected one of {sorted(LOSSES)}")
    if pred == "v" and loss == "bce":
        errors.append("bce needs signal-space logits; use --pred x with --loss bce")
    if loss == "bce" and data_kind == "gaussian_iid":
        errors.append("bce needs binary data; use --data bpsk")
    return errors


def validate_sampler_flags(sampler: str, s: float) -> List[str]:
    errors = []
    if sampler not in ("uniform", "logitnormal"):
        errors.append(f"unknown sampler '{sampler}'")
    if s <= 0:
        errors.append("--s must be positive")
    return errors


def validate_dataset_paths(paths: Dict[str, str]) -> List[str]:
    """
    Check that dataset files exist.

    Args:
        paths: mapping of flag name to file path

    Returns:
        List of missing files, one message per file
    """
    return [f"{flag}: {path}" for flag, path in paths.items() if not Path(path).is_file()]


def validate_snr_sweep(sweep: Sequence[float]) -> List[str]:
    errors = []
    if not sweep:
        errors.append("SNR sweep is empty")
    elif any(not np.isfinite(v) for v in sweep):
        errors.append("SNR sweep contains non-finite values")
    elif list(sweep) != sorted(set(sweep)):
        errors.append("SNR sweep must be strictly increasing")
    return errors


def validate_bipolar_images(images: np.ndarray, labels: np.ndarray) -> List[str]:
    """Binary image set contract: entries exactly +-1, labels in [0, 9], counts agree"""
    errors = []
    if images.ndim != 3:
        errors.append(f"images must be (count, H, W), got shape {images.shape}")
    if not np.all(np.abs(images) == 1.0):
        errors.append("image entries must be exactly -1 or +1")
    if labels.shape[0] != images.shape[0]:
        errors.append(f"{labels.shape[0]} labels for {images.shape[0]} images")
    if labels.size and (labels.min() < 0 or labels.max() > 9):
        errors.append("labels must lie in [0, 9]")
    return errors


def parse_config_lines(text: str) -> Dict[str, Any]:
    """Flat key=value lines; '#' starts a comment and blank lines are skipped.

    Raises ValueError naming the first malformed line.
    """
    values: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {number}: expected key=value, got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"config line {number}: empty key")
        values[key.replace("-", "_")] = value
    return values
