"""Segmentation quality metric."""

import numpy as np

from ..errors import ShapeError


def miou(pred: np.ndarray, label: np.ndarray, num_classes: int) -> float:
    """Mean IoU over the classes present in pred or label.

    Classes absent from both maps do not dilute the mean.
    """
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ShapeError(f"pred {pred.shape} vs label {label.shape}")
    if pred.max(initial=0) >= num_classes or label.max(initial=0) >= num_classes:
        raise ShapeError(f"class id >= num_classes ({num_classes})")
    index = num_classes * label.astype(np.int64) + pred.astype(np.int64)
    confusion = np.bincount(index.reshape(-1), minlength=num_classes ** 2)
    confusion = confusion.reshape(num_classes, num_classes)
    intersection = np.diag(confusion)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - intersection
    present = union > 0
    return float(np.mean(intersection[present] / union[present]))
