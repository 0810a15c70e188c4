"""Classification accuracy and part-segmentation IoU."""

from fractions import Fraction

import numpy as np

from .errors import ConfigError, EmptySetError, LabelError


def classification_metrics(pred, labels):
    """``(overall, average per-class)`` accuracy.

    The per-class average is the unweighted mean of recalls over the
    classes that occur in ``labels``.
    """
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptySetError("no labelled examples")
    if pred.shape != labels.shape:
        raise ConfigError(f"{pred.size} predictions for {labels.size} labels")
    correct = pred == labels
    overall = float(correct.mean())
    recalls = [float(correct[labels == c].mean()) for c in np.unique(labels)]
    return overall, float(np.mean(recalls))


def per_class_accuracy(pred, labels):
    pred, labels = np.asarray(pred), np.asarray(labels)
    return {int(c): float((pred[labels == c] == c).mean()) for c in np.unique(labels)}


def part_miou(pred, gt, parts):
    """Mean over ``parts`` of per-part IoU for one shape.

    A part absent from both prediction and ground truth scores 1.  The mean
    is summed exactly and rounded once, so it is the float nearest the
    true rational value.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    parts = sorted(int(p) for p in parts)
    if not parts:
        raise ConfigError("empty part set")
    if pred.shape != gt.shape:
        raise ConfigError("prediction and ground truth lengths differ")
    allowed = np.array(parts)
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        bad = ~np.isin(arr, allowed)
        if bad.any():
            raise LabelError(f"{name} label {int(arr[bad][0])} outside part set {parts}")
    total = Fraction(0)
    for p in parts:
        in_pred, in_gt = pred == p, gt == p
        union = int(np.count_nonzero(in_pred | in_gt))
        inter = int(np.count_nonzero(in_pred & in_gt))
        total += 1 if union == 0 else Fraction(inter, union)
    return float(total / len(parts))


def dataset_miou(preds, gts, categories, part_sets):
    """Per-category mIoU plus both dataset-level means.

    ``instance_miou`` averages over every shape; ``class_miou`` averages the
    per-category means.  Returns ``(per_category, instance_miou, class_miou)``.
    """
    if not len(preds):
        raise EmptySetError("no shapes to evaluate")
    scores = {}
    for pred, gt, cat in zip(preds, gts, categories):
        scores.setdefault(int(cat), []).append(part_miou(pred, gt, part_sets[int(cat)]))
    per_category = {c: float(np.mean(v)) for c, v in sorted(scores.items())}
    instance = float(np.mean([s for v in scores.values() for s in v]))
    return per_category, instance, float(np.mean(list(per_category.values())))
