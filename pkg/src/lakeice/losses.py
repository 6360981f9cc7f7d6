"""Training objectives.

Segmentation uses cross entropy over supervised pixels. The water-fraction
regressor is trained on

    L_reg = L_mse + beta * L_line + gamma * L_idc

where L_line measures how far the predictions of a mini-batch of adjacent
dates stray from the line through the first prediction with slope
(last - first) / b, and L_idc is the variance among predictions that share
a calendar day.

All functions take torch tensors (array-likes are converted to float64)
and return 0-d tensors, so they can be used for training and checked
against plain-Python oracles alike.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.25
    gamma: float = 0.08

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")


def _t(x):
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def masked_cross_entropy(probs, labels, mask, eps=0.0):
    """Mean negative log-likelihood of ``labels`` over pixels where ``mask`` is set.

    ``probs`` has the class axis third from the end: (3, H, W) or (N, 3, H, W).
    """
    probs = _t(probs)
    labels = torch.as_tensor(labels).long()
    mask = torch.as_tensor(mask).bool()
    if not mask.any():
        raise ValueError("no supervised pixels")
    safe = torch.where(mask, labels, torch.zeros_like(labels)).clamp(min=0)
    p = torch.gather(probs, -3, safe.unsqueeze(-3)).squeeze(-3)
    nll = -torch.log(p + eps)
    return nll[mask].mean()


def masked_cross_entropy_logits(logits, labels, mask):
    """Same as :func:`masked_cross_entropy` but from logits, via log-softmax."""
    labels = torch.as_tensor(labels).long()
    mask = torch.as_tensor(mask).bool()
    if not mask.any():
        raise ValueError("no supervised pixels")
    logp = F.log_softmax(logits, dim=-3)
    safe = torch.where(mask, labels, torch.zeros_like(labels)).clamp(min=0)
    nll = -torch.gather(logp, -3, safe.unsqueeze(-3)).squeeze(-3)
    return nll[mask].mean()


def mse_loss(predictions, targets):
    predictions, targets = _t(predictions), _t(targets)
    if predictions.numel() == 0:
        raise ValueError("empty input")
    if predictions.shape != targets.shape:
        raise ValueError("predictions and targets differ in length")
    return ((predictions - targets) ** 2).mean()


def line_fit(predictions):
    """Slope and intercept of the reference line: m = (y_last - y_first) / b, c = y_first."""
    y = _t(predictions)
    b = y.shape[0]
    return (y[-1] - y[0]) / b, y[0]


def line_deviations(predictions):
    y = _t(predictions)
    if y.ndim != 1 or y.shape[0] < 2:
        raise ValueError("line loss needs a batch of at least 2 predictions")
    m, c = line_fit(y)
    i = torch.arange(y.shape[0], dtype=y.dtype)
    return torch.abs(m * i + c - y) / torch.sqrt(m * m + 1)


def line_loss(predictions):
    """Mean distance of date-ordered predictions from the batch reference line."""
    return line_deviations(predictions).mean()


def intra_day_coherence_loss(predictions, day_ids):
    """Population variance within each day that has >= 2 predictions, averaged over those days."""
    y = _t(predictions)
    days = torch.as_tensor(day_ids)
    if days.shape[0] != y.shape[0]:
        raise ValueError("one day id per prediction required")
    uniq, inverse, counts = torch.unique(days, return_inverse=True, return_counts=True)
    dup = counts >= 2
    if not dup.any():
        return y.sum() * 0.0
    n = counts.to(y.dtype)
    sums = torch.zeros(uniq.shape[0], dtype=y.dtype).index_add(0, inverse, y)
    means = sums / n
    sq = torch.zeros(uniq.shape[0], dtype=y.dtype).index_add(0, inverse, (y - means[inverse]) ** 2)
    var = sq / n
    return var[dup].mean()


def regression_loss(predictions, targets, day_ids, weights: LossWeights = LossWeights()):
    """L_mse + beta * L_line + gamma * L_idc."""
    return (mse_loss(predictions, targets)
            + weights.beta * line_loss(predictions)
            + weights.gamma * intra_day_coherence_loss(predictions, day_ids))


@dataclass
class RegressionBatch:
    """Date-ordered predictions of one mini-batch with their targets and day grouping."""

    predictions: torch.Tensor
    targets: torch.Tensor
    day_ids: torch.Tensor

    def __post_init__(self):
        self.predictions = _t(self.predictions)
        self.targets = _t(self.targets)
        self.day_ids = torch.as_tensor(self.day_ids)
        if not (self.predictions.shape[0] == self.targets.shape[0] == self.day_ids.shape[0]):
            raise ValueError("batch fields differ in length")
        if (self.day_ids[1:] < self.day_ids[:-1]).any():
            raise ValueError("batch entries must be sorted by date")

    @property
    def size(self):
        return self.predictions.shape[0]

    def loss(self, weights: LossWeights = LossWeights()):
        return regression_loss(self.predictions, self.targets, self.day_ids, weights)
