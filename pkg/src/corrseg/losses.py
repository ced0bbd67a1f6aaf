"""Training objectives: soft dice over foreground classes plus a
mean-absolute-error reconstruction term."""

from __future__ import annotations

from . import autograd as ag
from .autograd import Tensor
from .errors import PreconditionError

DICE_EPS = 1e-5
FOREGROUND_CLASSES = (1, 2, 3)


def dice_loss(pred: Tensor, gt: Tensor, eps: float = DICE_EPS) -> Tensor:
    """1 - 2*(sum(p*g)+eps)/(sum(p+g)+eps) over foreground channels.

    ``pred`` holds channel-softmax probabilities, ``gt`` a one-hot
    encoding of the same [1,C,D,H,W] shape; sums run jointly over the
    foreground classes and all voxels.
    """
    if pred.shape != gt.shape:
        raise PreconditionError(
            f"prediction shape {pred.shape} != ground truth {gt.shape}")
    lo, n = FOREGROUND_CLASSES[0], len(FOREGROUND_CLASSES)
    p = ag.narrow(pred, 1, lo, n)
    g = ag.narrow(gt, 1, lo, n)
    inter = ag.sum_all(ag.mul(p, g))
    total = ag.sum_all(p) + ag.sum_all(g)
    return 1.0 - 2.0 * ((inter + eps) / (total + eps))


def reconstruction_loss(recons: list[Tensor], inputs: list[Tensor]) -> Tensor:
    """Sum over modalities of the mean absolute reconstruction error."""
    if len(recons) != len(inputs):
        raise PreconditionError(
            f"{len(recons)} reconstructions vs {len(inputs)} inputs")
    total = None
    for r, x in zip(recons, inputs):
        if r.shape != x.shape:
            raise PreconditionError(
                f"reconstruction shape {r.shape} != input {x.shape}")
        term = ag.mean_all(ag.absolute(ag.sub(r, x)))
        total = term if total is None else total + term
    if total is None:
        raise PreconditionError("no modalities to reconstruct")
    return total


def total_loss(dice: Tensor, rec: Tensor | None, lam: float) -> Tensor:
    """Weighted sum of the segmentation and reconstruction terms."""
    if lam < 0:
        raise PreconditionError(f"lambda must be >= 0, got {lam}")
    if rec is None:
        return dice
    return dice + lam * rec
