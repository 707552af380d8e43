"""Group-fairness metrics for regression outputs.

All metrics take a vector of values plus a parallel binary group vector
(1 = protected group), in the style of ``sklearn.metrics``. Mean difference
of model predictions additionally comes with gradient support so it can sit
inside a training objective.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import network as net
from .validation import check_grouped


def mean_difference(values, groups) -> float:
    """Absolute gap between the protected and unprotected group means.

    Zero means the values carry no first-moment dependency on the group.
    """
    values, groups = check_grouped(values, groups)
    return float(abs(values[groups].mean() - values[~groups].mean()))


def auc(values, groups) -> float:
    """Probability that a random protected value exceeds a random
    unprotected one, counting ties as 0.5. 0.5 = group-independent."""
    values, groups = check_grouped(values, groups)
    pos, neg = values[groups], values[~groups]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def impact_ratio(values, groups) -> float:
    """Protected-group mean over unprotected-group mean.

    Only meaningful on a scale where the unprotected mean is positive
    (e.g. de-standardized targets); otherwise raises.
    """
    values, groups = check_grouped(values, groups)
    denom = values[~groups].mean()
    if denom <= 0.0:
        raise ValueError(
            f"impact ratio undefined: unprotected-group mean is {denom}, must be > 0"
        )
    return float(values[groups].mean() / denom)


def eighty_percent_flag(ir: float, threshold: float = 0.8, two_sided: bool = True) -> bool:
    """True when the impact ratio marks the outcome as discriminatory.

    Two-sided by default: a disadvantage of either group flags.
    """
    if ir <= 0.0:
        raise ValueError(f"impact ratio must be > 0, got {ir}")
    worst = min(ir, 1.0 / ir) if two_sided else ir
    return bool(worst < threshold)


def parity_ir(values, groups) -> float:
    """min(ir, 1/ir): the two-sided impact ratio in (0, 1], 1 = parity."""
    ir = impact_ratio(values, groups)
    return float(min(ir, 1.0 / ir))


# ---------------------------------------------------------------------------
# prediction mean difference (differentiable)


def group_masks(s) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(s).ravel().astype(bool)
    return s, ~s


def md_from_predictions_graph(pred: ad.Node, s) -> ad.Node:
    """Mean-difference node over a (batch, 1) predictions node.

    Uses the sign of the gap as the subgradient of the absolute value, so
    the derivative is 0 exactly at parity.
    """
    pos, negm = group_masks(s)
    n_pos, n_neg = int(pos.sum()), int(negm.sum())
    if n_pos == 0:
        raise ValueError("protected group is empty")
    if n_neg == 0:
        raise ValueError("unprotected group is empty")
    mask_pos = ad.constant(pos.astype(np.float64).reshape(-1, 1))
    mask_neg = ad.constant(negm.astype(np.float64).reshape(-1, 1))
    mean_pos = ad.scale(ad.sum_all(ad.mul(pred, mask_pos)), 1.0 / n_pos)
    mean_neg = ad.scale(ad.sum_all(ad.mul(pred, mask_neg)), 1.0 / n_neg)
    return ad.absolute(ad.sub(mean_pos, mean_neg))


def prediction_md(params: net.MLPParams, X, s) -> float:
    """Mean difference of the network's predictions grouped by ``s``."""
    return mean_difference(net.predict(params, X), np.asarray(s).ravel())


def prediction_md_objective(X, s) -> net.Objective:
    """Objective returning the prediction mean difference (for gradients)."""
    X = np.asarray(X, dtype=np.float64)
    s = np.asarray(s).ravel()
    return lambda pn: md_from_predictions_graph(net.forward_graph(pn, X), s)
