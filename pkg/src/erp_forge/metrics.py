"""AUC, balanced accuracy and the paired t-test."""

from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from erp_forge.errors import MissingClass, ZeroVariance


def _split(labels):
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise MissingClass("both classes must be present")
    return y


def roc_auc(scores, labels):
    """Mann-Whitney AUC with midranks for ties.

    Computed in integers as ``(2*#{pos > neg} + #{ties}) / (2 * n_pos * n_neg)``
    so the result is bit-identical to explicit pair counting.
    """
    y = _split(labels)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    n = len(s)
    # tie groups: positions [first, last] (1-based); twice the midrank = first + last
    bounds = np.flatnonzero(np.diff(ss)) + 1
    starts = np.r_[0, bounds]
    ends = np.r_[bounds, n]
    twice_rank = np.repeat(starts + ends + 1, ends - starts)
    twice_rank_of = np.empty(n, dtype=np.int64)
    twice_rank_of[order] = twice_rank
    n_pos = int(y.sum())
    n_neg = n - n_pos
    twice_u = int(twice_rank_of[y].sum()) - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def balanced_accuracy(predictions, labels):
    y = _split(labels)
    p = np.asarray(predictions).astype(bool)
    tpr = np.sum(p & y) / np.sum(y)
    tnr = np.sum(~p & ~y) / np.sum(~y)
    return float(0.5 * (tpr + tnr))


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    alternative: str = "two-sided"


def paired_ttest(a, b, alternative="two-sided"):
    """Paired Student t-test on ``a - b``.

    ``alternative='greater'`` tests mean(a - b) > 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("paired_ttest needs two equal-length sequences of length >= 2")
    d = a - b
    n = len(d)
    sd = d.std(ddof=1)
    if sd == 0:
        raise ZeroVariance("all paired differences are equal")
    t = d.mean() / (sd / np.sqrt(n))
    df = n - 1
    p_two = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    if alternative == "two-sided":
        p = p_two
    elif alternative == "greater":
        p = p_two / 2 if t > 0 else 1 - p_two / 2
    elif alternative == "less":
        p = p_two / 2 if t < 0 else 1 - p_two / 2
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    return TTestResult(float(t), df, p, alternative)
