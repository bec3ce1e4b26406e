"""Ranking metric for the binary task."""

from __future__ import annotations

import numpy as np


class MetricError(Exception):
    """Metric undefined for the given inputs."""


def auroc(labels, scores) -> float:
    """Probability that a random positive outranks a random negative.

    Ties are credited 0.5, computed via the rank statistic in O(n log n):
    assign average ranks to tied scores, then
    AUROC = (sum of positive ranks - n_pos*(n_pos+1)/2) / (n_pos * n_neg).

    Raises:
        MetricError: fewer than one positive or one negative label.
    """
    y = np.asarray(labels, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise MetricError("labels and scores must be equal-length 1-D arrays")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise MetricError("labels must be 0/1")
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC undefined: one class is absent")

    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_scores = s[order]
    # average ranks within each tie group
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [s.size]))
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + 1 + b)

    rank_sum = float(ranks[y == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)
