"""Pure-Python Levenshtein kernels; same contract as the compiled module."""

import numpy as np


def edit_distance_ids(a, b):
    a = [int(x) for x in a]
    b = [int(x) for x in b]
    if not a:
        return len(b)
    if not b:
        return len(a)
    row = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        diag, row[0] = row[0], i
        for j, y in enumerate(b, 1):
            sub = diag + (x != y)
            diag = row[j]
            row[j] = min(row[j] + 1, row[j - 1] + 1, sub)
    return row[-1]


def edit_distances_ids(ref, hyps):
    return np.array([edit_distance_ids(ref, h) for h in hyps], dtype=np.int64)
