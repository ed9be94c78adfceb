"""Kernel selection: compiled Levenshtein when built, pure Python otherwise.

Set ``MWDS_PURE_PYTHON=1`` to force the fallback.
"""

import os

if os.environ.get("MWDS_PURE_PYTHON") == "1":
    from mwds._levenshtein_py import edit_distance_ids, edit_distances_ids

    BACKEND = "python"
else:
    try:
        from mwds._levenshtein import edit_distance_ids, edit_distances_ids

        BACKEND = "cython"
    except ImportError:
        from mwds._levenshtein_py import edit_distance_ids, edit_distances_ids

        BACKEND = "python"

__all__ = ["BACKEND", "edit_distance_ids", "edit_distances_ids"]
