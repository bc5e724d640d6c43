"""Desk-scale task-oriented dialog toolkit.

Joint retrieval + generation dialog models trained on small synthetic or
MultiWOZ-format corpora, with an exact-arithmetic float64 autodiff core so
every objective is gradient-checkable.
"""

__version__ = "0.1.0"
