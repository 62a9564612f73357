"""Train-test consistent temporal action localization on snippet features.

A scoring network predicts per-snippet action scores together with a
per-snippet threshold; the same score-above-threshold gate drives both
the training objective and segment extraction at inference.  Supports
weak (video labels only), semi (k annotated videos per class), and full
supervision.
"""

__version__ = "1.0.0"

__all__ = [
    "data",
    "errors",
    "evaluator",
    "gradcheck",
    "localizer",
    "network",
    "objectives",
    "synth",
    "trainer",
]
