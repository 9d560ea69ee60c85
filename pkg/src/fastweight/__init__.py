"""Desk-scale fast-weight language modeling.

A language-model head whose parameters are updated on the fly by per-token
gradients, computed in parallel through exact causal linear attention, trained
with second-order gradients, plus a dynamic-evaluation baseline and the
harness to compare them.
"""

from . import (
    backbone,
    checkpoint,
    corpus,
    harness,
    head,
    linear_attention,
    numerics,
    oracle,
    training,
)

__all__ = [
    "backbone",
    "checkpoint",
    "corpus",
    "harness",
    "head",
    "linear_attention",
    "numerics",
    "oracle",
    "training",
]
