# SPDX-License-Identifier: Apache-2.0
"""Python access to the canet C++ core."""

from ._core import (  # noqa: F401
    CanetError,
    desk_routes,
    flops_of_route,
    generate_synthetic,
    guide_targets,
    ndcg_at_n,
    rank_target,
    recall_at_n,
    sample_routes,
    train_and_evaluate,
    uniform_loss,
)

__all__ = [
    "CanetError",
    "desk_routes",
    "flops_of_route",
    "generate_synthetic",
    "guide_targets",
    "ndcg_at_n",
    "rank_target",
    "recall_at_n",
    "sample_routes",
    "train_and_evaluate",
    "uniform_loss",
]
