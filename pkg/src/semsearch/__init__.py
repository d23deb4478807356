"""Semantic mechanical search on shelves: affinity scoring, occupancy
distributions and greedy search policies over a first-order cuboid simulator."""

from semsearch.geometry import (
    ObjectSpec,
    PlacedObject,
    Scene,
    ShelfSpec,
    VisibilityReport,
    footprints_collide,
    observe,
    visibility_fraction,
)
from semsearch.affinity import AffinityMatrix, ground_truth_matrix, jsd_score

__version__ = "0.1.0"

__all__ = [
    "AffinityMatrix",
    "ObjectSpec",
    "PlacedObject",
    "Scene",
    "ShelfSpec",
    "VisibilityReport",
    "footprints_collide",
    "ground_truth_matrix",
    "jsd_score",
    "observe",
    "visibility_fraction",
]
