"""Functional grasp classification by nearest-label voting.

Every contact point looks up the affordance labels of its N nearest object
points; each finger takes the mode of its pooled labels, and the grasp label
is the weighted plurality over fingers. All ties go to the lexicographically
smallest label.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .grasp import GraspCandidate
from .robot import FINGER_NAMES
from .semantic_maps import ObjectAsset


def _default_weights() -> dict[str, float]:
    return {name: (2.0 if name == "thumb" else 1.0) for name in FINGER_NAMES}


@dataclass(frozen=True)
class VotingConfig:
    n_neighbors: int = 5
    weights: dict[str, float] = field(default_factory=_default_weights)
    include_palm: bool = False

    def __post_init__(self):
        if self.n_neighbors < 1:
            raise ValueError("n_neighbors must be >= 1")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("finger weights must be non-negative")
        if not any(w > 0 for w in self.weights.values()):
            raise ValueError("at least one finger weight must be positive")

    def check_fingers(self, names) -> None:
        missing = set(names) - set(self.weights)
        if missing:
            raise ValueError(f"no voting weight for fingers {sorted(missing)}")


@dataclass(frozen=True)
class GraspClassification:
    label: str
    finger_labels: dict[str, str]
    finger_histograms: dict[str, dict[str, int]]
    neighbor_labels: tuple[tuple[str, tuple[str, ...]], ...]
    scores: dict[str, float]


def contact_neighbor_labels(point, asset: ObjectAsset, n: int) -> tuple[str, ...]:
    if n > len(asset):
        raise ValueError(f"N={n} exceeds the {len(asset)} object points")
    hits = asset.index().query(point, n)
    return tuple(asset.labels[i] for i, _ in hits)


def mode_label(labels) -> str | None:
    """Most frequent label; ties resolve to the lexicographically smallest."""
    counts = Counter(labels)
    if not counts:
        return None
    top = max(counts.values())
    return min(lab for lab, c in counts.items() if c == top)


def finger_vote(points, asset: ObjectAsset, n: int) -> str | None:
    """Mode of the pooled neighbour labels of one finger's contacts; None if no contacts."""
    pooled: list[str] = []
    for p in np.asarray(points, dtype=float).reshape(-1, 3):
        pooled.extend(contact_neighbor_labels(p, asset, n))
    return mode_label(pooled)


def weighted_vote(finger_labels: dict[str, str | None], weights: dict[str, float]) -> tuple[str, dict[str, float]]:
    scores: dict[str, float] = {}
    for finger, label in finger_labels.items():
        if label is None:
            continue
        scores[label] = scores.get(label, 0.0) + float(weights.get(finger, 0.0))
    participating = sum(weights.get(f, 0.0) for f, lab in finger_labels.items() if lab is not None)
    if participating <= 0:
        raise ValueError("no voting fingers")
    top = max(scores.values())
    return min(lab for lab, s in scores.items() if s == top), scores


def classify_contacts(points, hand_labels, asset: ObjectAsset, config: VotingConfig,
                      fingers=FINGER_NAMES) -> GraspClassification:
    """Classify a set of contacts given their object-frame positions and hand-part labels."""
    config.check_fingers(fingers)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    voters = list(fingers) + (["palm"] if config.include_palm else [])
    weights = dict(config.weights)
    weights.setdefault("palm", 0.0)
    pooled: dict[str, list[str]] = {f: [] for f in voters}
    neighbors = []
    for p, part in zip(pts, hand_labels):
        if part not in pooled:
            continue
        labs = contact_neighbor_labels(p, asset, config.n_neighbors)
        pooled[part].extend(labs)
        neighbors.append((part, labs))
    finger_labels = {f: mode_label(pooled[f]) for f in voters}
    label, scores = weighted_vote(finger_labels, weights)
    return GraspClassification(
        label=label,
        finger_labels={f: lab for f, lab in finger_labels.items() if lab is not None},
        finger_histograms={f: dict(sorted(Counter(pooled[f]).items())) for f in voters if pooled[f]},
        neighbor_labels=tuple(neighbors),
        scores=scores,
    )


def classify_grasp(candidate: GraspCandidate, asset: ObjectAsset,
                   config: VotingConfig | None = None) -> GraspClassification:
    """Classify a candidate and record the result as its grasp type."""
    config = config or VotingConfig()
    result = classify_contacts(candidate.contact_points, candidate.contact_labels, asset, config)
    candidate.grasp_type = result.label
    return result


def format_classification(cid, result: GraspClassification) -> str:
    """``<id> <label> finger=<label:count,...>`` with counts of fingers voting each label."""
    counts = Counter(result.finger_labels.values())
    body = ",".join(f"{lab}:{counts[lab]}" for lab in sorted(counts))
    return f"{cid} {result.label} finger={body}"
