"""
Identity-Embedded Guidance
==========================

Pose detections come unordered and unlabeled; instance boxes carry persistent
identities. Each detected pose is paired with a box by the share of its
confident keypoints the box encloses, then drawn as a skeleton in its
identity's color. Reordering the identity colors of a target guidance swaps
character positions at inference time.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import cv2
import numpy as np

from id_match.errors import DomainError

__all__ = [
    "NUM_KEYPOINTS",
    "COCO_LIMBS",
    "PALETTE",
    "Person",
    "IdentityBox",
    "PoseFrame",
    "GuidanceConfig",
    "Match",
    "Assignment",
    "TemporalReport",
    "enclosure_ratio",
    "assign_identities",
    "render_ieg",
    "reorder_identities",
    "temporal_consistency_report",
    "box_from_keypoints",
]

logger = logging.getLogger(__name__)

NUM_KEYPOINTS = 17

# COCO keypoint order: nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles
COCO_LIMBS = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11),
    (6, 12), (5, 6), (5, 7), (6, 8), (7, 9), (8, 10),
    (0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6),
)

PALETTE = (
    (255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0),
    (255, 0, 255), (0, 255, 255), (255, 128, 0), (128, 0, 255),
)


@dataclass(eq=False)
class Person:
    """17 COCO keypoints as rows (x, y, confidence), pixels."""

    keypoints: np.ndarray

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64)
        if kp.shape != (NUM_KEYPOINTS, 3):
            raise DomainError(f"a person needs {NUM_KEYPOINTS} keypoints of (x, y, c), got shape {kp.shape}")
        if not np.isfinite(kp[:, :2]).all():
            raise DomainError("keypoint coordinates must be finite")
        self.keypoints = kp

    def confident(self, min_confidence):
        return self.keypoints[:, 2] >= min_confidence

    def mean_position(self, min_confidence):
        ok = self.confident(min_confidence)
        if not ok.any():
            return None
        return self.keypoints[ok, :2].mean(axis=0)


@dataclass
class IdentityBox:
    identity: int
    x0: float
    y0: float
    x1: float
    y1: float
    frame: int = 0

    def __post_init__(self):
        if self.identity < 0:
            raise DomainError(f"box identity must be non-negative, got {self.identity}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise DomainError(f"box {self.identity} is not ordered: ({self.x0}, {self.y0}, {self.x1}, {self.y1})")

    def contains(self, xy):
        x, y = xy[..., 0], xy[..., 1]
        return (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)


@dataclass(eq=False)
class PoseFrame:
    index: int
    persons: List[Person] = field(default_factory=list)
    boxes: List[IdentityBox] = field(default_factory=list)

    def __post_init__(self):
        ids = [box.identity for box in self.boxes]
        if len(ids) != len(set(ids)):
            raise DomainError(f"frame {self.index}: duplicate box identities {sorted(ids)}")


@dataclass
class GuidanceConfig:
    tau: float = 0.6
    min_confidence: float = 0.3
    palette: Tuple[Tuple[int, int, int], ...] = PALETTE
    # temporal report: a jump wider than this fraction of the frame width is a switch
    jump_fraction: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise DomainError(f"tau must lie in (0, 1], got {self.tau}")
        if not self.palette:
            raise DomainError("palette is empty")


@dataclass(frozen=True)
class Match:
    person: int
    identity: int
    ratio: float


@dataclass
class Assignment:
    matches: List[Match] = field(default_factory=list)
    unmatched_persons: List[int] = field(default_factory=list)
    unmatched_boxes: List[int] = field(default_factory=list)

    def identity_of(self, person):
        for match in self.matches:
            if match.person == person:
                return match.identity
        return None

    def person_of(self, identity):
        for match in self.matches:
            if match.identity == identity:
                return match.person
        return None

    @property
    def identities(self):
        return sorted(match.identity for match in self.matches)


@dataclass
class TemporalReport:
    switches_by_identity: Dict[int, int]
    switches_by_frame: Dict[int, int]
    transitions: int

    @property
    def total_switches(self):
        return sum(self.switches_by_identity.values())

    @property
    def switch_rate(self):
        if self.transitions == 0:
            return 0.0
        return self.total_switches / self.transitions


def enclosure_ratio(person, box, min_confidence=0.3):
    """Share of the person's confident keypoints inside the box, boundary included."""
    ok = person.confident(min_confidence)
    qualifying = int(ok.sum())
    if qualifying == 0:
        raise DomainError("no confident keypoints")
    inside = box.contains(person.keypoints[ok, :2])
    return int(inside.sum()) / qualifying


def assign_identities(persons, boxes, config=None):
    """
    Greedy one-to-one pose/box pairing in descending ratio order, ties to the
    smaller identity then the smaller person index; pairs below tau are refused.
    """
    config = config or GuidanceConfig()
    candidates = []
    for p, person in enumerate(persons):
        if not person.confident(config.min_confidence).any():
            logger.debug("person %d has no confident keypoints, left unmatched", p)
            continue
        for box in boxes:
            ratio = enclosure_ratio(person, box, config.min_confidence)
            if ratio >= config.tau:
                candidates.append((ratio, box.identity, p))
    candidates.sort(key=lambda item: (-item[0], item[1], item[2]))

    matches, used_persons, used_ids = [], set(), set()
    for ratio, identity, p in candidates:
        if p in used_persons or identity in used_ids:
            continue
        matches.append(Match(person=p, identity=identity, ratio=ratio))
        used_persons.add(p)
        used_ids.add(identity)
    matches.sort(key=lambda match: match.person)
    return Assignment(
        matches=matches,
        unmatched_persons=[p for p in range(len(persons)) if p not in used_persons],
        unmatched_boxes=sorted(box.identity for box in boxes if box.identity not in used_ids),
    )


def render_ieg(frame, assignment, config=None, height=256, width=256):
    """
    Color-coded skeleton raster, (height, width, 3) uint8 RGB on black.

    Limbs are 1-pixel 8-connected lines and joints are filled discs of radius 2,
    in palette[identity mod len(palette)]. Persons are drawn in ascending
    identity order, so later identities overwrite earlier pixels.
    """
    config = config or GuidanceConfig()
    if height < 8 or width < 8:
        raise DomainError(f"raster must be at least 8x8, got {height}x{width}")
    raster = np.zeros((height, width, 3), dtype=np.uint8)
    for match in sorted(assignment.matches, key=lambda match: match.identity):
        person = frame.persons[match.person]
        color = tuple(int(v) for v in config.palette[match.identity % len(config.palette)])
        ok = person.confident(config.min_confidence)
        points = [(int(x), int(y)) for x, y in np.rint(person.keypoints[:, :2])]
        for a, b in COCO_LIMBS:
            if ok[a] and ok[b]:
                cv2.line(raster, points[a], points[b], color, thickness=1, lineType=cv2.LINE_8)
        for k in np.flatnonzero(ok):
            cv2.circle(raster, points[k], 2, color, thickness=-1, lineType=cv2.LINE_8)
    return raster


def reorder_identities(assignment, permutation):
    """Replace each matched identity by its image under ``permutation`` (a bijection)."""
    permutation = dict(permutation)
    if set(permutation.values()) != set(permutation.keys()):
        raise DomainError(f"identity permutation {permutation} is not a bijection")
    missing = [ident for ident in assignment.identities if ident not in permutation]
    if missing:
        raise DomainError(f"identity permutation does not cover assigned identities {missing}")
    matches = [Match(person=match.person, identity=permutation[match.identity], ratio=match.ratio)
               for match in assignment.matches]
    unmatched_boxes = sorted(permutation.get(ident, ident) for ident in assignment.unmatched_boxes)
    return Assignment(matches=matches, unmatched_persons=list(assignment.unmatched_persons),
                      unmatched_boxes=unmatched_boxes)


def temporal_consistency_report(frames, assignments, width, config=None):
    """
    Count identity switches: frames where an identity's mean keypoint position
    moves more than ``config.jump_fraction * width`` since the previous frame.
    """
    config = config or GuidanceConfig()
    if len(frames) < 2:
        raise DomainError("temporal consistency needs at least two frames")
    if len(frames) != len(assignments):
        raise DomainError(f"{len(frames)} frames but {len(assignments)} assignments")
    limit = config.jump_fraction * width

    switches_by_identity = defaultdict(int)
    switches_by_frame = defaultdict(int)
    transitions = 0
    previous = {}
    for frame, assignment in zip(frames, assignments):
        current = {}
        for match in assignment.matches:
            position = frame.persons[match.person].mean_position(config.min_confidence)
            if position is not None:
                current[match.identity] = position
        for identity, position in current.items():
            if identity not in previous:
                continue
            transitions += 1
            if float(np.linalg.norm(position - previous[identity])) > limit:
                switches_by_identity[identity] += 1
                switches_by_frame[frame.index] += 1
        for identity in current:
            switches_by_identity.setdefault(identity, 0)
        previous = current
    report = TemporalReport(dict(switches_by_identity), dict(switches_by_frame), transitions)
    if report.total_switches:
        logger.warning("%d identity switches over %d transitions", report.total_switches, transitions)
    return report


def box_from_keypoints(person, identity, margin=4.0, frame=0, min_confidence=0.3):
    """Tight box around the confident keypoints, padded by ``margin`` pixels."""
    ok = person.confident(min_confidence)
    if not ok.any():
        raise DomainError("no confident keypoints")
    xy = person.keypoints[ok, :2]
    x0, y0 = xy.min(axis=0) - margin
    x1, y1 = xy.max(axis=0) + margin
    return IdentityBox(identity, float(x0), float(y0), float(x1), float(y1), frame=frame)
