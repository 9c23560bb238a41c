"""
Pre-Classified Sampling
=======================

Reference/target frame pairs whose left-to-right character order differs
(position swaps) are rare in multi-character footage. Pairs are classified once
by comparing order signatures; training then draws a swap pair with
probability rho and a uniformly random pair (swap pairs included) otherwise.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch

from id_match.errors import DomainError

__all__ = [
    "CharacterPositions",
    "SamplerConfig",
    "PairPolicy",
    "PairIndex",
    "order_signature",
    "classify_pairs",
    "sample_pair",
    "PreClassifiedSampler",
    "sampling_stats",
    "positions_from_masks",
]

logger = logging.getLogger(__name__)


@dataclass
class CharacterPositions:
    """Per-frame (identity, centroid x normalised by frame width) entries."""

    frame: int
    entries: List[Tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        self.entries = [(int(ident), float(cx)) for ident, cx in self.entries]
        ids = [ident for ident, _ in self.entries]
        if len(ids) != len(set(ids)):
            raise DomainError(f"frame {self.frame}: duplicate identities {sorted(ids)}")
        if not all(math.isfinite(cx) for _, cx in self.entries):
            raise DomainError(f"frame {self.frame}: centroid is not finite")

    @property
    def identities(self):
        return frozenset(ident for ident, _ in self.entries)


@dataclass
class SamplerConfig:
    rho: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise DomainError(f"rho must lie in [0, 1], got {self.rho}")


@dataclass
class PairPolicy:
    """Candidate pairs: same clip, frame distance in [min_gap, max_gap]; both orders when ``ordered``."""

    min_gap: int = 1
    max_gap: Optional[int] = None
    ordered: bool = True


@dataclass
class PairIndex:
    swap_pairs: List[Tuple[int, int]] = field(default_factory=list)
    all_pairs: List[Tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        pool = set(self.all_pairs)
        stray = [pair for pair in self.swap_pairs if pair not in pool]
        if stray:
            raise DomainError(f"swap pairs {stray[:3]} are not among all pairs")

    @property
    def swap_share(self):
        if not self.all_pairs:
            return 0.0
        return len(self.swap_pairs) / len(self.all_pairs)

    def is_swap(self, pair):
        return pair in set(self.swap_pairs)


def order_signature(p):
    """Identities sorted by ascending centroid x, ties to the smaller identity."""
    if not p.entries:
        raise DomainError(f"frame {p.frame} has no characters")
    return [ident for ident, _ in sorted(p.entries, key=lambda entry: (entry[1], entry[0]))]


def classify_pairs(positions, policy=None):
    """
    Enumerate candidate pairs of one clip and mark those whose order signatures
    differ. Frames whose identity sets differ are never paired.
    """
    policy = policy or PairPolicy()
    positions = list(positions)
    signatures = [order_signature(p) if p.entries else None for p in positions]
    swap_pairs, all_pairs = [], []
    for x, a in enumerate(positions):
        for y in range(x + 1, len(positions)):
            b = positions[y]
            if signatures[x] is None or signatures[y] is None or a.identities != b.identities:
                continue
            gap = abs(a.frame - b.frame)
            if gap < policy.min_gap or (policy.max_gap is not None and gap > policy.max_gap):
                continue
            swapped = signatures[x] != signatures[y]
            pairs = [(a.frame, b.frame), (b.frame, a.frame)] if policy.ordered else [(a.frame, b.frame)]
            all_pairs.extend(pairs)
            if swapped:
                swap_pairs.extend(pairs)
    if not all_pairs:
        logger.warning("fewer than two frames share an identity set; pair index is empty")
    return PairIndex(swap_pairs=swap_pairs, all_pairs=all_pairs)


def sample_pair(index, config, generator):
    """
    One draw: with probability rho from swap_pairs, otherwise from all_pairs.
    Falls back to all_pairs when there are no swap pairs. Every draw consumes
    one uniform and one integer from ``generator``.
    """
    if not index.all_pairs:
        raise DomainError("cannot sample from an empty pair index")
    u = torch.rand((), generator=generator).item()
    pool = index.all_pairs
    if u < config.rho:
        if index.swap_pairs:
            pool = index.swap_pairs
        else:
            logger.debug("no swap pairs, drawing uniformly")
    k = int(torch.randint(len(pool), (), generator=generator).item())
    return pool[k]


class PreClassifiedSampler:
    """Owns its RNG; one worker at a time."""

    def __init__(self, index, config):
        if not index.all_pairs:
            raise DomainError("cannot sample from an empty pair index")
        if config.rho > 0 and not index.swap_pairs:
            logger.warning("rho=%.3f but no swap pairs were classified; sampling uniformly", config.rho)
        self.index = index
        self.config = config
        self.generator = torch.Generator().manual_seed(config.seed)
        self._swap = set(index.swap_pairs)
        self.draws = 0
        self.swap_draws = 0

    def draw(self):
        pair = sample_pair(self.index, self.config, self.generator)
        self.draws += 1
        self.swap_draws += pair in self._swap
        return pair

    def draw_many(self, count):
        return [self.draw() for _ in range(count)]

    @property
    def expected_swap_fraction(self):
        rho = self.config.rho if self.index.swap_pairs else 0.0
        return rho + (1.0 - rho) * self.index.swap_share

    def stats(self):
        fraction = self.swap_draws / self.draws if self.draws else 0.0
        return {"draws": self.draws, "swap_draws": self.swap_draws, "swap_fraction": fraction}


def sampling_stats(pairs, index):
    """Draw counts of a pair sequence: draws, swap_draws and swap_fraction."""
    swaps = set(index.swap_pairs)
    pairs = list(pairs)
    swap_draws = sum(pair in swaps for pair in pairs)
    fraction = swap_draws / len(pairs) if pairs else 0.0
    return {"draws": len(pairs), "swap_draws": swap_draws, "swap_fraction": fraction}


def positions_from_masks(frame, masks):
    """Centroid x of each mask's cells (cell centres), normalised by the grid width."""
    entries = []
    for mask in masks:
        if mask.empty:
            continue
        width = mask.resolution[1]
        entries.append((mask.identity, (mask.centroid_x() + 0.5) / width))
    return CharacterPositions(frame=frame, entries=entries)
