"""
Identity Matching Graph
=======================

Per-frame bipartite graph between the m reference characters and the n
generated characters. Edge weights come from Mask-Query Attention: patches of a
generated character are queries, patches of the reference characters are keys,
and the attention mass a generated character spends on each reference
character's patches is that pair's affinity. The consistency score C is the
share of edge weight sitting on ground-truth edges, and the matching loss is
the mean of -C over the matched layers.

Two key layouts are supported. ``fast`` aggregates every masked reference map
into one key source ``r_all`` so each generated character needs a single
attention; ``pairwise`` attends to each masked reference map separately with
its own softmax. The two normalise over different column sets and are not
equivalent.

Weight matrices are always laid out [generated j][reference i].
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F

from id_match import numcore
from id_match.errors import DomainError, EmptyGraphError, ShapeError

__all__ = [
    "WEIGHT_DTYPE",
    "CharacterMask",
    "FeatureMap",
    "MqaParams",
    "MatchConfig",
    "AttentionResult",
    "IdentityMatchingGraph",
    "masked_sum",
    "interp_mask",
    "resolve_overlaps",
    "prepare_masks",
    "order_left_to_right",
    "build_nodes",
    "mqa_scores",
    "edge_weights",
    "build_img",
    "consistency_score",
    "matching_loss",
    "downsample_features",
    "build_pyramid",
    "build_multiscale",
]

logger = logging.getLogger(__name__)

MODES = ("fast", "pairwise")
# edge weights, C and L_match are normalised in float64 whatever the feature dtype
WEIGHT_DTYPE = torch.float64


@dataclass(frozen=True, eq=False)
class CharacterMask:
    """
    Binary h x w grid marking one character.

    ``coverage`` counts, per cell, how many cells of the original
    high-resolution mask fall under it; it is what ``resolve_overlaps`` compares.
    """

    identity: int
    grid: torch.Tensor
    coverage: Optional[torch.Tensor] = None
    empty_warning: bool = False

    def __post_init__(self):
        if self.identity < 0:
            raise DomainError(f"mask identity must be non-negative, got {self.identity}")
        grid = torch.as_tensor(self.grid)
        if grid.dim() != 2:
            raise ShapeError(f"mask grid must be 2-d, got shape {tuple(grid.shape)}")
        if grid.dtype != torch.bool:
            if not bool(((grid == 0) | (grid == 1)).all()):
                raise DomainError(f"mask of identity {self.identity} is not binary")
            grid = grid.bool()
        object.__setattr__(self, "grid", grid)
        coverage = self.coverage
        if coverage is None:
            coverage = grid.long()
        else:
            coverage = torch.as_tensor(coverage).long()
            if coverage.shape != grid.shape:
                raise ShapeError(f"coverage {tuple(coverage.shape)} does not match grid {tuple(grid.shape)}")
            coverage = torch.where(grid, coverage, torch.zeros_like(coverage))
        object.__setattr__(self, "coverage", coverage)

    @property
    def resolution(self):
        return tuple(self.grid.shape)

    @property
    def empty(self):
        return not bool(self.grid.any())

    def centroid_x(self):
        if self.empty:
            return math.inf
        cols = torch.nonzero(self.grid)[:, 1]
        return cols.double().mean().item()

    def flat(self):
        return self.grid.reshape(-1)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """c x h x w latent activations of one layer."""

    values: torch.Tensor
    layer: int = 1

    def __post_init__(self):
        if self.values.dim() != 3 or min(self.values.shape) < 1:
            raise ShapeError(f"feature map must be c x h x w with positive dims, got {tuple(self.values.shape)}")
        if not bool(torch.isfinite(self.values.detach()).all()):
            raise DomainError("feature map holds non-finite values")

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def resolution(self):
        return tuple(self.values.shape[1:])

    def tokens(self):
        # (c, h, w) -> (h*w, c), row-major over the grid
        c = self.channels
        return self.values.reshape(c, -1).transpose(0, 1)


@dataclass(eq=False)
class MqaParams:
    """Bias-free query/key projections of one matched layer."""

    w_q: torch.Tensor
    w_k: torch.Tensor
    gamma: float = 1e-8
    background_mask_enabled: bool = False
    mode: str = "fast"

    def __post_init__(self):
        if self.w_q.dim() != 2 or self.w_q.shape != self.w_k.shape:
            raise ShapeError(
                f"W_Q {tuple(self.w_q.shape)} and W_K {tuple(self.w_k.shape)} must both be c x d"
            )
        if self.d < 1:
            raise DomainError("query/key dimension d must be at least 1")
        if not self.gamma > 0:
            raise DomainError(f"gamma must be positive, got {self.gamma}")
        if self.mode not in MODES:
            raise DomainError(f"unknown MQA mode {self.mode!r}, expected one of {MODES}")

    @property
    def d(self):
        return self.w_q.shape[1]

    @property
    def channels(self):
        return self.w_q.shape[0]

    @classmethod
    def random(cls, channels, d, generator=None, std=0.02, tied=False, dtype=numcore.DEFAULT_DTYPE, **kwargs):
        w_q = torch.randn((channels, d), generator=generator, dtype=dtype) * std
        w_k = w_q.clone() if tied else torch.randn((channels, d), generator=generator, dtype=dtype) * std
        return cls(w_q, w_k, **kwargs)


@dataclass
class MatchConfig:
    params: List[MqaParams]

    def __post_init__(self):
        if len(self.params) < 1:
            raise DomainError("multi-scale matching needs at least one layer")

    @property
    def layers(self):
        return len(self.params)


@dataclass(eq=False)
class AttentionResult:
    attention: torch.Tensor
    scores: torch.Tensor


@dataclass(eq=False)
class IdentityMatchingGraph:
    """
    Weighted complete bipartite graph of one frame at one layer.

    ``weights[j][i]`` is w(r_i, g_j); ``ground_truth`` maps generated index j to
    reference index i. ``dropped`` lists generated identities whose mask vanished
    at this resolution.
    """

    ref_ids: List[int]
    gen_ids: List[int]
    weights: torch.Tensor
    ground_truth: Dict[int, int]
    scores: Optional[torch.Tensor] = None
    layer: int = 1
    dropped: Tuple[int, ...] = field(default_factory=tuple)

    @property
    def m(self):
        return len(self.ref_ids)

    @property
    def n(self):
        return len(self.gen_ids)

    @property
    def gt_mask(self):
        mask = torch.zeros((self.n, self.m), dtype=torch.bool, device=self.weights.device)
        for j, i in self.ground_truth.items():
            mask[j, i] = True
        return mask

    @property
    def degenerate(self):
        return float(self.weights.detach().sum()) == 0.0


class MaskedSum(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, mask):
        mask = mask.to(x.dtype)
        ctx.save_for_backward(mask)
        return (x * mask).sum()

    @staticmethod
    def backward(ctx, do):
        (mask,) = ctx.saved_tensors
        return do * mask, None


def masked_sum(x, mask=None):
    """Sum of the entries of x where mask is set (all entries when mask is None)."""
    if mask is None:
        mask = torch.ones_like(x, dtype=torch.bool)
    mask = torch.as_tensor(mask, device=x.device)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_sum: mask {tuple(mask.shape)} does not match {tuple(x.shape)}")
    return MaskedSum.apply(x, mask)


def _bin_sizes(source, target):
    # adaptive pooling bins: [floor(r*S/T), ceil((r+1)*S/T))
    r = torch.arange(target)
    start = (r * source) // target
    end = ((r + 1) * source + target - 1) // target
    return end - start


def interp_mask(mask, target):
    """
    Any-pool a mask to ``target`` = (h, w): an output cell is set iff any input
    cell of its cover box is set. Coverage counts are summed over the same box.
    """
    h, w = target
    if h < 1 or w < 1:
        raise DomainError(f"interp_mask: target resolution must be positive, got {target}")
    if mask.empty:
        logger.warning("mask of identity %d is empty before interpolation", mask.identity)
        return CharacterMask(mask.identity, torch.zeros((h, w), dtype=torch.bool), empty_warning=True)
    if mask.resolution == (h, w):
        return mask
    H, W = mask.resolution
    grid = mask.grid.double()[None, None]
    any_pooled = F.adaptive_max_pool2d(grid, (h, w))[0, 0] > 0
    area = torch.outer(_bin_sizes(H, h), _bin_sizes(W, w)).double()
    cov = F.adaptive_avg_pool2d(mask.coverage.double()[None, None], (h, w))[0, 0]
    coverage = torch.round(cov * area).long()
    return CharacterMask(mask.identity, any_pooled, coverage=coverage)


def resolve_overlaps(masks):
    """
    Give every cell to at most one identity: the claimant with the largest
    coverage count, ties going to the smaller identity label.
    """
    masks = list(masks)
    if not masks:
        return []
    resolution = masks[0].resolution
    for mask in masks:
        if mask.resolution != resolution:
            raise ShapeError(f"resolve_overlaps: resolutions {resolution} and {mask.resolution} differ")
    order = sorted(range(len(masks)), key=lambda k: masks[k].identity)
    claims = torch.stack([
        torch.where(masks[k].grid, masks[k].coverage, torch.full_like(masks[k].coverage, -1))
        for k in order
    ])
    claimed = claims.max(dim=0).values >= 0
    # argmax keeps the first maximum, i.e. the smaller identity
    winner = claims.argmax(dim=0)
    resolved = [None] * len(masks)
    for rank, k in enumerate(order):
        grid = claimed & (winner == rank)
        resolved[k] = CharacterMask(
            masks[k].identity, grid, coverage=masks[k].coverage, empty_warning=masks[k].empty_warning
        )
    return resolved


def prepare_masks(masks, resolution):
    """interp_mask + resolve_overlaps. Returns (masks, identities left empty)."""
    resized = [interp_mask(mask, resolution) for mask in masks]
    resolved = resolve_overlaps(resized)
    empty = tuple(mask.identity for mask in resolved if mask.empty)
    return resolved, empty


def order_left_to_right(masks):
    return sorted(masks, key=lambda mask: (mask.centroid_x(), mask.identity))


def build_nodes(f, masks, aggregate=False):
    """
    Graph nodes f (Hadamard) mask_i, the mask broadcast over channels.

    Returns the list of node FeatureMaps, or (nodes, r_all) when ``aggregate``.
    """
    nodes = []
    for mask in masks:
        if mask.resolution != f.resolution:
            raise ShapeError(f"build_nodes: mask {mask.resolution} does not match features {f.resolution}")
        m = mask.grid.to(f.values.dtype).expand_as(f.values)
        nodes.append(FeatureMap(numcore.mul(f.values, m), layer=f.layer))
    if not aggregate:
        return nodes
    if nodes:
        total = nodes[0].values
        for node in nodes[1:]:
            total = numcore.add(total, node.values)
    else:
        total = torch.zeros_like(f.values)
    return nodes, FeatureMap(total, layer=f.layer)


def mqa_scores(g_node, key_source, params, v_g, v_r_list):
    """
    Mask-Query Attention of one generated node against a key source.

    Arguments:
        g_node(FeatureMap): masked generated features, queries.
        key_source(FeatureMap): r_all (fast) or a single r_i (pairwise), keys.
        params(MqaParams): projections and background handling.
        v_g(torch.Tensor): bool (h_g*w_g,), query tokens inside the generated mask.
        v_r_list(list of torch.Tensor): bool (h_r*w_r,) per reference character.

    Returns:
        AttentionResult with A over all query rows and S_i = sum over V_g x V_r_i of A.
    """
    if g_node.channels != key_source.channels or g_node.channels != params.channels:
        raise ShapeError(
            f"mqa_scores: channels {g_node.channels} (queries), {key_source.channels} (keys) "
            f"and {params.channels} (projections) must agree"
        )
    v_g = torch.as_tensor(v_g, dtype=torch.bool)
    v_r_list = [torch.as_tensor(v, dtype=torch.bool) for v in v_r_list]
    hw_g = g_node.resolution[0] * g_node.resolution[1]
    hw_k = key_source.resolution[0] * key_source.resolution[1]
    if v_g.shape != (hw_g,) or any(v.shape != (hw_k,) for v in v_r_list):
        raise ShapeError("mqa_scores: index masks do not match the token grids")
    if not bool(v_g.any()):
        raise DomainError("empty generated mask")
    if not v_r_list or not any(bool(v.any()) for v in v_r_list):
        raise DomainError("every reference mask is empty")

    q = numcore.matmul(g_node.tokens(), params.w_q)
    k = numcore.matmul(key_source.tokens(), params.w_k)
    logits = numcore.scale(numcore.matmul(q, k.transpose(0, 1)), 1.0 / math.sqrt(params.d))
    column_mask = None
    if params.background_mask_enabled:
        column_mask = torch.stack(v_r_list).any(dim=0)
    a = numcore.row_softmax(logits, column_mask)

    scores = torch.stack([masked_sum(a, v_g[:, None] & v_r[None, :]) for v_r in v_r_list])
    return AttentionResult(attention=a, scores=scores)


def edge_weights(scores, gamma=1e-8):
    """
    w_i = S_i / (sum_i S_i + gamma), returned in float64.

    gamma vanishes against S in float32, which would let a row sum to exactly 1.
    """
    if bool((scores.detach() < 0).any()):
        raise DomainError("edge_weights: affinity scores must be non-negative")
    scores = scores.to(WEIGHT_DTYPE)
    total = numcore.add(masked_sum(scores), gamma)
    return numcore.divide(scores, total)


def _check_ground_truth(gt, ref_ids, gen_ids):
    if len(set(gt.values())) != len(gt):
        raise DomainError("ground-truth matching is not injective")
    unknown = [i for i in gt.values() if i not in ref_ids]
    if unknown:
        raise DomainError(f"ground truth points at unknown reference identities {unknown}")
    missing = [j for j in gen_ids if j not in gt]
    if missing:
        raise DomainError(f"generated identities {missing} have no ground-truth reference")


def build_img(f_ref, f_gen, masks_ref, masks_gen, gt, params, layer=None):
    """
    Build the IMG of one frame.

    Arguments:
        f_ref(FeatureMap), f_gen(FeatureMap): reference and generated features.
        masks_ref, masks_gen(list of CharacterMask): masks at any resolution; they
            are any-pooled to the feature resolution and overlap-resolved here.
        gt(dict): generated identity -> reference identity.
        params(MqaParams): projections, gamma, background handling and mode.
        layer(int or None): layer index recorded on the graph, defaults to f_gen.layer.

    Returns:
        IdentityMatchingGraph with characters ordered left to right.
    """
    m, n = len(masks_ref), len(masks_gen)
    if n > m:
        raise DomainError(f"build_img: {n} generated characters but only {m} reference characters")
    _check_ground_truth(gt, [mask.identity for mask in masks_ref], [mask.identity for mask in masks_gen])

    refs, _ = prepare_masks(masks_ref, f_ref.resolution)
    gens, dropped = prepare_masks(masks_gen, f_gen.resolution)
    refs = order_left_to_right(refs)
    gens = order_left_to_right([mask for mask in gens if not mask.empty])
    if dropped:
        logger.warning("layer %s: dropping generated identities %s with empty masks", layer or f_gen.layer, dropped)
    if not gens:
        raise EmptyGraphError("no generated character survived mask interpolation")

    ref_nodes, r_all = build_nodes(f_ref, refs, aggregate=True)
    gen_nodes = build_nodes(f_gen, gens)
    v_r = [mask.flat() for mask in refs]

    rows, raw = [], []
    for g_mask, g_node in zip(gens, gen_nodes):
        v_g = g_mask.flat()
        if params.mode == "fast":
            s = mqa_scores(g_node, r_all, params, v_g, v_r).scores
        else:
            per_ref = []
            for r_node, v in zip(ref_nodes, v_r):
                if not bool(v.any()):
                    per_ref.append(f_gen.values.new_zeros(()))
                    continue
                per_ref.append(mqa_scores(g_node, r_node, params, v_g, [v]).scores[0])
            s = torch.stack(per_ref)
        raw.append(s)
        rows.append(edge_weights(s, params.gamma))

    ref_ids = [mask.identity for mask in refs]
    gen_ids = [mask.identity for mask in gens]
    ground_truth = {j: ref_ids.index(gt[g]) for j, g in enumerate(gen_ids)}
    return IdentityMatchingGraph(
        ref_ids=ref_ids,
        gen_ids=gen_ids,
        weights=torch.stack(rows),
        ground_truth=ground_truth,
        scores=torch.stack(raw),
        layer=f_gen.layer if layer is None else layer,
        dropped=dropped,
    )


def consistency_score(img):
    """C = weight on ground-truth edges / weight on all edges; 0 for degenerate graphs."""
    if img.n < 1:
        raise DomainError("consistency_score: graph has no generated characters")
    total = masked_sum(img.weights)
    if float(total.detach()) == 0.0:
        logger.warning("layer %d: degenerate graph, total edge weight is zero", img.layer)
        return torch.zeros((), dtype=img.weights.dtype)
    return numcore.divide(masked_sum(img.weights, img.gt_mask), total)


def matching_loss(graphs):
    """L_match = mean over layers of -C."""
    graphs = list(graphs)
    if not graphs:
        raise DomainError("matching_loss: no layers to match")
    for img in graphs:
        if img.degenerate:
            raise DomainError(f"matching_loss: graph of layer {img.layer} is degenerate")
    cs = torch.stack([consistency_score(img) for img in graphs])
    return numcore.neg(numcore.mean(cs))


def downsample_features(f, times=1):
    """``times`` rounds of 2x2 average pooling."""
    values = f.values
    for _ in range(times):
        if min(values.shape[1:]) < 2:
            raise ShapeError(f"cannot pool a {tuple(values.shape[1:])} feature map any further")
        values = F.avg_pool2d(values[None], kernel_size=2)[0]
    return FeatureMap(values, layer=f.layer + times)


def build_pyramid(f, layers):
    """Layer l (1-based) is f pooled l-1 times."""
    return [downsample_features(f, times=level) for level in range(layers)]


def build_multiscale(f_ref, f_gen, masks_ref, masks_gen, gt, config):
    """
    One IMG per matched layer. Layers whose graph is empty or degenerate are
    skipped; returns (graphs, skipped layer indices).
    """
    ref_pyramid = build_pyramid(f_ref, config.layers)
    gen_pyramid = build_pyramid(f_gen, config.layers)
    graphs, skipped = [], []
    for fr, fg, params in zip(ref_pyramid, gen_pyramid, config.params):
        try:
            img = build_img(fr, fg, masks_ref, masks_gen, gt, params, layer=fg.layer)
        except EmptyGraphError:
            logger.warning("layer %d: empty graph, skipped", fg.layer)
            skipped.append(fg.layer)
            continue
        if img.degenerate:
            logger.warning("layer %d: degenerate graph, skipped", fg.layer)
            skipped.append(fg.layer)
            continue
        graphs.append(img)
    return graphs, skipped
