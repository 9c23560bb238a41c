import math

import torch

from id_match.errors import DomainError, EmptyGraphError, ShapeError
from id_match.graph import IdentityMatchingGraph


def _centroid_x(grid):
    cols = [x for row in grid for x, v in enumerate(row) if v]
    return sum(cols) / len(cols) if cols else math.inf


def _project(features, grids, W):
    # features: c x h x w nested lists; grids: masks whose Hadamard products are summed
    c, h, w = len(features), len(features[0]), len(features[0][0])
    d = len(W[0])
    tokens = []
    for p in range(h * w):
        y, x = divmod(p, w)
        v = [0.0] * c
        for grid in grids:
            if grid[y][x]:
                for ch in range(c):
                    v[ch] += features[ch][y][x]
        tokens.append([sum(v[ch] * W[ch][t] for ch in range(c)) for t in range(d)])
    return tokens


def _attention_row(q, keys, columns, scale):
    logits = [sum(a * b for a, b in zip(q, keys[col])) * scale for col in columns]
    top = max(logits)
    e = [math.exp(z - top) for z in logits]
    total = sum(e)
    return {col: v / total for col, v in zip(columns, e)}


def naive_oracle_img(f_ref, f_gen, masks_ref, masks_gen, gt, params, layer=None):
    """
    Scalar-loop reference of build_img in float64. Masks must already be at the
    feature resolution (no interpolation is done here).
    """
    m, n = len(masks_ref), len(masks_gen)
    if n > m:
        raise DomainError(f"{n} generated characters but only {m} reference characters")
    if len(set(gt.values())) != len(gt):
        raise DomainError("ground-truth matching is not injective")

    fr = f_ref.values.detach().double().tolist()
    fg = f_gen.values.detach().double().tolist()
    wq = params.w_q.detach().double().tolist()
    wk = params.w_k.detach().double().tolist()
    scale = 1.0 / math.sqrt(len(wq[0]))

    def grid_of(mask, features):
        grid = mask.grid.tolist()
        if (len(grid), len(grid[0])) != (len(features[0]), len(features[0][0])):
            raise ShapeError("oracle masks must match the feature resolution")
        return grid

    refs = sorted(((mask.identity, grid_of(mask, fr)) for mask in masks_ref),
                  key=lambda item: (_centroid_x(item[1]), item[0]))
    gens = [(mask.identity, grid_of(mask, fg)) for mask in masks_gen]
    dropped = tuple(ident for ident, grid in gens if not any(any(row) for row in grid))
    gens = sorted(((ident, grid) for ident, grid in gens if ident not in dropped),
                  key=lambda item: (_centroid_x(item[1]), item[0]))
    if not gens:
        raise EmptyGraphError("no generated character with a nonempty mask")

    w_r = len(fr[0][0])
    ref_sets = [[p for p in range(len(fr[0]) * w_r) if grid[p // w_r][p % w_r]] for _, grid in refs]
    all_cols = list(range(len(fr[0]) * w_r))

    weights, raw = [], []
    for _, g_grid in gens:
        queries = _project(fg, [g_grid], wq)
        w_g = len(g_grid[0])
        rows = [p for p in range(len(g_grid) * w_g) if g_grid[p // w_g][p % w_g]]
        s = [0.0] * len(refs)
        if params.mode == "fast":
            keys = _project(fr, [grid for _, grid in refs], wk)
            if params.background_mask_enabled:
                columns = sorted(col for cols in ref_sets for col in cols)
            else:
                columns = all_cols
            for p in rows:
                a = _attention_row(queries[p], keys, columns, scale)
                for i, cols in enumerate(ref_sets):
                    s[i] += sum(a[col] for col in cols)
        else:
            for i, (_, r_grid) in enumerate(refs):
                if not ref_sets[i]:
                    continue
                keys = _project(fr, [r_grid], wk)
                columns = ref_sets[i] if params.background_mask_enabled else all_cols
                for p in rows:
                    a = _attention_row(queries[p], keys, columns, scale)
                    s[i] += sum(a[col] for col in ref_sets[i])
        total = sum(s) + params.gamma
        raw.append(s)
        weights.append([v / total for v in s])

    ref_ids = [ident for ident, _ in refs]
    gen_ids = [ident for ident, _ in gens]
    return IdentityMatchingGraph(
        ref_ids=ref_ids,
        gen_ids=gen_ids,
        weights=torch.tensor(weights, dtype=torch.float64),
        ground_truth={j: ref_ids.index(gt[g]) for j, g in enumerate(gen_ids)},
        scores=torch.tensor(raw, dtype=torch.float64),
        layer=f_gen.layer if layer is None else layer,
        dropped=dropped,
    )


def consistency_score(img):
    w = img.weights.tolist()
    total = sum(sum(row) for row in w)
    if total == 0.0:
        return 0.0
    return sum(w[j][i] for j, i in img.ground_truth.items()) / total
