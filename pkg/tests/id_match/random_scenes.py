import torch

from id_match.graph import CharacterMask, FeatureMap, MqaParams


def random_labels(m, h, w, generator):
    """Every cell is background (-1) or one of m characters; each character owns at least one cell."""
    labels = torch.randint(-1, m, (h, w), generator=generator)
    cells = torch.randperm(h * w, generator=generator)[:m]
    for k, cell in enumerate(cells.tolist()):
        labels.view(-1)[cell] = k
    return labels


def random_scene(seed, m, h, w, c=4, d=4, n=None, std=1.0, dtype=torch.float64, **params):
    """
    Random features on both frames, scattered disjoint masks and a random
    ground-truth matching of n <= m generated characters.
    """
    g = torch.Generator().manual_seed(seed)
    n = m if n is None else n
    ref_labels = random_labels(m, h, w, g)
    gen_labels = random_labels(n, h, w, g)
    ref_ids = (torch.randperm(m, generator=g) + 10).tolist()
    gen_ids = (torch.randperm(n, generator=g) + 20).tolist()
    masks_ref = [CharacterMask(ident, ref_labels == k) for k, ident in enumerate(ref_ids)]
    masks_gen = [CharacterMask(ident, gen_labels == k) for k, ident in enumerate(gen_ids)]
    targets = torch.randperm(m, generator=g)[:n].tolist()
    gt = {gen_ids[j]: ref_ids[targets[j]] for j in range(n)}
    f_ref = FeatureMap(torch.randn((c, h, w), generator=g, dtype=dtype))
    f_gen = FeatureMap(torch.randn((c, h, w), generator=g, dtype=dtype))
    mqa = MqaParams.random(c, d, generator=g, std=std, dtype=dtype, **params)
    return f_ref, f_gen, masks_ref, masks_gen, gt, mqa
