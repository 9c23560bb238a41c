"""
Synthetic scenes
================

Deterministic multi-character scenes for exercising the matching graph:
characters are unit-norm embeddings painted into disjoint vertical strips of a
c x H x W latent. The reference frame lists characters left to right by
identity; the target layout keeps that order or applies a seeded non-identity
permutation (a position swap). The identity cue paints one-hot identity
channels over the target layout, each region flipped to a wrong identity with
the corruption probability.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import torch

from id_match import formats
from id_match.errors import DomainError, FormatError
from id_match.graph import CharacterMask, FeatureMap
from id_match.sampling import positions_from_masks

__all__ = [
    "SceneSpec",
    "SynthScene",
    "strip_columns",
    "gen_scene",
    "write_scene",
    "gen_dataset",
    "regenerate_scene",
    "load_scene",
    "load_dataset",
]

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 1000
MAX_ABS_COS = 0.3
MANIFEST_NAME = "manifest.ndjson"


@dataclass
class SceneSpec:
    height: int = 16
    width: int = 16
    channels: int = 8
    chars: int = 2
    region_frac: float = 0.75
    embed_scale: float = 1.0
    sigma: float = 0.0
    swap: bool = False
    cue_corruption: float = 0.0

    def __post_init__(self):
        if not 2 <= self.chars <= 5:
            raise DomainError(f"scenes hold 2 to 5 characters, got {self.chars}")
        if self.height < 1 or self.channels < 1:
            raise DomainError("height and channels must be positive")
        if self.width < self.chars:
            raise DomainError(f"{self.chars} strips do not fit in width {self.width}")
        if not 0.0 < self.region_frac <= 1.0:
            raise DomainError(f"region_frac must lie in (0, 1], got {self.region_frac}")
        if self.sigma < 0:
            raise DomainError(f"sigma must be non-negative, got {self.sigma}")
        if not 0.0 <= self.cue_corruption <= 1.0:
            raise DomainError(f"cue_corruption must lie in [0, 1], got {self.cue_corruption}")


@dataclass(eq=False)
class SynthScene:
    spec: SceneSpec
    seed: int
    f_ref: FeatureMap
    cue: FeatureMap
    target_features: FeatureMap
    masks_ref: List[CharacterMask]
    masks_gen: List[CharacterMask]
    gt: Dict[int, int]
    # layout[s] is the identity standing in slot s of the target frame
    layout: Tuple[int, ...] = ()
    embeddings: torch.Tensor = field(default=None, repr=False)

    @property
    def swap(self):
        return self.spec.swap

    def positions(self, frame_ref=0, frame_gen=1):
        return positions_from_masks(frame_ref, self.masks_ref), positions_from_masks(frame_gen, self.masks_gen)


def strip_columns(spec, slot):
    """Columns [start, stop) of the strip centred in slot ``slot``."""
    lo = slot * spec.width // spec.chars
    hi = (slot + 1) * spec.width // spec.chars
    width = max(1, int(round(spec.region_frac * (hi - lo))))
    start = lo + (hi - lo - width) // 2
    return start, start + width


def _strip_mask(spec, identity, slot):
    grid = torch.zeros((spec.height, spec.width), dtype=torch.bool)
    start, stop = strip_columns(spec, slot)
    grid[:, start:stop] = True
    return CharacterMask(identity, grid)


def _embeddings(spec, generator):
    accepted = []
    for k in range(spec.chars):
        for _ in range(MAX_ATTEMPTS):
            v = torch.randn(spec.channels, generator=generator)
            v = v / v.norm()
            if all(abs(float(v @ u)) <= MAX_ABS_COS for u in accepted):
                accepted.append(v)
                break
        else:
            raise DomainError("cannot separate identities")
    return torch.stack(accepted)


def _swap_layout(m, generator):
    identity = list(range(m))
    while True:
        perm = torch.randperm(m, generator=generator).tolist()
        if perm != identity:
            return tuple(perm)


def gen_scene(spec, seed):
    g = torch.Generator().manual_seed(int(seed))
    m, c = spec.chars, spec.channels
    e = _embeddings(spec, g) * spec.embed_scale
    layout = _swap_layout(m, g) if spec.swap else tuple(range(m))

    f_ref = torch.zeros((c, spec.height, spec.width))
    target = torch.zeros_like(f_ref)
    cue = torch.zeros((m, spec.height, spec.width))
    masks_ref, masks_gen = [], []
    for k in range(m):
        start, stop = strip_columns(spec, k)
        patch = e[k][:, None, None].expand(c, spec.height, stop - start)
        if spec.sigma > 0:
            patch = patch + spec.sigma * torch.randn(patch.shape, generator=g)
        f_ref[:, :, start:stop] = patch
        masks_ref.append(_strip_mask(spec, k, k))

    for slot, k in enumerate(layout):
        start, stop = strip_columns(spec, slot)
        target[:, :, start:stop] = e[k][:, None, None]
        shown = k
        if torch.rand((), generator=g).item() < spec.cue_corruption:
            wrong = torch.randint(m - 1, (), generator=g).item()
            shown = wrong if wrong < k else wrong + 1
        cue[shown, :, start:stop] = 1.0
        masks_gen.append(_strip_mask(spec, k, slot))
    masks_gen.sort(key=lambda mask: mask.identity)

    return SynthScene(
        spec=spec,
        seed=int(seed),
        f_ref=FeatureMap(f_ref),
        cue=FeatureMap(cue),
        target_features=FeatureMap(target),
        masks_ref=masks_ref,
        masks_gen=masks_gen,
        gt={k: k for k in range(m)},
        layout=layout,
        embeddings=e,
    )


def _scene_files(spec):
    files = {"f_ref": "f_ref.tsr", "cue": "cue.tsr", "target": "target.tsr", "matching": "matching.json"}
    for k in range(spec.chars):
        files[f"ref_{k}"] = f"ref_{k}.pgm"
        files[f"gen_{k}"] = f"gen_{k}.pgm"
    return files


def write_scene(scene, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = _scene_files(scene.spec)
    formats.write_tensor(directory / files["f_ref"], scene.f_ref.values)
    formats.write_tensor(directory / files["cue"], scene.cue.values)
    formats.write_tensor(directory / files["target"], scene.target_features.values)
    for mask in scene.masks_ref:
        formats.write_mask(directory / f"ref_{mask.identity}.pgm", mask)
    for mask in scene.masks_gen:
        formats.write_mask(directory / f"gen_{mask.identity}.pgm", mask)
    formats.write_matching(
        directory / files["matching"],
        [mask.identity for mask in scene.masks_ref],
        [mask.identity for mask in scene.masks_gen],
        scene.gt,
    )
    return files


def gen_dataset(spec, count, swap_share, seed, out_dir):
    """
    Write ``count`` scenes under ``out_dir`` plus an NDJSON manifest.

    Exactly floor(count * swap_share + 0.5) scenes swap; which ones is a seeded
    permutation. Scene i is generated from seed + i. Returns the manifest path.
    """
    if count < 1:
        raise DomainError(f"count must be at least 1, got {count}")
    if not 0.0 <= swap_share <= 1.0:
        raise DomainError(f"swap_share must lie in [0, 1], got {swap_share}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n_swap = int(count * swap_share + 0.5)
    g = torch.Generator().manual_seed(int(seed))
    swapping = set(torch.randperm(count, generator=g)[:n_swap].tolist())

    entries = []
    for i in range(count):
        scene_spec = dataclasses.replace(spec, swap=i in swapping)
        scene = gen_scene(scene_spec, seed + i)
        name = f"scene_{i:04d}"
        files = write_scene(scene, out_dir / name)
        entries.append({
            "index": i,
            "seed": seed + i,
            "swap": scene_spec.swap,
            "dir": name,
            "files": files,
            "gt": {str(g_id): r_id for g_id, r_id in scene.gt.items()},
            "layout": list(scene.layout),
            "spec": dataclasses.asdict(scene_spec),
        })
    manifest = out_dir / MANIFEST_NAME
    formats.write_manifest(manifest, entries)
    logger.info("wrote %d scenes (%d swapped) to %s", count, n_swap, out_dir)
    return manifest


MANIFEST_FIELDS = ("seed", "dir", "files", "spec")


def _check_entry(entry, where):
    missing = [key for key in MANIFEST_FIELDS if key not in entry]
    if missing:
        raise FormatError(f"manifest entry lacks {missing}", position=where)
    if not isinstance(entry["dir"], str):
        raise FormatError(f"manifest entry 'dir' must be a string, got {entry['dir']!r}", position=where)
    if not isinstance(entry["files"], dict) or not isinstance(entry["spec"], dict):
        raise FormatError("manifest entry 'files' and 'spec' must be objects", position=where)
    try:
        spec = SceneSpec(**entry["spec"])
    except (TypeError, DomainError) as e:
        raise FormatError(f"bad scene spec: {e}", position=where) from None
    absent = [key for key in _scene_files(spec) if key not in entry["files"]]
    if absent:
        raise FormatError(f"manifest entry lists no files for {absent}", position=where)
    return spec


def regenerate_scene(entry):
    """Rebuild a manifest entry's scene from its recorded spec and seed."""
    return gen_scene(SceneSpec(**entry["spec"]), entry["seed"])


def load_scene(entry, root, where="manifest entry"):
    """Read a manifest entry's scene back from disk."""
    spec = _check_entry(entry, where)
    directory = Path(root) / entry["dir"]
    files = entry["files"]
    ref_ids, gen_ids, gt = formats.read_matching(directory / files["matching"])
    masks_ref = [formats.read_mask(directory / f"ref_{k}.pgm", k) for k in ref_ids]
    masks_gen = [formats.read_mask(directory / f"gen_{k}.pgm", k) for k in gen_ids]
    return SynthScene(
        spec=spec,
        seed=entry["seed"],
        f_ref=FeatureMap(formats.read_tensor(directory / files["f_ref"])),
        cue=FeatureMap(formats.read_tensor(directory / files["cue"])),
        target_features=FeatureMap(formats.read_tensor(directory / files["target"])),
        masks_ref=masks_ref,
        masks_gen=masks_gen,
        gt=gt,
        layout=tuple(entry.get("layout", ())),
    )


def load_dataset(manifest):
    manifest = Path(manifest)
    entries = formats.read_manifest(manifest)
    if not entries:
        raise DomainError(f"manifest {manifest} lists no scenes")
    return [load_scene(entry, manifest.parent, where=f"{manifest}: entry {k}") for k, entry in enumerate(entries)]
