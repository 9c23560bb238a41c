"""
Toy training harness
====================

A linear cue-to-feature generator stands in for the denoising network: the
generated latent at each site is ``cue[:, y, x] @ generator``. Training jointly
minimises a diffusion-proxy reconstruction loss and the multi-scale matching
loss, ``L_total = L_diff + lambda * L_match``, drawing scenes with
pre-classified sampling so swapped layouts are seen with probability rho.
"""

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import torch
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from id_match import formats, numcore
from id_match.errors import ConfigError, DomainError, FormatError
from id_match.graph import FeatureMap, MatchConfig, MqaParams, build_multiscale, consistency_score, matching_loss
from id_match.sampling import PairIndex, PairPolicy, PreClassifiedSampler, SamplerConfig, classify_pairs
from id_match.synth import load_dataset

__all__ = [
    "ToyModel",
    "TrainConfig",
    "LossRecord",
    "EvalResult",
    "diffusion_proxy_loss",
    "masked_identity_loss",
    "total_loss",
    "scene_pair_index",
    "run_training",
    "evaluate_ic",
    "write_metrics_csv",
    "write_eval_csv",
    "save_model",
    "load_model",
]

logger = logging.getLogger(__name__)

OBJECTIVES = ("img", "end2end_m")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class ToyModel(nn.Module):
    """
    Linear generator plus per-layer bias-free W_Q/W_K projections, every entry
    drawn from N(0, 0.02^2) with a seeded generator.

    Parameters are registered generator first, then W_Q and W_K of each layer,
    which is the order ``save_model`` flattens them in.
    """

    def __init__(self, cue_channels, channels, layers=3, d=16, seed=0, std=0.02):
        super().__init__()
        if layers < 1 or d < 1:
            raise DomainError(f"need at least one layer and d >= 1, got layers={layers}, d={d}")
        g = torch.Generator().manual_seed(int(seed))
        self.generator = nn.Parameter(torch.randn((cue_channels, channels), generator=g) * std)
        projections = []
        for _ in range(layers):
            projections.append(nn.Parameter(torch.randn((channels, d), generator=g) * std))
            projections.append(nn.Parameter(torch.randn((channels, d), generator=g) * std))
        self.projections = nn.ParameterList(projections)
        self.layers = layers
        self.d = d

    @classmethod
    def for_scenes(cls, scenes, config):
        scene = scenes[0]
        return cls(scene.cue.channels, scene.f_ref.channels, layers=config.layers, d=config.d, seed=config.seed)

    def w_q(self, layer):
        return self.projections[2 * (layer - 1)]

    def w_k(self, layer):
        return self.projections[2 * (layer - 1) + 1]

    def forward(self, cue):
        h, w = cue.resolution
        out = numcore.matmul(cue.tokens(), self.generator)
        return FeatureMap(out.transpose(0, 1).reshape(-1, h, w), layer=cue.layer)

    def match_config(self, background_mask=False, mode="fast"):
        return MatchConfig([
            MqaParams(self.w_q(layer), self.w_k(layer), background_mask_enabled=background_mask, mode=mode)
            for layer in range(1, self.layers + 1)
        ])


def _parse_bool(text):
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"expected true or false, got {text!r}")


@dataclass
class TrainConfig:
    lambda_: float = 0.2
    rho: float = 0.3
    layers: int = 3
    steps: int = 2000
    lr: float = 1e-2
    seed: int = 0
    manifest: Optional[str] = None
    background_mask: bool = False
    mode: str = "fast"
    d: int = 16
    objective: str = "img"
    log_every: int = 100

    # run-file key -> (field, parser)
    KEYS = {
        "lambda": ("lambda_", float),
        "rho": ("rho", float),
        "layers": ("layers", int),
        "steps": ("steps", int),
        "lr": ("lr", float),
        "seed": ("seed", int),
        "manifest": ("manifest", str),
        "background_mask": ("background_mask", _parse_bool),
        "mode": ("mode", str),
        "d": ("d", int),
        "objective": ("objective", str),
        "log_every": ("log_every", int),
    }

    def __post_init__(self):
        if self.lambda_ < 0:
            raise DomainError(f"lambda must be non-negative, got {self.lambda_}")
        if self.steps < 1:
            raise DomainError(f"steps must be at least 1, got {self.steps}")
        if self.layers < 1:
            raise DomainError(f"layers must be at least 1, got {self.layers}")
        if not 0.0 <= self.rho <= 1.0:
            raise DomainError(f"rho must lie in [0, 1], got {self.rho}")
        if not self.lr > 0:
            raise DomainError(f"lr must be positive, got {self.lr}")
        if self.objective not in OBJECTIVES:
            raise DomainError(f"unknown objective {self.objective!r}, expected one of {OBJECTIVES}")
        if self.log_every < 1:
            raise DomainError(f"log_every must be at least 1, got {self.log_every}")

    @classmethod
    def from_file(cls, path, **overrides):
        """Parse a key=value run file; a relative manifest path is taken relative to the file."""
        values = {}
        for lineno, key, raw in formats.read_key_values(path):
            if key not in cls.KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            name, parse = cls.KEYS[key]
            try:
                values[name] = parse(raw)
            except ValueError as e:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {e}") from None
        if values.get("manifest"):
            manifest = Path(values["manifest"])
            if not manifest.is_absolute():
                values["manifest"] = str(Path(path).parent / manifest)
        values.update(overrides)
        try:
            return cls(**values)
        except DomainError as e:
            raise ConfigError(f"{path}: {e}") from None

    def to_key_values(self):
        names = {name: key for key, (name, _) in self.KEYS.items()}
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            out[names[f.name]] = str(value).lower() if isinstance(value, bool) else str(value)
        return out


@dataclass
class LossRecord:
    step: int
    l_diff: float
    l_match: float
    l_total: float
    # C of layers 1..N, nan where a layer was skipped
    c_layers: List[float] = field(default_factory=list)

    @property
    def c_mean(self):
        finite = [c for c in self.c_layers if not math.isnan(c)]
        return sum(finite) / len(finite) if finite else math.nan


@dataclass
class EvalResult:
    # per scene: C of layers 1..N, nan where skipped
    per_scene: List[List[float]]

    @staticmethod
    def _mean(values):
        finite = [v for v in values if not math.isnan(v)]
        return sum(finite) / len(finite) if finite else math.nan

    def scene_mean(self, k):
        return self._mean(self.per_scene[k])

    @property
    def layer_means(self):
        return [self._mean(column) for column in zip(*self.per_scene)]

    @property
    def mean(self):
        return self._mean([self.scene_mean(k) for k in range(len(self.per_scene))])


def diffusion_proxy_loss(f_gen, target):
    """Mean squared feature error; stands in for the noise-prediction loss."""
    return numcore.squared_error(f_gen.values, target.values)


def total_loss(l_diff, l_match, lambda_):
    if lambda_ < 0:
        raise DomainError(f"lambda must be non-negative, got {lambda_}")
    dtype = torch.promote_types(l_diff.dtype, l_match.dtype)
    return numcore.add(l_diff.to(dtype), numcore.scale(l_match.to(dtype), lambda_))


def _region_mean(f, mask):
    # (1, hw) averaging row times (hw, c) tokens
    flat = mask.flat().to(f.values.dtype)
    row = (flat / flat.sum())[None]
    return numcore.matmul(row, f.tokens())


def masked_identity_loss(f_gen, f_ref, masks_gen, masks_ref, gt):
    """
    Weak identity constraint: squared error between the mean generated feature
    inside each generated character and the mean reference feature inside its
    ground-truth reference character, averaged over characters.
    """
    refs = {mask.identity: mask for mask in masks_ref}
    losses = []
    for mask in masks_gen:
        if mask.empty or refs[gt[mask.identity]].empty:
            continue
        target = _region_mean(f_ref, refs[gt[mask.identity]]).detach()
        losses.append(numcore.squared_error(_region_mean(f_gen, mask), target))
    if not losses:
        raise DomainError("no character pairs with nonempty masks")
    return numcore.mean(torch.stack(losses))


def scene_pair_index(scenes):
    """
    Scene k contributes frames 2k (reference layout) and 2k+1 (generated
    layout); the pair is a swap pair when the two orders differ.
    """
    policy = PairPolicy(ordered=False)
    swap_pairs, all_pairs = [], []
    for k, scene in enumerate(scenes):
        index = classify_pairs(list(scene.positions(2 * k, 2 * k + 1)), policy)
        swap_pairs.extend(index.swap_pairs)
        all_pairs.extend(index.all_pairs)
    return PairIndex(swap_pairs=swap_pairs, all_pairs=all_pairs)


def _layer_scores(graphs, layers):
    by_layer = {img.layer: float(consistency_score(img).detach()) for img in graphs}
    return [by_layer.get(layer, math.nan) for layer in range(1, layers + 1)]


def _match_objective(scene, f_gen, config, match_config):
    graphs, _ = build_multiscale(scene.f_ref, f_gen, scene.masks_ref, scene.masks_gen, scene.gt, match_config)
    if not graphs:
        return None, graphs
    if config.objective == "img":
        return matching_loss(graphs), graphs
    return masked_identity_loss(f_gen, scene.f_ref, scene.masks_gen, scene.masks_ref, scene.gt), graphs


def run_training(model, config, scenes=None):
    """
    Returns (model, records). Scenes whose every layer is empty or degenerate
    are skipped and do not count as a step.
    """
    if scenes is None:
        if not config.manifest:
            raise DomainError("run_training needs a manifest or preloaded scenes")
        scenes = load_dataset(config.manifest)
    if not scenes:
        raise DomainError("no scenes to train on")

    sampler = PreClassifiedSampler(scene_pair_index(scenes), SamplerConfig(rho=config.rho, seed=config.seed))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    params = list(model.parameters())
    match_config = model.match_config(config.background_mask, config.mode)

    records = []
    draws, max_draws = 0, 10 * config.steps + 100
    while len(records) < config.steps:
        if draws >= max_draws:
            raise DomainError(f"gave up after {draws} draws: too many scenes without a usable graph")
        draws += 1
        a, b = sampler.draw()
        k = min(a, b) // 2
        scene = scenes[k]

        f_gen = model(scene.cue)
        l_diff = diffusion_proxy_loss(f_gen, scene.target_features)
        l_match, graphs = _match_objective(scene, f_gen, config, match_config)
        if l_match is None:
            logger.warning("scene %d: no usable layer, skipped", k)
            continue
        l_total = total_loss(l_diff, l_match, config.lambda_)

        grads = numcore.backward(l_total, params)
        optimizer.zero_grad()
        for p, g in zip(params, grads):
            p.grad = g.detach().clone()
        optimizer.step()

        record = LossRecord(
            step=len(records) + 1,
            l_diff=float(l_diff.detach()),
            l_match=float(l_match.detach()),
            l_total=float(l_total.detach()),
            c_layers=_layer_scores(graphs, config.layers),
        )
        records.append(record)
        if record.step % config.log_every == 0 or record.step == config.steps:
            logger.info(
                "step %d: l_diff %.5f l_match %.5f l_total %.5f c_mean %.4f",
                record.step, record.l_diff, record.l_match, record.l_total, record.c_mean,
            )
    return model, records


@torch.no_grad()
def evaluate_ic(model, scenes, config, oracle=False):
    """
    Per-scene C at every layer without touching the parameters. With
    ``oracle`` the generated features are replaced by the target features.
    """
    scenes = list(scenes)
    if not scenes:
        raise DomainError("evaluate_ic: no scenes")
    match_config = model.match_config(config.background_mask, config.mode)
    per_scene = []
    for scene in scenes:
        f_gen = scene.target_features if oracle else model(scene.cue)
        graphs, _ = build_multiscale(scene.f_ref, f_gen, scene.masks_ref, scene.masks_gen, scene.gt, match_config)
        per_scene.append(_layer_scores(graphs, config.layers))
    result = EvalResult(per_scene)
    logger.info("evaluated %d scenes: mean C %.4f", len(scenes), result.mean)
    return result


def _fmt(value):
    return repr(float(value))


def write_metrics_csv(path, records, layers):
    fieldnames = ["step", "l_diff", "l_match", "l_total", "c_mean"] + [f"c_l{n}" for n in range(1, layers + 1)]
    rows = []
    for record in records:
        row = {
            "step": record.step,
            "l_diff": _fmt(record.l_diff),
            "l_match": _fmt(record.l_match),
            "l_total": _fmt(record.l_total),
            "c_mean": _fmt(record.c_mean),
        }
        row.update({f"c_l{n}": _fmt(c) for n, c in enumerate(record.c_layers, start=1)})
        rows.append(row)
    formats.write_csv(path, fieldnames, rows)


def write_eval_csv(path, result, layers):
    """One row per scene, then a ``mean`` row with the per-layer and overall means."""
    fieldnames = ["scene"] + [f"c_l{n}" for n in range(1, layers + 1)] + ["c_mean"]
    rows = []
    for k, scores in enumerate(result.per_scene):
        row = {"scene": k, "c_mean": _fmt(result.scene_mean(k))}
        row.update({f"c_l{n}": _fmt(c) for n, c in enumerate(scores, start=1)})
        rows.append(row)
    row = {"scene": "mean", "c_mean": _fmt(result.mean)}
    row.update({f"c_l{n}": _fmt(c) for n, c in enumerate(result.layer_means, start=1)})
    rows.append(row)
    formats.write_csv(path, fieldnames, rows)


def save_model(path, model):
    formats.write_tensor(path, parameters_to_vector(model.parameters()).detach())


def load_model(path, model):
    vector = formats.read_tensor(path)
    expected = sum(p.numel() for p in model.parameters())
    if vector.dim() != 1 or vector.numel() != expected:
        raise FormatError(f"model file holds {vector.numel()} values, the model needs {expected}", position=str(path))
    with torch.no_grad():
        vector_to_parameters(vector.to(model.generator.dtype), model.parameters())
    return model
