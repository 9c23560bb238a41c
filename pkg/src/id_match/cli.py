"""
Command line entry points.

Exit status: 0 on success, 1 on usage errors (bad flags, bad run files),
2 on data errors (malformed or inconsistent inputs, I/O failures).
"""

import argparse
import logging
import sys

import torch

from id_match import formats
from id_match.errors import ConfigError, IdMatchError
from id_match.graph import FeatureMap, MatchConfig, MqaParams, build_multiscale, consistency_score, matching_loss
from id_match.guidance import GuidanceConfig, assign_identities, render_ieg, reorder_identities
from id_match.numcore import grad_check
from id_match.sampling import PairPolicy, PreClassifiedSampler, SamplerConfig, classify_pairs
from id_match.synth import SceneSpec, gen_dataset, gen_scene, load_dataset
from id_match.train import (
    ToyModel,
    TrainConfig,
    evaluate_ic,
    load_model,
    run_training,
    save_model,
    write_eval_csv,
    write_metrics_csv,
)

logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_DATA = 2


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None
    return w, h


def _probability(text):
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text!r}")
    return value


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _permutation(text):
    try:
        pairs = [item.split(":") for item in text.split(",") if item]
        return {int(a): int(b) for a, b in pairs}
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected SRC:DST,... pairs, got {text!r}") from None


# ---------------------------------------------------------------- commands

def cmd_img_score(args):
    f_ref = FeatureMap(formats.read_tensor(args.features_ref))
    f_gen = FeatureMap(formats.read_tensor(args.features_gen))
    masks_ref = formats.read_mask_dir(args.masks_ref)
    masks_gen = formats.read_mask_dir(args.masks_gen)
    _, _, gt = formats.read_matching(args.matching)

    g = torch.Generator().manual_seed(args.seed)
    config = MatchConfig([
        MqaParams.random(
            f_ref.channels, args.d, generator=g, std=args.std, tied=args.tied,
            background_mask_enabled=args.background_mask, mode=args.mode,
        )
        for _ in range(args.layers)
    ])
    graphs, skipped = build_multiscale(f_ref, f_gen, masks_ref, masks_gen, gt, config)
    if not graphs:
        raise IdMatchError("no layer produced a usable graph")
    if skipped:
        logger.warning("skipped layers %s", skipped)
    scores = [(img.layer, float(consistency_score(img))) for img in graphs]
    c = sum(value for _, value in scores) / len(scores)
    formats.write_weights_csv(args.out, graphs)
    if args.c_out:
        formats.write_consistency_csv(args.c_out, scores)
    print(f"C,{c:.6f}")


def cmd_ieg_assign(args):
    frames = formats.read_poses(args.poses)
    config = GuidanceConfig(tau=args.tau, min_confidence=args.min_confidence)
    assignments = [assign_identities(frame.persons, frame.boxes, config) for frame in frames]
    formats.write_assignments(args.out, frames, assignments)
    matched = sum(len(a.matches) for a in assignments)
    logger.info("matched %d persons over %d frames", matched, len(frames))


def cmd_ieg_render(args):
    frames = {frame.index: frame for frame in formats.read_poses(args.poses)}
    assignments = dict(formats.read_assignments(args.assign))
    index = args.frame if args.frame is not None else min(assignments)
    if index not in frames or index not in assignments:
        raise IdMatchError(f"frame {index} is missing from the poses or the assignment")
    assignment = assignments[index]
    if args.permute:
        assignment = reorder_identities(assignment, args.permute)
    width, height = args.size
    raster = render_ieg(frames[index], assignment, GuidanceConfig(), height=height, width=width)
    formats.write_ppm(args.out, raster)


def cmd_pcs_plan(args):
    positions = formats.read_positions(args.positions)
    index = classify_pairs(positions, PairPolicy(min_gap=args.min_gap, max_gap=args.max_gap))
    if args.pairs_out:
        formats.write_pair_index_csv(args.pairs_out, index)
    sampler = PreClassifiedSampler(index, SamplerConfig(rho=args.rho, seed=args.seed))
    sampler.draw_many(args.draws)
    formats.write_stats_csv(args.out, sampler.stats())


def cmd_synth_gen(args):
    spec = SceneSpec(
        height=args.height, width=args.width, channels=args.channels, chars=args.chars,
        sigma=args.sigma, cue_corruption=args.corruption,
    )
    manifest = gen_dataset(spec, args.count, args.swap_share, args.seed, args.out)
    print(manifest)


def _load_config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    config = TrainConfig.from_file(args.config, **overrides)
    if not config.manifest:
        raise ConfigError(f"{args.config}: no manifest given")
    return config


def cmd_train_demo(args):
    config = _load_config(args)
    scenes = load_dataset(config.manifest)
    model = ToyModel.for_scenes(scenes, config)
    model, records = run_training(model, config, scenes)
    write_metrics_csv(args.out, records, config.layers)
    if args.model:
        save_model(args.model, model)


def cmd_evaluate(args):
    config = _load_config(args)
    scenes = load_dataset(config.manifest)
    model = ToyModel.for_scenes(scenes, config)
    if args.model:
        load_model(args.model, model)
    result = evaluate_ic(model, scenes, config, oracle=args.oracle)
    write_eval_csv(args.out, result, config.layers)
    print(f"C,{result.mean:.6f}")


def cmd_gradcheck(args):
    scene_seed = args.seed if args.scene is None else args.scene
    scene = gen_scene(SceneSpec(height=8, width=8, channels=4, chars=2, sigma=0.1), scene_seed)
    g = torch.Generator().manual_seed(scene_seed)
    dtype = torch.float64
    f_ref = FeatureMap(scene.f_ref.values.to(dtype))
    f_gen0 = scene.target_features.values.to(dtype) + 0.1 * torch.randn(scene.f_ref.values.shape, generator=g, dtype=dtype)
    params = MqaParams.random(4, 4, generator=g, std=0.5, dtype=dtype, mode=args.mode)

    def loss(f_gen, w_q, w_k):
        config = MatchConfig([MqaParams(w_q, w_k, mode=params.mode)])
        graphs, _ = build_multiscale(f_ref, FeatureMap(f_gen), scene.masks_ref, scene.masks_gen, scene.gt, config)
        return matching_loss(graphs)

    errors = {
        "w_q": grad_check(lambda x: loss(f_gen0, x, params.w_k), params.w_q, args.eps),
        "w_k": grad_check(lambda x: loss(f_gen0, params.w_q, x), params.w_k, args.eps),
        "f_gen": grad_check(lambda x: loss(x, params.w_q, params.w_k), f_gen0, args.eps),
    }
    for name, err in errors.items():
        logger.info("%s: max relative error %.3e", name, err)
    print(f"max_rel_err,{max(errors.values()):.3e}")


# ---------------------------------------------------------------- parser

def build_parser():
    common = ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = ArgumentParser(prog="id-match", description="identity matching graph toolkit")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("img-score", parents=[common], help="score a frame pair with the matching graph")
    p.add_argument("--features-ref", required=True)
    p.add_argument("--features-gen", required=True)
    p.add_argument("--masks-ref", required=True, help="directory of P5 masks, identity = trailing number")
    p.add_argument("--masks-gen", required=True)
    p.add_argument("--matching", required=True, help="ground-truth matching JSON")
    p.add_argument("--d", type=_positive, default=16)
    p.add_argument("--mode", choices=["fast", "pairwise"], default="fast")
    p.add_argument("--layers", type=_positive, default=1)
    p.add_argument("--std", type=float, default=0.02, help="std of the random projections")
    p.add_argument("--tied", action="store_true", help="use W_K = W_Q")
    p.add_argument("--background-mask", action="store_true")
    p.add_argument("--out", default="weights.csv", help="edge weight CSV")
    p.add_argument("--c-out", default=None, help="per-layer C CSV")
    p.set_defaults(func=cmd_img_score)

    p = sub.add_parser("ieg-assign", parents=[common], help="pair poses with identity boxes")
    p.add_argument("--poses", required=True)
    p.add_argument("--tau", type=_probability, default=0.6)
    p.add_argument("--min-confidence", type=_probability, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ieg_assign)

    p = sub.add_parser("ieg-render", parents=[common], help="draw identity-colored skeletons")
    p.add_argument("--poses", required=True)
    p.add_argument("--assign", required=True)
    p.add_argument("--size", type=_size, default=(256, 256), help="WIDTHxHEIGHT")
    p.add_argument("--frame", type=int, default=None, help="frame index, defaults to the first")
    p.add_argument("--permute", type=_permutation, default=None, help="identity reordering, e.g. 0:1,1:0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ieg_render)

    p = sub.add_parser("pcs-plan", parents=[common], help="classify swap pairs and simulate sampling")
    p.add_argument("--positions", required=True)
    p.add_argument("--rho", type=_probability, default=0.3)
    p.add_argument("--draws", type=_positive, default=10000)
    p.add_argument("--min-gap", type=int, default=1)
    p.add_argument("--max-gap", type=int, default=None)
    p.add_argument("--pairs-out", default=None, help="pair index CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pcs_plan)

    p = sub.add_parser("synth-gen", parents=[common], help="write a synthetic scene dataset")
    p.add_argument("--chars", type=int, default=2)
    p.add_argument("--count", type=_positive, default=100)
    p.add_argument("--swap-share", type=_probability, default=0.3)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--corruption", type=_probability, default=0.0, help="cue corruption probability")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train-demo", parents=[common], help="train the toy model")
    p.add_argument("--config", required=True, help="key=value run file")
    p.add_argument("--steps", type=_positive, default=None, help="override the run file")
    p.add_argument("--model", default=None, help="save the trained parameters here")
    p.add_argument("--out", required=True, help="metrics CSV")
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("evaluate", parents=[common], help="measure C without training")
    p.add_argument("--config", required=True)
    p.add_argument("--model", default=None, help="parameters saved by train-demo")
    p.add_argument("--oracle", action="store_true", help="use target features as the generated ones")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the matching loss")
    p.add_argument("--scene", type=int, default=None, help="scene seed, defaults to --seed")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--mode", choices=["fast", "pairwise"], default="fast")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.seed is None and args.cmd not in ("train-demo", "evaluate"):
        args.seed = 0
    try:
        args.func(args)
    except ConfigError as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (IdMatchError, OSError) as e:
        print(f"{parser.prog}: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0
