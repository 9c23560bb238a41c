import datetime
import logging
import pathlib
import torch
from torch.utils import benchmark

from id_match import formats
from id_match.graph import MqaParams, build_img
from id_match.synth import SceneSpec, gen_scene


configs = [
    {"m": m, "size": size, "mode": mode}
    for size in [16, 32, 64]
    for m in [2, 3, 4, 5]
    for mode in ["fast", "pairwise"]
]


def bench_img(m, size, mode, channels=8, d=16, min_run_time=0.5):
    scene = gen_scene(SceneSpec(height=size, width=size, channels=channels, chars=m, swap=True, sigma=0.1), seed=0)
    params = MqaParams.random(channels, d, generator=torch.Generator().manual_seed(0), mode=mode)
    timer = benchmark.Timer(
        stmt="build_img(f_ref, f_gen, masks_ref, masks_gen, gt, params)",
        globals={
            "build_img": build_img, "f_ref": scene.f_ref, "f_gen": scene.target_features,
            "masks_ref": scene.masks_ref, "masks_gen": scene.masks_gen, "gt": scene.gt, "params": params,
        },
        num_threads=1,
    )
    measurement = timer.blocked_autorange(min_run_time=min_run_time)
    return measurement.median * 1e3


def run(output_dir):
    rows = []
    for config in configs:
        ms = bench_img(**config)
        logging.info(f"m: {config['m']}, size: {config['size']}, mode: {config['mode']}, {ms:.3f} ms")
        rows.append({**config, "ms": f"{ms:.4f}"})
    # pairwise runs one attention per reference character; fast runs one in total
    for size in sorted({row["size"] for row in rows}):
        for m in sorted({row["m"] for row in rows}):
            by_mode = {row["mode"]: float(row["ms"]) for row in rows if row["size"] == size and row["m"] == m}
            print(f"size {size:3d} m {m}: pairwise / fast = {by_mode['pairwise'] / by_mode['fast']:.2f}")
    formats.write_csv(output_dir / "img_timing.csv", ["size", "m", "mode", "ms"], rows)


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    today = datetime.date.today().strftime(format("%Y%m%d"))
    output_dir = pathlib.Path(f"results_img_{today}")
    output_dir.mkdir(exist_ok=True)
    run(output_dir)
