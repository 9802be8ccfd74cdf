"""Compare the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times each kernel on detector-sized inputs, then one full training step
(forward, backward, SGD update) at the default configuration, under both
backends. Prints median milliseconds and the speedup.
"""

import argparse
import statistics
import time

import numpy as np

from ssdpose import kernels
from ssdpose.config import RunConfig
from ssdpose.datagen import SceneSpec, generate_dataset, sprite_polygon
from ssdpose.model import SGD, build, train_step
from ssdpose.targets import BatchTargets, encode_targets


def timed(fn, repeat):
    fn()  # warm-up
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out) * 1e3


def cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(32, 16, 32, 32)).astype(np.float32)
    cols = rng.normal(size=(32, 16 * 9, 32 * 32)).astype(np.float32)
    pool_in = rng.normal(size=(32, 32, 32, 32)).astype(np.float32)
    pooled, arg = kernels._fallback.maxpool2_forward(pool_in)
    xy = rng.uniform(0, 0.8, size=(400, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(0.05, 0.3, size=(400, 2))], axis=1)
    scores = rng.uniform(size=400)
    poly = sprite_polygon(0, 33.0, 24.0, (32.0, 32.0))

    cfg = RunConfig().updated({"batch_size": 32})
    imgs, objs = generate_dataset(SceneSpec(seed=0), 32)
    net = build(cfg.network_spec(), cfg.head_config(), cfg.layer_specs())
    t = BatchTargets.stack([encode_targets(net.defaults, o, cfg.n_bins) for o in objs])
    batch = (imgs.astype(np.float32) / 255)[:, None]
    opt = SGD(lr=0.0)

    return {
        "im2col 3x3 [32,16,32,32]": lambda: kernels.im2col(x, 3, 1, 1),
        "col2im 3x3 [32,16,32,32]": lambda: kernels.col2im(cols, x.shape, 3, 1, 1),
        "maxpool fwd [32,32,32,32]": lambda: kernels.maxpool2_forward(pool_in),
        "maxpool bwd [32,32,16,16]": lambda: kernels.maxpool2_backward(pooled, arg),
        "nms 400 boxes": lambda: kernels.nms(boxes, scores, 0.45),
        "sprite coverage 64x64 ss4": lambda: kernels.polygon_coverage(poly, 64, 64, 4),
        "train step (batch 32)": lambda: train_step(net, batch, t, opt),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=15)
    args = ap.parse_args()
    try:
        kernels.set_backend("cython")
        have_ext = True
    except ImportError:
        have_ext = False
    results = {}
    for backend in (["cython"] if have_ext else []) + ["python"]:
        kernels.set_backend(backend)
        for name, fn in cases().items():
            results.setdefault(name, {})[backend] = timed(fn, args.repeat)
    print(f"{'kernel':<28}{'cython ms':>11}{'python ms':>11}{'speedup':>9}")
    for name, r in results.items():
        c = r.get("cython")
        p = r["python"]
        cs = f"{c:>11.3f}" if c is not None else f"{'n/a':>11}"
        sp = f"{p / c:>8.2f}x" if c else f"{'-':>9}"
        print(f"{name:<28}{cs}{p:>11.3f}{sp}")


if __name__ == "__main__":
    main()
