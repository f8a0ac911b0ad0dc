"""Compare the compiled kernels with the numpy fallback on frame-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the best-of-N wall time for each backend and
the speed-up. Exits with status 1 if the extension is not built.
"""
import argparse
import sys
import timeit

import numpy as np

from tissuescan import _fallback
from tissuescan.phantom import BACKGROUND_RGB, make_phantom
from tissuescan.se3 import compose, rot_x, translate
from tissuescan.surface import default_camera

try:
    from tissuescan import _kernels
except ImportError:
    _kernels = None


def cases():
    """(name, args for the compiled call, args for the fallback call)."""
    rng = np.random.default_rng(0)
    k = default_camera()
    surf = make_phantom(0)
    pose = compose(surf.mounting, translate(1.0, 0.5, 0.0))
    ray = (surf.heights, surf.albedo, surf.x0, surf.y0, surf.spacing, np.array(pose.rotation, order="C"),
           np.array(pose.translation), k.fx, k.fy, k.cx, k.cy, k.width, k.height)
    _, albedo, valid = _fallback.raycast_heightfield(*ray)
    noise = rng.standard_normal((k.height, k.width, 3)).astype(np.float32)
    base = np.asarray(surf.base_rgb) * 255.0
    bg = np.asarray(BACKGROUND_RGB)
    image = _fallback.shade_image(albedo, valid, base, bg, noise, 1.0)
    gray = image.mean(axis=2) / 255.0
    search = np.ascontiguousarray(gray[200:255, 300:350])
    template = np.ascontiguousarray(gray[215:240, 315:335])
    hsv = (0.0, 50.0, 0.35, 1.0, 0.1, 1.0)
    return [
        ("ncc_surface 55x50 / 25x20", (search, template), (search, template)),
        ("raycast_heightfield 720x576", ray, ray),
        ("shade_image 720x576", (albedo, valid.view(np.uint8), base, bg, noise, 1.0),
         (albedo, valid, base, bg, noise, 1.0)),
        ("hsv_box_mask 720x576", (image, *hsv), (image, *hsv)),
    ]


def best_time(fn, args, repeat: int) -> float:
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.2 and number < 10_000:
        number *= 4
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; run `pip install --no-build-isolation -e .`", file=sys.stderr)
        return 1
    rows = []
    for name, c_args, f_args in cases():
        fn = name.split()[0]
        tc = best_time(getattr(_kernels, fn), c_args, args.repeat)
        tf = best_time(getattr(_fallback, fn), f_args, args.repeat)
        rows.append((name, tc, tf))
    print(f"{'kernel':<30} {'compiled ms':>12} {'fallback ms':>12} {'speed-up':>9}")
    for name, tc, tf in rows:
        print(f"{name:<30} {tc * 1e3:>12.3f} {tf * 1e3:>12.3f} {tf / tc:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
