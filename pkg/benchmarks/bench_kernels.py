"""Time the compiled and numpy kernel backends on representative inputs.

    python benchmarks/bench_kernels.py [--repeat N] [--json FILE]

Besides the raw kernels it times one toy-network training step with each
backend active, and checks that both backends agree bit for bit.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from cctn import kernels
from cctn import network as N


def cases(rng):
    x = rng.standard_normal((16, 98, 98))
    cols = rng.standard_normal((16 * 9, 96 * 96))
    pool_in = rng.standard_normal((32, 96, 96))
    mask = rng.random((256, 256)) < 0.45
    up = rng.standard_normal((32, 48, 48))
    arg = kernels.get_backend("python").maxpool2_forward(pool_in)[1]
    return {
        "im2col 16x98x98 k3": lambda k: k.im2col(x, 3, 3, 1),
        "col2im 16x96x96 k3": lambda k: k.col2im(cols, 16, 98, 98, 3, 3, 1),
        "maxpool2 fwd 32x96x96": lambda k: k.maxpool2_forward(pool_in),
        "maxpool2 bwd 32x96x96": lambda k: k.maxpool2_backward(up, arg, 96, 96),
        "label8 256x256": lambda k: k.label8(mask),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(p, q) for p, q in zip(a, b))
    if isinstance(a, np.ndarray):
        return a.shape == b.shape and np.array_equal(a, b)
    return a == b


def bench(repeat=5):
    rng = np.random.default_rng(0)
    names = sorted(kernels.BACKENDS)
    rows = []
    for label, fn in cases(rng).items():
        times = {}
        outs = {}
        for name in names:
            k = kernels.get_backend(name)
            outs[name] = fn(k)
            n = 3
            times[name] = min(timeit.repeat(lambda: fn(k), number=n, repeat=repeat)) / n
        agree = all(_same(outs[names[0]], outs[o]) for o in names[1:])
        rows.append((label, times, agree))

    # one training step of the toy network
    graph = N.build_cctn_graph("coarse", 0.125)
    weights = N.init_weights(graph, 0, "he")
    x = rng.standard_normal((3, 96, 96)) * 0.2
    target = (rng.random((96, 96)) < 0.3).astype(float)
    times, losses = {}, {}
    prev = kernels.BACKEND
    try:
        for name in names:
            kernels.set_backend(name)
            losses[name] = N.loss_and_grads(graph, weights, x, target)[0]
            times[name] = min(timeit.repeat(lambda: N.loss_and_grads(graph, weights, x, target),
                                            number=2, repeat=repeat)) / 2
    finally:
        kernels.set_backend(prev)
    rows.append(("toy train step 96x96", times, len(set(losses.values())) == 1))
    return names, rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    names, rows = bench(args.repeat)
    head = f"{'case':28s}" + "".join(f"{n + ' ms':>14s}" for n in names)
    if "cython" in names:
        head += f"{'speedup':>10s}"
    print(head + "  identical")
    for label, times, agree in rows:
        line = f"{label:28s}" + "".join(f"{times[n] * 1e3:14.3f}" for n in names)
        if "cython" in names:
            line += f"{times['python'] / times['cython']:10.1f}x"
        print(line + f"  {'yes' if agree else 'NO'}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump([{"case": l, "seconds": t, "identical": a} for l, t, a in rows], f, indent=2)
    return 0 if all(a for _, _, a in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
