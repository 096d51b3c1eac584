"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Every kernel is also checked for bitwise agreement between the two backends.
"""
import argparse
import timeit

import numpy as np

from hive3d import _kernels
from hive3d import model as cnn
from hive3d import tensor as T


def cases(rng):
    x = rng.uniform(0, 1, (16, 16, 10, 34, 34)).astype(np.float32)  # block 2 input, padded
    k, s = (3, 3, 3), (1, 1, 1)
    out = (8, 32, 32)
    cols = _kernels.vol2col(x, k, s, out)
    pooled_in = rng.uniform(0, 1, (16, 16, 8, 64, 64)).astype(np.float32)
    pooled, index = _kernels.maxpool3d_forward(pooled_in, (2, 2, 2), (2, 2, 2), (4, 32, 32))
    img = np.ones((64, 64), np.float32)
    segs = rng.uniform(0, 63, (200, 4))
    batch = rng.uniform(0, 1, (16, 1, 8, 64, 64)).astype(np.float32)
    params = cnn.init(0)

    def strokes():
        im = img.copy()
        for x0, y0, x1, y1 in segs:
            _kernels.stroke_segment(im, x0, y0, x1, y1, 2.0, 0.5)
        return im

    return {
        "vol2col": lambda: _kernels.vol2col(x, k, s, out),
        "col2vol": lambda: _kernels.col2vol(cols, x.shape, k, s, out),
        "maxpool fwd": lambda: _kernels.maxpool3d_forward(pooled_in, (2, 2, 2), (2, 2, 2), (4, 32, 32))[0],
        "maxpool bwd": lambda: _kernels.maxpool3d_backward(pooled, index, pooled_in.shape),
        "200 strokes": strokes,
        "model fwd B=16": lambda: cnn.logits(params, T.Tensor(batch)).data,
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = _kernels.available()
    print(f"backends: {', '.join(backends)}")
    results = {}
    for name in backends:
        _kernels.use(name)
        for case, fn in cases(np.random.default_rng(0)).items():
            fn()  # warm up
            best = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            results.setdefault(case, {})[name] = (best, fn())
    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in backends) + ("   speedup  identical" if len(backends) > 1 else ""))
    for case, row in results.items():
        line = f"{case:<16}" + "".join(f"{row[b][0] * 1e3:>10.2f}ms" for b in backends)
        if len(backends) > 1:
            same = np.array_equal(row["native"][1], row["python"][1])
            line += f"   {row['python'][0] / row['native'][0]:>6.1f}x  {same}"
        print(line)


if __name__ == "__main__":
    main()
