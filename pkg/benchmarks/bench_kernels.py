"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--batch 32]

Shapes follow the 2-layer CIFAR CNN (conv 5x5 on 3x32x32, 2x2 max pool).
The last block times one forward+backward pass of that model under each
backend, in a fresh interpreter so backend selection happens at import.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from flexchill import kernels

MODEL_SNIPPET = """
import time
import numpy as np
from flexchill.models import ModelSpec, build_model
from flexchill.nn import Tape, ce_loss_t
m = build_model(ModelSpec("cnn2_cifar"), 0)
rng = np.random.default_rng(0)
x = rng.normal(size=({batch}, 3, 32, 32))
y = rng.integers(0, 10, size={batch})
best = float("inf")
for _ in range({repeat}):
    t0 = time.perf_counter()
    with Tape() as tape:
        loss = ce_loss_t(m.forward(x, train=True), y, 0.5)
    tape.backward(loss)
    best = min(best, time.perf_counter() - t0)
print(best)
"""


def kernel_cases(batch: int, rng):
    x = rng.normal(size=(batch, 3, 36, 36))  # 32x32 padded by 2
    cols = rng.normal(size=(batch * 32 * 32, 3 * 5 * 5))
    pool_in = rng.normal(size=(batch, 6, 32, 32))
    _, arg = kernels.load_backend("python").maxpool_forward(pool_in, 2, 2)
    grad = rng.normal(size=(batch, 6, 16, 16))
    return {
        "im2col": lambda k: k.im2col(x, 5, 5, 1, 1),
        "col2im": lambda k: k.col2im(cols, batch, 3, 36, 36, 5, 5, 1, 1),
        "maxpool_forward": lambda k: k.maxpool_forward(pool_in, 2, 2),
        "maxpool_backward": lambda k: k.maxpool_backward(grad, arg, 32, 32, 2, 2),
    }


def best_time(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--skip-model", action="store_true", help="only time the raw kernels")
    args = ap.parse_args(argv)

    backends = {"python": kernels.load_backend("python")}
    try:
        backends["cython"] = kernels.load_backend("cython")
    except ImportError:
        print("compiled kernels not built; timing the numpy fallback only")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}" + "".join(f"{b:>12}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name, call in kernel_cases(args.batch, rng).items():
        times = {b: best_time(lambda: call(k), args.repeat) for b, k in backends.items()}
        row = f"{name:<18}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
        if "cython" in times:
            row += f"   {times['python'] / times['cython']:>6.2f}x"
        print(row)

    if args.skip_model:
        return
    snippet = MODEL_SNIPPET.format(batch=args.batch, repeat=max(3, args.repeat // 4))
    model_times = {}
    for b in backends:
        env = dict(os.environ, FLEXCHILL_PURE_PYTHON="1" if b == "python" else "0")
        out = subprocess.run([sys.executable, "-c", snippet], env=env, capture_output=True, text=True, check=True)
        model_times[b] = float(out.stdout.strip())
    row = f"{'cnn2 fwd+bwd':<18}" + "".join(f"{model_times[b] * 1e3:>10.2f}ms" for b in backends)
    if "cython" in model_times:
        row += f"   {model_times['python'] / model_times['cython']:>6.2f}x"
    print(row)


if __name__ == "__main__":
    main()
