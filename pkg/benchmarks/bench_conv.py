"""Time the compiled kernels against the numpy fallback.

Kernel rows call both backends in-process on the same arrays. The ``step``
row times one full training step per backend in a child process, since the
model picks its backend at import (``PAINMETER_PURE=1`` forces numpy).

    python benchmarks/bench_conv.py [--repeat 5] [--channels 25] [--no-step]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from painmeter.nn import kernels

STEP_SNIPPET = """
import json, sys, timeit
import numpy as np
from painmeter import ordinal
from painmeter.nn import kernels, model as nm
from painmeter.nn.ops import softmax
n, batch, repeat = int(sys.argv[1]), int(sys.argv[2]), int(sys.argv[3])
arch = nm.cnn_architecture(n, 1000, 7, filters=8)
rng = np.random.default_rng(0)
p = nm.init_params(arch, rng)
x = rng.standard_normal((batch, n, 1000))
y = rng.integers(0, 7, batch)
masks = nm.draw_dropout_masks(arch, batch, rng)
def step():
    lg, cache = nm.forward_chunks(p, [x], "train", masks)
    g = ordinal.mean_loss_and_grad(softmax(lg[0]), y)[1]
    nm.backward_chunks(p, cache, [g])
step()
print(json.dumps({"backend": kernels.BACKEND, "seconds": min(timeit.repeat(step, number=1, repeat=repeat))}))
"""


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(n_channels, batch):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, 1, n_channels, 1000))
    w = rng.standard_normal((8, 1, 3, 25))
    b = np.zeros(8)
    z = kernels.conv2d_forward(x, w, b)
    dy = rng.standard_normal(z.shape)
    C = z.shape[1]
    mu, inv = z.mean(axis=(0, 2, 3)), 1.0 / z.std(axis=(0, 2, 3))
    gamma, beta = np.ones(C), np.zeros(C)
    out, idx = kernels.bn_relu_pool_forward(z, mu, inv, gamma, beta, (1, 4))
    dout = rng.standard_normal(out.shape)
    du, s1, s2 = kernels.bn_relu_pool_stats(dout, idx, z, mu, inv, gamma, beta)
    count = z.size // C
    return {
        "conv forward": lambda be: kernels.conv2d_forward(x, w, b, backend=be),
        "conv weight grad": lambda be: kernels.conv2d_backward(x, w, dy, need_input_grad=False, backend=be),
        "conv input grad": lambda be: kernels.conv2d_backward(x, w, dy, backend=be),
        "bn+relu+pool forward": lambda be: kernels.bn_relu_pool_forward(z, mu, inv, gamma, beta, (1, 4), backend=be),
        "bn+relu+pool backward": lambda be: (
            kernels.bn_relu_pool_stats(dout, idx, z, mu, inv, gamma, beta, backend=be),
            kernels.bn_relu_pool_input_grad(du, idx, z, mu, inv, gamma, s1, s2, count, True, backend=be)),
    }


def full_step(pure, n_channels, batch, repeat):
    env = dict(os.environ)
    env.pop("PAINMETER_PURE", None)
    if pure:
        env["PAINMETER_PURE"] = "1"
    res = subprocess.run([sys.executable, "-c", STEP_SNIPPET, str(n_channels), str(batch), str(repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--channels", type=int, default=25)
    ap.add_argument("--batch", type=int, default=24)
    ap.add_argument("--no-step", action="store_true", help="skip the full training-step comparison")
    args = ap.parse_args(argv)

    if kernels.BACKEND != "compiled":
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
        return 1
    print(f"{'kernel':<24}{'numpy ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, fn in kernel_cases(args.channels, args.batch).items():
        t_np = best_of(lambda: fn("numpy"), args.repeat)
        t_c = best_of(lambda: fn("compiled"), args.repeat)
        print(f"{name:<24}{t_np * 1e3:>12.2f}{t_c * 1e3:>14.2f}{t_np / t_c:>9.1f}x")
    if not args.no_step:
        pure = full_step(True, args.channels, args.batch, args.repeat)
        comp = full_step(False, args.channels, args.batch, args.repeat)
        assert (pure["backend"], comp["backend"]) == ("numpy", "compiled")
        print(f"{'training step':<24}{pure['seconds'] * 1e3:>12.2f}{comp['seconds'] * 1e3:>14.2f}"
              f"{pure['seconds'] / comp['seconds']:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
