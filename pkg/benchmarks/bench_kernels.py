"""Compare the compiled kernels against the numpy fallback.

Times each kernel family on transformer-shaped inputs, then a full
training step on the small reference model with each backend.

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from vitsurgery import kernels, rng
from vitsurgery.data import gen_domain
from vitsurgery.experiment import REFERENCE
from vitsurgery.model import ViTConfig, build_vit, forward_logits
from vitsurgery.optim import SGD
from vitsurgery.peft import build_freeze_mask
from vitsurgery.tensor import backward, cross_entropy


def _time(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(repeats):
    g = rng.generator(1)
    rows, width = 2048, 768
    x = np.ascontiguousarray(g.uniform(-4, 4, size=(rows, width)).astype(np.float32))
    gy = np.ascontiguousarray(g.uniform(-1, 1, size=(rows, width)).astype(np.float32))
    gamma = np.ascontiguousarray(g.uniform(0.5, 2, size=width).astype(np.float32))
    beta = np.ascontiguousarray(g.uniform(-1, 1, size=width).astype(np.float32))
    flat = np.ascontiguousarray(x.reshape(-1))
    gflat = np.ascontiguousarray(gy.reshape(-1))
    logits = np.ascontiguousarray(x[:, :100])
    labels = np.ascontiguousarray(g.integers(0, 100, size=rows), dtype=np.int64)
    param = np.ascontiguousarray(g.uniform(-1, 1, size=rows * 64).astype(np.float32))
    vel = np.zeros_like(param)
    grad = np.ascontiguousarray(g.uniform(-1, 1, size=rows * 64).astype(np.float32))

    def cases(b):
        y, mean, rstd = b.layer_norm_forward(x, gamma, beta, 1e-6)
        sm = b.softmax_forward(x)
        _, cdf = b.gelu_forward(flat)
        _, probs = b.cross_entropy_forward(logits, labels)
        return [
            ("layer_norm fwd", lambda: b.layer_norm_forward(x, gamma, beta, 1e-6)),
            ("layer_norm bwd", lambda: b.layer_norm_backward(gy, x, mean, rstd, gamma)),
            ("softmax fwd", lambda: b.softmax_forward(x)),
            ("softmax bwd", lambda: b.softmax_backward(sm, gy)),
            ("gelu fwd", lambda: b.gelu_forward(flat)),
            ("gelu bwd", lambda: b.gelu_backward(flat, cdf, gflat)),
            ("cross_entropy fwd", lambda: b.cross_entropy_forward(logits, labels)),
            ("cross_entropy bwd", lambda: b.cross_entropy_backward(probs, labels, 1.0)),
            ("sgd update", lambda: b.sgd_update(param, grad, vel, 0.01, 0.9)),
        ]

    names = [name for name, _ in cases(kernels.backend("python"))]
    results = {}
    for backend_name in kernels.available():
        b = kernels.backend(backend_name)
        results[backend_name] = [_time(fn, repeats) for _, fn in cases(b)]

    print(f"\nper-kernel time on ({rows}, {width}) float32, best of {repeats}:")
    header = f"{'kernel':<20}" + "".join(f"{n:>12}" for n in results)
    if len(results) > 1:
        header += f"{'speedup':>10}"
    print(header)
    for i, name in enumerate(names):
        line = f"{name:<20}" + "".join(f"{results[b][i] * 1e3:>10.3f}ms" for b in results)
        if len(results) > 1:
            py, cx = results["python"][i], results["compiled"][i]
            line += f"{py / cx:>9.2f}x"
        print(line)


def bench_train_step(repeats):
    cfg = ViTConfig(**REFERENCE["model"])
    data = gen_domain("bench", seed=3, num_classes=cfg.num_classes, n=64,
                      image_size=cfg.image_size)
    split = data.train_split()
    images, labels = split.images[:32], split.labels[:32]

    def step_factory(backend_name):
        model = build_vit(cfg, seed=4)
        mask = build_freeze_mask(model, "full")
        named = model.named_parameters()
        opt = SGD([t for _, t in named], [mask.flags[n] for n, _ in named], lr=0.01)

        def step():
            prev = kernels.use(backend_name)
            try:
                loss = cross_entropy(forward_logits(model, images), labels)
                opt.zero_grad()
                backward(loss)
                opt.step()
            finally:
                kernels.use(prev)

        return step

    print("\nfull train step (batch 32, small reference model):")
    times = {}
    for backend_name in kernels.available():
        times[backend_name] = _time(step_factory(backend_name), repeats)
        print(f"  {backend_name:<10} {times[backend_name] * 1e3:8.1f} ms")
    if len(times) > 1:
        print(f"  speedup    {times['python'] / times['compiled']:8.2f} x")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    print(f"backends available: {', '.join(kernels.available())}")
    bench_kernels(args.repeats)
    bench_train_step(args.repeats)


if __name__ == "__main__":
    main()
