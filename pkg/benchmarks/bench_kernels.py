"""Time the identity-matching kernels on both backends.

    python benchmarks/bench_kernels.py [--users 256] [--items 1000] [--dim 64] [--identities 4]
"""

import argparse
import timeit

import numpy as np

from chainrec import kernels


def make_inputs(B, V, d, M, L, rho, seed=0):
    g = np.random.default_rng(seed)
    phat = g.normal(size=(M, B, d))
    phat /= np.linalg.norm(phat, axis=-1, keepdims=True)
    qhat = g.normal(size=(V, d))
    qhat /= np.linalg.norm(qhat, axis=-1, keepdims=True)
    H = g.normal(size=(L, d))
    keep = (g.random((B, V, d)) >= rho).astype(np.uint8) if rho > 0 else None
    scale = 1.0 / (1.0 - rho)
    return phat, qhat, H, keep, scale, g.normal(size=(L, B, V))


def bench(backend, inputs, threads, repeat):
    phat, qhat, H, keep, scale, dR1 = inputs
    fwd = lambda: kernels.match_forward(phat, qhat, H, keep, scale, threads, backend=backend)
    R1, arg = fwd()
    dR1 = dR1 * (R1 > 0)
    bwd = lambda: kernels.match_backward(phat, qhat, H, keep, scale, arg, dR1, backend=backend)
    t_f = min(timeit.repeat(fwd, number=1, repeat=repeat))
    t_b = min(timeit.repeat(bwd, number=1, repeat=repeat))
    return t_f, t_b, (R1, arg, bwd())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--users", type=int, default=256)
    ap.add_argument("--items", type=int, default=1000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--identities", type=int, default=4)
    ap.add_argument("--levels", type=int, default=1, help="heads: 1 for the chain, K for CP")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"batch {args.users} users x {args.items} items, d={args.dim}, M={args.identities}, "
          f"L={args.levels}, threads={args.threads}; backends: {', '.join(backends)}")
    print(f"{'mode':<8} {'backend':<9} {'forward s':>10} {'backward s':>11}")
    for rho in (0.0, 0.5):
        inputs = make_inputs(args.users, args.items, args.dim, args.identities, args.levels, rho)
        outs = {}
        for b in backends:
            t_f, t_b, outs[b] = bench(b, inputs, args.threads, args.repeat)
            mode = "eval" if rho == 0 else "dropout"
            print(f"{mode:<8} {b:<9} {t_f:>10.4f} {t_b:>11.4f}")
        if len(outs) == 2:
            a, c = outs["python"], outs["compiled"]
            err = max(np.abs(a[0] - c[0]).max(), *(np.abs(x - y).max() for x, y in zip(a[2], c[2])))
            same_arg = np.array_equal(a[1], c[1])
            print(f"{'':<8} max |python - compiled| = {err:.2e}, argmax identical: {same_arg}")


if __name__ == "__main__":
    main()
