"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from evimr import kernels


def workloads(rng):
    n = 20_000
    nig = (rng.normal(size=n), rng.normal(size=n), rng.uniform(0.1, 5, n),
           rng.uniform(1.1, 8, n), rng.uniform(0.1, 5, n))
    m = 400
    s = rng.uniform(0, 0.8, m)
    e = s + rng.uniform(0.01, 0.2, m)
    sc = rng.random(m)
    tp = (rng.random(5000) < 0.3).astype(float)
    return {
        "nig_nll (20k)": lambda k: k.nig_nll(*nig),
        "nig_nll_grad (20k)": lambda k: k.nig_nll_grad(*nig),
        "nms (400 dets)": lambda k: k.nms(s, e, sc, 0.7),
        "envelope_ap (5k)": lambda k: k.envelope_ap(tp, 2000),
        "lgamma x1000": lambda k: [k.lgamma(1.5 + i * 1e-3) for i in range(1000)],
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    found = kernels.backends()
    jobs = workloads(np.random.default_rng(0))
    names = sorted(found)
    print(f"{'kernel':22s}" + "".join(f"{n:>14s}" for n in names) + ("   speedup" if len(names) == 2 else ""))
    for label, fn in jobs.items():
        times = []
        for n in names:
            k = found[n]
            times.append(min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)))
        line = f"{label:22s}" + "".join(f"{t * 1e3:12.3f}ms" for t in times)
        if len(times) == 2:
            speedup = times[names.index("python")] / times[names.index("cython")]
            line += f"   {speedup:7.1f}x"
        print(line)


if __name__ == "__main__":
    main()
