"""Time the compiled and pure-Python Levenshtein kernels on n-best-shaped input.

    python3 benchmarks/bench_kernels.py [--utterances N] [--repeat R]
"""

import argparse
import timeit

import numpy as np

from mwds import _levenshtein_py as fallback

try:
    from mwds import _levenshtein as compiled
except ImportError:
    compiled = None


def workload(rng, utterances, nbest=10, vocab=200):
    out = []
    for _ in range(utterances):
        ref = rng.integers(0, vocab, int(rng.integers(5, 15)))
        hyps = [rng.integers(0, vocab, int(rng.integers(3, 17))) for _ in range(nbest)]
        out.append((ref, hyps))
    return out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--utterances", type=int, default=2000)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    data = workload(np.random.default_rng(0), args.utterances)
    backends = {"python": fallback}
    if compiled is not None:
        backends["cython"] = compiled
    else:
        print("compiled kernel not built; timing the fallback only")
    times = {}
    for name, mod in backends.items():
        run = lambda: [mod.edit_distances_ids(r, h) for r, h in data]  # noqa: E731
        times[name] = min(timeit.repeat(run, number=1, repeat=args.repeat))
        print(f"{name:<8} {times[name] * 1e3:9.1f} ms for {args.utterances} n-best lists")
    if len(times) == 2:
        print(f"speedup  {times['python'] / times['cython']:9.1f}x")


if __name__ == "__main__":
    main()
