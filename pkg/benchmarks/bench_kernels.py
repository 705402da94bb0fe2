"""Compare the compiled and pure-NumPy kernels on full-size inputs.

Usage: ``python benchmarks/bench_kernels.py [--repeat R]``
"""
import argparse
import timeit

import numpy as np

from fockdamp import _core
from fockdamp.numkernel import CavityParams, PhotonDistribution, Propagator, build_generator
from fockdamp.trajsim import ProbeModel, synthesize_run


def filter_inputs(seq, K, probe):
    prop = Propagator(K)
    return (np.ascontiguousarray(seq.times), np.ascontiguousarray(seq.phase_index, dtype=np.int64),
            np.ascontiguousarray(seq.outcome, dtype=np.int64), 0.0,
            PhotonDistribution.poisson(4.4).probs, np.ascontiguousarray(prop.eigenvalues),
            prop.right, prop.left, np.ascontiguousarray(probe.likelihood_table()))


def fixed_point_inputs(rng, windows=2000, atoms=25):
    probe = ProbeModel()
    table = probe.likelihood_table()
    n = rng.integers(0, 8, size=windows)
    k = rng.integers(0, 4, size=(windows, atoms))
    j = (rng.random((windows, atoms)) >= table[k, 0, n[:, None]]).astype(int)
    return np.log(table[k, j]).sum(axis=1), np.full(8, 1 / 8), 20


def bench(label, fn, args, repeat):
    best = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))
    print(f"  {label:<8s} {best * 1e3:9.2f} ms")
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _core.compiled_backend is None:
        print("compiled extension not built; only the NumPy fallback is timed")
    probe = ProbeModel()
    K = build_generator(CavityParams())
    seq = synthesize_run(CavityParams(), probe, 4.4, 0.65, 1, seed=1)[0]
    cases = [
        (f"filter_forward, one sequence ({len(seq)} detections)", "filter_forward",
         filter_inputs(seq, K, probe)),
        ("fixed_point, 2000 windows x 20 iterations", "fixed_point",
         fixed_point_inputs(np.random.default_rng(0))),
    ]
    for title, name, inputs in cases:
        print(title)
        t_py = bench("python", getattr(_core.python_backend, name), inputs, args.repeat)
        if _core.compiled_backend is not None:
            t_c = bench("cython", getattr(_core.compiled_backend, name), inputs, args.repeat)
            print(f"  speedup  {t_py / t_c:9.1f}x")


if __name__ == "__main__":
    main()
