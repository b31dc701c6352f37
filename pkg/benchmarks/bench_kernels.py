"""Compare the compiled kernels with the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--links 30] [--hours 168] [--repeat 3]
"""
import argparse
import time

import numpy as np

from stgnpp import _kernels_py, kernels
from stgnpp import synthgen as sg


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def simulate_with(backend, graph, gt, hours, seed):
    saved = kernels.thin_chunk
    kernels.thin_chunk = backend.thin_chunk
    try:
        return sg.simulate_events(graph, gt, hours, seed)
    finally:
        kernels.thin_chunk = saved


def oracle_queries(backend, gt, events, n_queries, seed):
    onsets = [np.array([e.t_occ / 60 for e in evs]) for evs in events]
    ends = [np.array([e.end / 60 for e in evs]) for evs in events]
    nbrs = [np.sort(np.concatenate([onsets[m] for m in gt.neighbors[n]] or [np.zeros(0)]))
            for n in range(gt.n_links)]
    rng = np.random.default_rng(seed)
    horizon = max(float(e.max()) for e in ends if len(e))
    total = 0.0
    for _ in range(n_queries):
        n = int(rng.integers(0, gt.n_links))
        t = float(rng.uniform(0, horizon))
        k = int(np.searchsorted(onsets[n], t))
        total += backend.hazard_median(t, gt.mu[n], gt.profile, gt.beta, gt.gamma,
                                       nbrs[n][:np.searchsorted(nbrs[n], t)], onsets[n][:k], ends[n][:k], 1e-9)
    return total


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--links", type=int, default=30)
    ap.add_argument("--hours", type=float, default=168.0)
    ap.add_argument("--queries", type=int, default=300)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    try:
        from stgnpp import _kernels as compiled
    except ImportError:
        print("compiled extension not built; only the Python fallback is available")
        return

    graph = sg.gen_graph(args.links, min(3, args.links - 1), 0)
    mu = np.random.default_rng([0, 1]).uniform(0.5, 1.5, args.links)
    gt = sg.GroundTruthIntensity.for_graph(graph, mu, sg.peak_profile(), beta=0.3)

    rows = []
    t_c, ev_c = best_of(lambda: simulate_with(compiled, graph, gt, args.hours, 1), args.repeat)
    t_p, ev_p = best_of(lambda: simulate_with(_kernels_py, graph, gt, args.hours, 1), args.repeat)
    assert ev_c == ev_p, "backends disagree"
    rows.append(("thinning", t_c, t_p, sum(len(e) for e in ev_c)))

    q_c, r_c = best_of(lambda: oracle_queries(compiled, gt, ev_c, args.queries, 2), args.repeat)
    q_p, r_p = best_of(lambda: oracle_queries(_kernels_py, gt, ev_c, args.queries, 2), args.repeat)
    assert r_c == r_p, "backends disagree"
    rows.append(("oracle median", q_c, q_p, args.queries))

    print(f"{'kernel':<15}{'compiled s':>12}{'python s':>12}{'speedup':>10}{'items':>9}")
    for name, c, p, n in rows:
        print(f"{name:<15}{c:>12.4f}{p:>12.4f}{p / c:>9.1f}x{n:>9}")


if __name__ == "__main__":
    main()
