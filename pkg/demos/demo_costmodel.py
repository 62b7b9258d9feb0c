"""When is the 1-bit compressed vote actually cheaper?

The alpha-beta model prices a collective as (messages x alpha) +
(bits x beta).  The compressed 1-bit vote moves ~N bits instead of ~N
words, but needs more messages, so it wins only when bandwidth, not
latency, is the bottleneck.  This script sweeps the alpha/beta ratio and
prints which algorithm is cheapest in each regime.

Run:  python3 demos/demo_costmodel.py
"""
from lioncomm import ALGOS, CostParams, cost

P, N, BETA = 8, 10 ** 6, 1e-9  # 8 workers, 1M params, ~1 Gbit/s

print(f"P={P}, N={N:.0e}, beta={BETA:.0e} s/bit, 32-bit words")
print()
header = "".join(f"{a:>18s}" for a in ALGOS)
print(f"{'alpha (s)':>12s}{header}   cheapest")
for alpha in (0.0, 1e-6, 1e-4, 1e-3, 1e-2):
    cp = CostParams(alpha=alpha, beta=BETA, workers=P, params=N)
    totals = {a: cost(a, cp)[2] for a in ALGOS}
    cells = "".join(f"{totals[a]:18.6f}" for a in ALGOS)
    print(f"{alpha:12.0e}{cells}   {min(totals, key=totals.get)}")

print()
print("bandwidth terms alone (alpha=0):")
cp = CostParams(alpha=0.0, beta=BETA, workers=P, params=N)
for a in ALGOS:
    print(f"  {a:>18s}: {cost(a, cp)[1] * 1e3:9.3f} ms")
print()
print("Low latency -> compressed_1bit wins on raw bits moved; high")
print("latency -> the log(P)-message allreduce / tree PS paths win.")
