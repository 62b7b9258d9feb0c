"""Why the norm choice matters when quantizing update vectors.

Lion-style optimizers only need the *sign* of the aggregated update, so a
quantizer is good exactly when the quantized majority vote keeps the same
sign as the full-precision sum.  This script builds heavy-tailed update
vectors with planted outliers and shows how normalizing by the max (L_inf)
versus the mean absolute value (L_1) changes what survives quantization.

Run:  python3 demos/demo_quantization.py
"""
import numpy as np

from lioncomm import INF, QuantSpec, lp_mean_norm, quantize
from lioncomm.runner import run_quant_bench

rng = np.random.default_rng(0)

# A Laplace-ish update vector with one huge outlier, like the tails seen
# in real transformer update vectors.
x = rng.laplace(0.0, 1.0, size=10_000)
x[0] = 1e4

print("norms of the same vector under different p:")
for p in (INF, 2.0, 1.0, 0.0):
    label = "inf" if p == INF else str(p)
    print(f"  M_{label:>3s} = {lp_mean_norm(x, p):.4g}")

print()
print("nonzero fraction after 8-bit quantization:")
q_inf = quantize(x, QuantSpec(bits=8, norm_p=INF, rounding="stochastic"),
                 rng=rng)
q_one = quantize(x, QuantSpec(bits=8, norm_p=1.0))
print(f"  max-norm scaling:  {np.count_nonzero(q_inf) / x.size:6.1%}"
      "   (the outlier hogs the whole range)")
print(f"  L1-norm scaling:   {np.count_nonzero(q_one) / x.size:6.1%}"
      "   (clamps the outlier, keeps everything else)")

print()
print("majority-vote quality across 8 simulated workers")
print("(match = voted sign equals the full-precision vote):")
print(f"  {'quantizer':>12s}  {'match':>7s}  {'flip':>7s}")
for row in run_quant_bench({"seed": 0, "d": 50_000}):
    print(f"  {row['quantizer']:>12s}  {row['sign_match_rate']:7.4f}"
          f"  {row['flip_rate']:7.4f}")
