"""Heavy-tailed gradient noise is where the L1 quantizer earns its keep.

Eight workers train the same tiny teacher-student MLP; each worker's
gradients are polluted with independent alpha-stable noise.  With Gaussian
noise (alpha=2) the max-norm and L1-norm quantizers train equally well.
With alpha=0.5 the noise has occasional astronomical outliers: the
max-norm quantizer rescales everything by those outliers and stalls,
while the L1 quantizer clamps them and keeps learning.

Run:  python3 demos/demo_toy_training.py   (about 15 s)
"""
from lioncomm.runner import RunConfig, run_training

BASE = {
    "train": {"steps": 500, "clients": 8},
    "algo": "direct",
    "seed": 0,
    "metrics_every": 100,
}


def run(levy_alpha, norm_p):
    doc = dict(BASE)
    doc["quant"] = {"kind": "lp", "bits": 8, "norm_p": norm_p}
    doc["noise"] = {"levy_alpha": levy_alpha, "scale": 1e-4}
    rows = run_training(RunConfig.from_dict(doc))["rows"]
    return rows


for levy_alpha, label in ((2.0, "Gaussian noise (alpha=2)"),
                          (0.5, "heavy-tailed noise (alpha=0.5)")):
    print(label)
    print(f"  {'step':>6s}  {'loss (L1 quant)':>16s}  {'loss (Linf quant)':>18s}")
    l1 = run(levy_alpha, 1.0)
    linf = run(levy_alpha, "inf")
    for a, b in zip(l1, linf):
        print(f"  {a['step']:6d}  {a['loss']:16.6f}  {b['loss']:18.6f}")
    ratio = linf[-1]["loss"] / l1[-1]["loss"]
    print(f"  final-loss ratio Linf/L1 = {ratio:.2f}")
    print()
