"""Ensembles of random networks approach their infinite-width limit at the CLT rate.

Run with ``python3 demos/gp_convergence.py``. Prints the median error of the
ensemble mean and of the variance estimate against a 10^4-member reference.
"""

import numpy as np

from emoe import gp_convergence_probe, loglog_slope

sizes = [2, 4, 8, 16, 32, 64, 128, 256]
rows = [gp_convergence_probe(sizes, seed) for seed in range(20)]
mean_err = np.median([[r.mean_error for r in rr] for rr in rows], axis=0)
var_err = np.median([[r.var_rel_error for r in rr] for rr in rows], axis=0)
print("    N   mean error   variance rel. error")
for n, me, ve in zip(sizes, mean_err, var_err):
    print(f"{n:5d}   {me:.5f}      {ve:.4f}")
print(f"log-log slope of the mean error: {loglog_slope(sizes, mean_err):.3f} (CLT rate is -0.5)")
