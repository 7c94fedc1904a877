"""fmlab: a desk-scale laboratory for flow-matching generative sampling.

The package trains and probes velocity fields for reverse-time ODE sampling:
mean/variance schedules, synthetic targets with exact samplers, conditional
and posterior-averaged velocity oracles, a small float64 MLP with hand-rolled
reverse-mode gradients, early-stopped Runge-Kutta flows, dyadic time-partition
training, exact/entropic Wasserstein estimators, B-spline approximation
machinery, and closed-form rate/bound calculators, all driven by a config-file
CLI harness.
"""

import os as _os

# Keep BLAS single-threaded so cell results are bitwise identical no matter
# how many harness workers run next to each other.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
