#!/usr/bin/env python3
"""Independent moving average (window 100) by explicit per-sample means."""
import sys

import numpy as np

from haloscope.io import read_container, write_container

WINDOW = 100
x = read_container(sys.argv[1])[0]
v = x.millivolts()
n = v.size
y = np.empty(n)
for t in range(n):
    lo = max(t - WINDOW // 2, 0)
    hi = min(t + (WINDOW + 1) // 2, n)
    y[t] = v[lo:hi].mean()
write_container(sys.argv[2], [y.astype("f4")], sample_rate=x.sample_rate)
