"""Freeze two-proportion z-test reference values from statsmodels.

Writes one JSON object per line: {x1, n1, x2, n2, z, p}.
"""
import json
import random
import sys

from statsmodels.stats.proportion import proportions_ztest

rng = random.Random(20240601)
cases = [(112, 10000, 74, 10000)]
while len(cases) < 100:
    n1 = rng.choice([rng.randint(1, 50), rng.randint(50, 5000), rng.randint(5000, 200000)])
    n2 = rng.choice([rng.randint(1, 50), rng.randint(50, 5000), rng.randint(5000, 200000)])
    x1 = rng.randint(0, n1)
    x2 = min(n2, max(0, int(round(n2 * (x1 / n1) * rng.uniform(0.5, 1.5)))))
    if x1 + x2 == 0 or x1 + x2 == n1 + n2:
        continue
    cases.append((x1, n1, x2, n2))

out = open(sys.argv[1], "w") if len(sys.argv) > 1 else sys.stdout
for x1, n1, x2, n2 in cases:
    z, p = proportions_ztest([x1, x2], [n1, n2], alternative="two-sided")
    out.write(json.dumps({"x1": x1, "n1": n1, "x2": x2, "n2": n2, "z": float(z), "p": float(p)}) + "\n")
