"""Smoke test for the tightci extension module.

Run after building, with the directory holding tightci.so on sys.path:

    python python/smoke_test.py
"""

import json
import math
import random

import tightci


def main():
    assert tightci.SCHEMA_VERSION == 1

    layout = tightci.Layout(1000, 100)
    assert layout.is_exact and layout.group_size == 10

    target = math.sqrt(2 * math.log(40))
    ci = tightci.hoeff_mbcr_ci(0.0, 1000, 100, alpha=0.05)
    assert abs(ci.half_width * math.sqrt(100) - target) < 1e-12, ci

    z, beta, eta = layout.draw(seed=7)
    rng = random.Random(7)
    y = [rng.uniform(0.6, 1.0) if t else rng.uniform(0.1, 0.5) for t in z]
    for method in ("hoeff-mbcr", "sub-bernoulli-mbcr", "studentized"):
        interval = tightci.ci(y, z, "mbcr", method, beta=beta, eta=eta)
        assert interval.lower < interval.upper
        again = tightci.Interval.from_json(interval.to_json())
        assert (again.lower, again.upper) == (interval.lower, interval.upper)
    seeded = tightci.ci(y, z, "mbcr", "hoeff-mbcr", seed=7)
    assert seeded.center == tightci.estimate(y, z, "mbcr", beta=beta, eta=eta)

    try:
        tightci.ci(y, z, "bernoulli", "hoeff-mbcr", pi=0.1)
    except ValueError:
        pass
    else:
        raise AssertionError("hoeff-mbcr on Bernoulli data should be rejected")

    rows = tightci.enumerate_assignments(6, 2)
    assert len(rows) == 15 and all(count == 1728 and total == 25920 for _, count, total in rows)

    assert tightci.gamma_b(0.0, -1.0, 1.0) == 0.0

    csv_text = tightci.run_experiment(json.dumps({
        "schema_version": 1,
        "experiment": "coverage",
        "grid": {"n": [200], "pi": [0.1]},
        "methods": ["hoeff-mbcr"],
        "replications": 50,
    }))
    header, row = csv_text.strip().splitlines()
    assert header.startswith("schema_version,experiment,method")
    assert ",hoeff-mbcr,mbcr," in row

    print("tightci", tightci.__version__, "smoke test passed")


if __name__ == "__main__":
    main()
