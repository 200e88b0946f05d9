"""Smoke test for the buot_py extension module.

Builds the extension with cargo when it is not already importable, then
exercises each exported function once.

    python3 python/smoke_test.py
"""

import importlib
import math
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    try:
        return importlib.import_module("buot_py")
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "buot-py"],
        cwd=ROOT,
        check=True,
    )
    built = os.path.join(ROOT, "target", "release", "libbuot_py.so")
    tmp = tempfile.mkdtemp(prefix="buot_py_")
    shutil.copy(built, os.path.join(tmp, "buot_py.so"))
    sys.path.insert(0, tmp)
    return importlib.import_module("buot_py")


def close(a, b, tol):
    return abs(a - b) <= tol


def main():
    bp = load_module()
    print("buot_py", bp.version())

    assert close(bp.label_aware_cost(0.7, 0.8, True), 0.01, 1e-12)
    assert close(bp.label_aware_cost(0.7, 0.8, False), 2.25, 1e-12)

    mu = [0.5, 0.5]
    plan, converged = bp.sinkhorn_balanced(mu, mu, [[0.0, 1.0], [1.0, 0.0]], 0.1)
    assert converged
    assert all(close(sum(row), 0.5, 1e-8) for row in plan)
    assert plan[0][0] > plan[0][1]

    plan, _ = bp.scaling_uot([0.5, 0.5], [1.0], [[0.0], [10.0]], 0.05, 1.0)
    assert plan[1][0] < 0.01 * 0.5

    ps = [[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.2, 0.2, 0.6], [0.3, 0.3, 0.4]]
    pt = [[0.6, 0.3, 0.1], [0.2, 0.1, 0.7], [0.1, 0.7, 0.2]]
    g1 = [[1.0 / 12.0] * 3 for _ in range(4)]
    fast = bp.contract(ps, pt, g1, "samples")
    slow = bp.contract(ps, pt, g1, "samples", oracle=True)
    assert max(abs(a - b) for ra, rb in zip(fast, slow) for a, b in zip(ra, rb)) <= 1e-10

    sol = bp.solve_bilevel(ps, pt)
    assert len(sol.gamma1) == 4 and len(sol.gamma2) == 3
    assert all(math.isfinite(v) for v in sol.objective_trace)

    g1r, g2r, omega = bp.recover(sol.gamma1, sol.gamma2, [0, 1, 2, 2], [0, 2, 1])
    assert len(g1r) == 4 and len(g2r) == 3
    assert close(sum(omega), 1.0, 1e-12)

    task = bp.generate_task(n_s=60, n_t=30, seed=1)
    assert len(task["source_x"]) == 60 and set(task["target_y"]) <= {0, 1, 2}

    cfg = bp.Config(
        "[task]\nn_s = 60\nn_t = 30\n"
        "[training]\nt_warm = 10\nt_max = 30\nbatch_s = 16\nbatch_t = 16\n"
    )
    assert bp.Config(cfg.to_text()).to_text() == cfg.to_text()
    result = bp.train(cfg)
    assert 0.0 <= result.final_acc_t <= 1.0
    assert close(sum(result.omega), 1.0, 1e-12)
    baseline = bp.train(cfg, source_only=True)
    print(
        f"acc_t {result.final_acc_t:.3f} (source only {baseline.final_acc_t:.3f}), "
        f"outlier weight {result.outlier_weight:.3f}"
    )

    try:
        bp.Config("[task]\nbogus = 1\n")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown config key accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
