"""Quick check that the compiled extension imports and agrees with known values.

Build first with `pip install --no-build-isolation -e crates/python`.
"""

import json
import math
import pathlib
import tempfile

import levy_refract_py as lr


def main():
    bm = lr.LevyModel(sigma=math.sqrt(2.0))
    w, _ = lr.scale_w(bm, 1.0, 1.0)
    assert abs(w - math.sinh(1.0)) < 1e-10, w

    problem = lr.Problem(bm, lr.Cost.quadratic(), 1.0, 1.0, 1.0)
    b = lr.semi_analytic_threshold(problem)
    print(f"semi-analytic threshold: {b:.6f}")

    mc = lr.MonteCarlo(n_paths=2000, dt=1e-2, horizon=10.0, seed=7)
    t = lr.solve_threshold(problem, mc)
    print(f"Monte Carlo threshold:   {t.b_star:.6f} +/- {t.se:.6f}")
    assert abs(t.b_star - b) < 5 * t.se + 0.05

    jumpy = lr.LevyModel(
        gamma=0.5,
        sigma=1.0,
        jumps=[lr.JumpTerm.exponential("down", 1.0, 2.0), lr.JumpTerm.point_mass("up", 0.5, 0.3)],
    )
    v = lr.estimate_value(lr.Problem(jumpy, lr.Cost.linear(2.0), 1.0, 1.0, 1.0), 0.0, mc, rate=0.5)
    print(f"constant-rate value:     {v.mean:.4f} +/- {v.se:.4f}")

    config = pathlib.Path(__file__).resolve().parents[1] / "configs" / "deterministic.toml"
    with tempfile.TemporaryDirectory() as out:
        manifest = json.loads(lr.run_experiment(str(config), "solve-threshold", out_dir=out))
    assert manifest["pass"], manifest["checks"]
    print("ok")


if __name__ == "__main__":
    main()
