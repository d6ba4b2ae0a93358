"""Smoke test for the hookean_mkv_py extension module.

Build and install first:
    pip install --no-build-isolation ./crates/py
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import hookean_mkv_py as hm


def check(cond, what):
    print(("ok   " if cond else "FAIL ") + what)
    return cond


def main():
    ok = True
    params = hm.ChainParams(springs=1, dim=2, eps=0.5)
    box = hm.Domain.rectangle([-1.0, -1.0], [1.0, 1.0])
    ok &= check(box.contains([0.2, -0.3]) and not box.contains([1.5, 0.0]), "box membership")
    ok &= check(abs(box.diameter() - 2.0 * math.sqrt(2.0)) < 1e-12, "box diameter")

    ens = hm.Ensemble(2000, params, box, seed=7)
    ens.step(0.01, steps=20, flow="cellular")
    inside = all(box.contains(r[0:2]) and box.contains(r[2:4]) for r in ens.positions())
    ok &= check(len(ens) == 2000 and inside, "ensemble stays in the box")
    bound = ens.stress_bound()
    k = ens.kramers_stress(4)
    ok &= check(all(math.sqrt(sum(x * x for x in c)) <= bound for c in k), "stress under the bound")
    ok &= check(all(abs(c[1] - c[2]) < 1e-12 for c in k), "stress symmetric")

    again = hm.Ensemble(2000, params, box, seed=7)
    again.step(0.01, steps=20, flow="cellular")
    ok &= check(again.positions() == ens.positions(), "same seed, same chains")

    p1 = hm.ChainParams(springs=1, dim=1, eps=0.5)
    fp = hm.FokkerPlanck(p1, hm.Domain.cube(1.0, 1), n_r=12, n_v=16, initial="gibbs")
    m0 = fp.mass()
    dt = 0.9 * fp.stability_bound()
    fp.step(dt, steps=20)
    ok &= check(abs(fp.mass() - m0) < 1e-10, "FP mass conserved")
    ok &= check(abs(fp.gibbs_entropy()) < 1e-10, "Gibbs state is stationary")

    ev = hm.rouse_eigenvalues(5)
    cf = hm.rouse_closed_form_eigenvalues(5)
    ok &= check(max(abs(a - b) for a, b in zip(sorted(ev), sorted(cf))) < 1e-12, "Rouse eigenvalues")

    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "fp.toml"
        cfg.write_text(
            '[domain]\nkind = "box"\nlo = [-1.0]\nhi = [1.0]\n'
            "[chain]\nsprings = 1\ndim = 1\neps = 0.5\n"
            '[fp]\nn_r = 8\nn_v = 12\nsteps = 5\ninitial = "perturbed"\n'
        )
        out, summary = hm.run_scenario("simulate-fp", str(cfg), out=str(Path(tmp) / "run"))
        s = json.loads(summary)
        ok &= check(Path(out, "manifest.json").is_file(), "scenario wrote its manifest")
        ok &= check(all(a["passed"] for a in s["assertions"]), "scenario checks pass")

    print("smoke test", "passed" if ok else "FAILED")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
