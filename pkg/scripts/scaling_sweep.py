"""Per-solve multiply-accumulate counts as the contact count grows.

Prints one row per contact count with the PPM solve cost, the pyramid LCP
assembly cost and the fitted growth exponents.
"""

import argparse

import numpy as np

from rigidlcp import contactmodels as cm
from rigidlcp import rigidsim as rs
from rigidlcp import scenarios
from rigidlcp.lcpkit import PpmOptions, solve_lcp_ppm
from rigidlcp.matrixcore import count_ops


def exponent(ns, costs):
    return float(np.polyfit(np.log(ns), np.log(costs), 1)[0])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 64, 128, 256])
    ap.add_argument("--dt", type=float, default=0.01)
    args = ap.parse_args()

    rows = []
    print(f"{'n':>5} {'ppm_macs':>10} {'max_order':>9} {'pyramid_asm_macs':>17}")
    for n in args.sizes:
        system = scenarios.scaling_box(duplication=max(1, n // 4))
        contacts = rs.generate_contacts(system)
        M, v, f = system.inertia(), system.velocity(), system.forces()
        jb = rs.jacobian_bundle(system, contacts)
        cp = cm.build_noslip_mlcp(M, v, f, jb, args.dt)
        with count_ops() as ppm:
            sol = solve_lcp_ppm(cp.lcp, PpmOptions(incremental=True))
        with count_ops() as asm:
            cm.build_pyramid_baseline_lcp(M, v, f, jb, args.dt)
        rows.append((len(contacts), ppm.macs, asm.macs))
        print(f"{len(contacts):5d} {ppm.macs:10d} {sol.max_order:9d} {asm.macs:17d}")
    if len(rows) > 1:
        ns = [r[0] for r in rows]
        print(f"ppm exponent {exponent(ns, [r[1] for r in rows]):.2f}, "
              f"pyramid assembly exponent {exponent(ns, [r[2] for r in rows]):.2f}")


if __name__ == "__main__":
    main()
