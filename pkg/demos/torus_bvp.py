"""Exterior Dirichlet problem on the wiggly torus, checked against point sources.

Run: python demos/torus_bvp.py [NU NV]
"""

import sys

from fmmlu.driver import validate_point_sources
from fmmlu.geometry import make_wiggly_torus

nu, nv = (int(a) for a in sys.argv[1:3]) if len(sys.argv) > 2 else (14, 7)
disc = make_wiggly_torus(nu, nv, 4)
rep = validate_point_sources(disc, 0.97, 5e-7)
print(f"n = {disc.n}, patches = {nu * nv}")
print(f"t_q = {rep.row['t_q']:.2f} s, t_f = {rep.row['t_f']:.2f} s, "
      f"t_s = {rep.row['t_s']:.3f} s")
print(f"root size n_0 = {rep.row['n_0']}, factor memory = {rep.row['m_f_bytes'] / 1e6:.1f} MB")
print(f"eps_a = {rep.eps_a:.2e}")
for lv in rep.stats["levels"]:
    print(f"  level {lv['level']}: {lv['boxes']} boxes, "
          f"{lv['active_in']} -> {lv['active_out']} active")
