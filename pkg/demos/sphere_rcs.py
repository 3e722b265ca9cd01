"""Monostatic backscatter of a sound-soft sphere against the partial-wave series.

Run: python demos/sphere_rcs.py [ka]
"""

import sys

import numpy as np

from fmmlu.driver import mie_backscatter, monostatic_rcs
from fmmlu.geometry import make_sphere

ka = float(sys.argv[1]) if len(sys.argv) > 1 else 2.0
disc = make_sphere(1.0, 3, 8)
phi = np.linspace(0, 2 * np.pi, 16, endpoint=False)
_, R, solver = monostatic_rcs(disc, ka, phi, 1e-6)
ref = mie_backscatter(ka, 1.0)
print(f"n = {disc.n}, one factorization ({solver.t_f:.1f} s) for {len(phi)} angles")
print(f"series value R = {ref:.8f}")
for a, r in zip(phi, R):
    print(f"phi = {a:5.3f}  R = {r:.8f}  rel. error = {abs(r - ref) / abs(ref):.1e}")
