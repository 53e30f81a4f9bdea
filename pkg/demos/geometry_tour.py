"""A short walk through the hyperboloid operations and entailment cones."""

import math

import numpy as np

from lorentz_st.hypgeom import (
    entailment_penalty,
    exp_map_origin,
    exterior_angle,
    half_aperture,
    lift,
    lorentz_distance,
    origin,
)

for c in (0.5, 1.0, 4.0):
    v = np.array([0.6, -0.8])
    p = exp_map_origin(v, c)
    d = float(lorentz_distance(origin(2, c), p))
    print(f"c={c}: exp(v) = ({float(p.time):.4f}; {p.space[0]:.4f}, {p.space[1]:.4f}), "
          f"d(O, exp(v)) = {d:.6f}  |v| = {np.linalg.norm(v):.6f}")

# cones get narrower as the parent moves away from the origin
print("\nparent norm   half-aperture (deg)")
for r in (0.1, 0.2, 0.4, 1.0, 3.0):
    print(f"{r:11.1f}   {math.degrees(float(half_aperture(lift(np.array([r, 0.0]))))):8.2f}")

parent = lift(np.array([0.4, 0.0]))
print("\nchild direction   exterior angle   penalty")
for deg in (0, 15, 30, 45, 90, 180):
    a = math.radians(deg)
    child = lift(0.8 * np.array([math.cos(a), math.sin(a)]))
    print(f"{deg:15d}   {float(exterior_angle(parent, child)):14.4f}   {float(entailment_penalty(parent, child)):7.4f}")
