"""
A synthetic city with planted patterns
======================================

The generator paints a few functional patterns onto a grid. Each one is a
spatial mask times a weekly in/out profile, and the observed flows are
Poisson draws of their sum. The masks are kept as ground truth.
"""
import numpy as np

from stmoe.synthgen import builtin_city, generate

city = builtin_city("tiny8", seed=0)
data = generate(city)
print(data.series.flows.shape, "steps x (inflow, outflow) x h x w")

# every region is a blend of the three districts
for p, m in zip(data.patterns, data.truth_masks):
    print(f"{p['name']:12s} mask sum {m.sum():5.1f}  peak inflow {p['peak_inflow']:5.1f}")
print("masks sum to one everywhere:", np.allclose(data.truth_masks.sum(0), 1))

# the commuting district peaks twice on a weekday, barely on a Sunday
q = city.grid.steps_per_day
corner = data.intensity[:, 0, 1, 6]
print("Monday inflow by hour:", np.round(corner[:q:2], 1))
print("Sunday inflow by hour:", np.round(corner[6 * q:7 * q:2], 1))

# the counts themselves are noisy around that intensity
resid = data.series.flows - data.intensity
print("mean residual %.3f, variance / intensity %.3f" % (resid.mean(), resid.var() / data.intensity.mean()))
