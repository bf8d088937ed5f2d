import numpy as np

from stmoe.flow_core import GridSpec
from stmoe.fusion import FusionConfig, prepare_dataset
from stmoe.synthgen import PatternSpec, SynthConfig, commuting_profile, generate, residential_profile


def small_city(seed=0, weeks=2):
    grid = GridSpec(4, 4, interval=120)
    q = grid.steps_per_day
    a = np.zeros((4, 4))
    a[:2] = 1
    return SynthConfig(grid, [PatternSpec("c", a, commuting_profile(q)),
                              PatternSpec("r", 1 - a, residential_profile(q))], weeks=weeks, seed=seed)


def small_dataset(seed=0):
    data = generate(small_city(seed))
    cfg = FusionConfig(n_c=2, n_p=1, n_q=0, day_offset=data.series.grid.steps_per_day)
    return data, prepare_dataset(data.series, data.externals, cfg)
