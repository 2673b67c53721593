"""Counter-based seed derivation.

Every random stream in a run comes from ``np.random.default_rng([master, stream, *counters])``.
The stream ids below are fixed; counters are things like client id, round
and epoch. Two streams never share a key, so adding a draw to one stage
cannot shift the numbers another stage sees.
"""

from __future__ import annotations

import numpy as np

DATA_MEANS = 1
DATA_TRAIN = 2
DATA_TEST = 3
SHARDS = 4
INIT = 5
SHUFFLE = 6
EVAL_OOD = 7
FINETUNE = 8


def derive_rng(master: int, stream: int, *counters: int) -> np.random.Generator:
    return np.random.default_rng([int(master), int(stream), *(int(c) for c in counters)])
