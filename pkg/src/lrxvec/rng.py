"""Named random substreams.

Every random draw in the package comes from a Philox (counter-based)
generator keyed by the run seed plus a path of names/indices, so results
do not depend on call order or on how work is split across workers.
"""

import zlib

import numpy as np


def _word(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode())


def substream(seed, *path):
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_word(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
