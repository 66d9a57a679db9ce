"""Named random substreams derived from a single root seed."""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def substream(root_seed, name, *extra):
    """Independent generator for ``(root_seed, name, *extra)``.

    The same arguments always give the same stream; different names give
    statistically independent streams. ``extra`` may hold ints or strings
    (e.g. an epoch number and an encounter id).
    """
    entropy = [_key(root_seed), _key(name)] + [_key(e) for e in extra]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
