"""Named random substreams derived from one experiment seed."""
import zlib

import numpy as np


def stream_seed(seed, name, *keys):
    """Return a ``SeedSequence`` for substream ``name`` of ``seed``.

    Extra integer ``keys`` (epoch, bucket, step) select independent
    children of the same named stream.
    """
    entropy = [int(seed), zlib.crc32(name.encode("ascii"))]
    entropy.extend(int(k) for k in keys)
    return np.random.SeedSequence(entropy)


def rng(seed, name, *keys):
    return np.random.default_rng(stream_seed(seed, name, *keys))


def int_seed(seed, name, *keys):
    """A plain 32-bit integer seed for APIs that want an int."""
    return int(stream_seed(seed, name, *keys).generate_state(1)[0])
