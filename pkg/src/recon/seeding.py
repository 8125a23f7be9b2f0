"""Named-stream seed derivation.

All randomness in a run flows from a single root seed. Subsystems
(corpus generation, parameter init, per-epoch batching, division passes)
each draw from their own named stream so any one of them can be
reproduced in isolation. Streams are derived by hashing, not by Python's
``hash``, so they are stable across processes and platforms.
"""

import hashlib

__all__ = ["derive_seed"]


def derive_seed(root_seed: int, stream: str) -> int:
    """Derive a 63-bit seed for the named stream from the root seed."""
    digest = hashlib.sha256(f"{root_seed}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
