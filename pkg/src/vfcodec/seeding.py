"""Deterministic seed derivation for independent random streams."""

import numpy as np


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a mix of ints and short strings."""
    ints = []
    for p in parts:
        if isinstance(p, str):
            ints.extend(p.encode())
        else:
            ints.append(int(p) & 0xFFFFFFFF)
    state = np.random.SeedSequence(ints).generate_state(2)
    return int((int(state[0]) << 31 | int(state[1])) & 0x7FFFFFFFFFFFFFFF)
