"""Seeded random streams.

All randomness in a run flows from one root seed through named derived
streams, so adding a consumer never perturbs the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_rng(root_seed: int, label: str) -> np.random.Generator:
    """Return an independent generator for (root_seed, label).

    The label is hashed into the seed material, so streams are
    order-independent: requesting "trainer" before or after "datagen"
    yields the same draws for each.
    """
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    seq = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFFFFFFFFFF, *words])
    return np.random.default_rng(seq)


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's bit state."""
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    """Rebuild a generator from a snapshot taken with rng_state."""
    bitgen_cls = getattr(np.random, state["bit_generator"])
    rng = np.random.Generator(bitgen_cls())
    rng.bit_generator.state = state
    return rng
