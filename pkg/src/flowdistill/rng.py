"""Seeded random streams.

Every consumer of randomness asks for a named stream; a stream is a PCG64
generator whose seed sequence is ``(seed, stream id)``, so streams never
overlap and adding a new consumer does not perturb the others.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "init": 0,
    "shuffle": 1,
    "latent_noise": 2,
    "eval_noise": 3,
    "synth_base": 10,
    "synth_phase": 11,
    "synth_noise": 12,
    "oracle": 20,
}


def make_rng(seed: int, stream: str | int) -> np.random.Generator:
    stream_id = STREAMS[stream] if isinstance(stream, str) else int(stream)
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(stream_id,))
    return np.random.Generator(np.random.PCG64(seq))


def get_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def from_state(state: dict) -> np.random.Generator:
    bitgen = np.random.PCG64()
    bitgen.state = state
    return np.random.Generator(bitgen)
