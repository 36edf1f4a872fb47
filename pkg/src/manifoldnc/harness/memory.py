"""Sequential memory task for the recurrent experiments.

A trial presents S payload symbols drawn from {1, ..., K-2}, then L blank
steps (token 0), then the go cue (token K-1), then S-1 more blanks; the
target is blank for the first S+L steps and repeats the payload in order
over the final S steps. Total length T = 2S + L.
"""

from dataclasses import dataclass

import numpy as np

BLANK = 0


@dataclass(frozen=True)
class MemoryTaskSpec:
    gap: int
    symbols: int
    alphabet: int

    def __post_init__(self):
        if self.alphabet < 3:
            raise ValueError("alphabet must be >= 3 (blank, go cue, and a payload symbol)")
        if self.symbols < 1:
            raise ValueError("need at least one payload symbol per trial")
        if self.gap < 0:
            raise ValueError("gap length cannot be negative")

    @property
    def sequence_length(self):
        return 2 * self.symbols + self.gap

    @property
    def go_cue(self):
        return self.alphabet - 1


def generate_memory_batch(spec, batch_size, rng):
    """One batch of trials: one-hot inputs (B, T, K) and integer targets (B, T)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    s, l, k = spec.symbols, spec.gap, spec.alphabet
    t = spec.sequence_length
    payload = rng.integers(1, k - 1, size=(batch_size, s))
    tokens = np.zeros((batch_size, t), dtype=np.intp)
    tokens[:, :s] = payload
    tokens[:, s + l] = spec.go_cue
    inputs = np.zeros((batch_size, t, k))
    rows = np.repeat(np.arange(batch_size), t)
    steps = np.tile(np.arange(t), batch_size)
    inputs[rows, steps, tokens.ravel()] = 1.0
    targets = np.zeros((batch_size, t), dtype=np.intp)
    targets[:, s + l :] = payload
    return inputs, targets
