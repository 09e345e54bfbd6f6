"""Deterministic pseudo-randomness built on SplitMix64.

Every random decision in the package (weight init, shuffling, dropout masks,
augmentation parameters, synthetic textures) is drawn from one of these
streams, keyed by (seed, domain, ...) words, so results are bit-identical
across runs and platforms and independent of execution order.

The generator is SplitMix64, pinned bit-exactly:

    state' = (state + 0x9E3779B97F4A7C15) mod 2^64
    z = state'
    z = ((z XOR (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2^64
    z = ((z XOR (z >> 27)) * 0x94D049BB133111EB) mod 2^64
    z = z XOR (z >> 31)
    uniform = (z >> 11) * 2^-53          # 53-bit mantissa, in [0, 1)

Because the state advances by a fixed additive constant, a batch of n draws
equals the scramble of state + GAMMA * (1..n), which is what the vectorised
`uniforms` computes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1

# Domain words keeping independent stream families apart.
DOM_SAMPLE = 1    # per-sample augmentation: (seed, DOM_SAMPLE, epoch, index)
DOM_SHUFFLE = 2   # per-epoch shuffling:     (seed, DOM_SHUFFLE, epoch)
DOM_DROPOUT = 3   # per-batch dropout masks: (seed, DOM_DROPOUT, epoch, batch)
DOM_INIT = 4      # weight initialisation:   (seed, DOM_INIT, stage)
DOM_SPLIT = 5     # stratified split:        (seed, DOM_SPLIT, class)
DOM_KFOLD = 6     # k-fold split:            (seed, DOM_KFOLD, class)
DOM_SYNTH = 7     # synthetic noise:         (seed, DOM_SYNTH, class, sample)


def _scramble(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RngState:
    """Immutable SplitMix64 state; every draw returns the successor state."""

    state: int

    @classmethod
    def from_seed(cls, seed: int) -> "RngState":
        return cls(seed & _MASK)

    def next(self) -> tuple[float, "RngState"]:
        """One uniform draw in [0, 1) plus the advanced state."""
        s = (self.state + GAMMA) & _MASK
        return (_scramble(s) >> 11) * 2.0**-53, RngState(s)

    def uniforms(self, n: int) -> tuple[np.ndarray, "RngState"]:
        """n uniform draws, bit-identical to n sequential `next` calls."""
        if n == 0:
            return np.empty(0, dtype=np.float64), self
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
        z = np.uint64(self.state) + steps  # wraps mod 2^64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        out = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return out, RngState((self.state + GAMMA * n) & _MASK)

    def normals(self, n: int) -> tuple[np.ndarray, "RngState"]:
        """n standard normal draws via Box-Muller over uniform pairs."""
        m = (n + 1) // 2
        u, nxt = self.uniforms(2 * m)
        u1 = 1.0 - u[:m]  # in (0, 1]: keeps log finite
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return out, nxt


def stream(seed: int, *words: int) -> RngState:
    """Deterministic sub-stream: fold each word into the state and rescramble."""
    h = _scramble((seed + GAMMA) & _MASK)
    for w in words:
        h = _scramble(((h ^ (w & _MASK)) + GAMMA) & _MASK)
    return RngState(h)


def derive(seed: int, epoch: int, sample_index: int) -> RngState:
    """Per-sample stream used by augmentation; pure in all three arguments."""
    return stream(seed, DOM_SAMPLE, epoch, sample_index)
