"""
Counter-based random streams.

Every random draw is addressed by ``(seed, stream tag, iteration, walker)``:
the Philox key holds the seed and the stream tag, the counter holds the
walker and iteration indices. A walker's draws therefore do not depend on
how many walkers exist, on the order in which they are generated or on the
number of worker threads.
"""
from dataclasses import dataclass

import numpy as np

# Stream tags (second key word)
NOISE_STREAM = 0
INIT_STREAM = 1
GRID_STREAM = 2
EVAL_STREAM = 3
INIT_POLICY_STREAM = 4

_MASK64 = (1 << 64) - 1


def philox_generator(seed: int, stream: int, walker: int, iteration: int) -> np.random.Generator:
    """
    Generator for one ``(seed, stream, walker, iteration)`` address.

    :param seed: master seed (any nonnegative integer, reduced modulo 2**64)
    :param stream: stream tag
    :param walker: walker index
    :param iteration: optimizer iteration index
    :return: a numpy generator backed by Philox4x64
    """
    if seed < 0 or walker < 0 or iteration < 0:
        raise ValueError(f"seed, walker and iteration must be nonnegative, got {seed}, {walker}, {iteration}")
    key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    counter = np.array([0, 0, walker & _MASK64, iteration & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


@dataclass(frozen=True)
class WalkerStreams:
    """
    Per-walker random streams for one optimizer iteration.

    :param seed: master seed of the run
    :param iteration: optimizer iteration index
    """

    seed: int
    iteration: int = 0

    def walker(self, index: int, stream: int = NOISE_STREAM) -> np.random.Generator:
        return philox_generator(self.seed, stream, index, self.iteration)

    def grid(self) -> np.random.Generator:
        """Generator for the randomized time grid of this iteration (shared by all walkers)."""
        return philox_generator(self.seed, GRID_STREAM, 0, self.iteration)

    def for_iteration(self, iteration: int) -> "WalkerStreams":
        return WalkerStreams(self.seed, iteration)

    def evaluation(self) -> "WalkerStreams":
        """
        Streams reserved for metric evaluation: they never collide with training draws
        and are identical at every call.
        """
        return _EvalStreams(self.seed, 0)


@dataclass(frozen=True)
class _EvalStreams(WalkerStreams):
    def walker(self, index: int, stream: int = NOISE_STREAM) -> np.random.Generator:
        return philox_generator(self.seed, EVAL_STREAM + 16 * (stream + 1), index, self.iteration)

    def grid(self) -> np.random.Generator:
        return philox_generator(self.seed, EVAL_STREAM, 0, self.iteration)
