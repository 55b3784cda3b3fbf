"""Common interface for score models."""

from __future__ import annotations

import numpy as np

from ..fields import Field


class ScoreModel:
    """A score ``s(x, c, t)`` over a fixed channel layout.

    ``channels`` is the full input layout, ``context_channels`` the subset
    that conditions the model without being noised. Subclasses implement
    :meth:`score` on raw ``(B, N, N, C)`` arrays.
    """

    channels: tuple[str, ...] = ()
    context_channels: tuple[str, ...] = ()

    @property
    def noised_channels(self) -> tuple[str, ...]:
        return tuple(c for c in self.channels if c not in self.context_channels)

    @property
    def noised_index(self) -> list[int]:
        return [self.channels.index(c) for c in self.noised_channels]

    def score(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Score of the noised channels, shape ``(B, N, N, n_noised)``."""
        raise NotImplementedError

    def evaluate(self, f: Field, t) -> Field:
        x = f.select(self.channels).data
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (f.n_samples,))
        return Field(self.score(np.array(x), np.array(t)), self.noised_channels)
