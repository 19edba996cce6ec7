"""Attention mask specifications.

A mask is a description (kind plus parameters), not a -inf tensor; the
-inf substitution happens inside the softmax so that all stored tensors
stay finite. Supported kinds:

* ``none``       -- every key visible to every query
* ``causal``     -- key position <= query position
* ``window``     -- causal with bounded lookback: 0 <= query - key < width
* ``explicit``   -- caller-supplied boolean grid, True = allowed
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import MaskError

__all__ = ["MaskSpec"]

_KINDS = ("none", "causal", "window", "explicit")


@dataclass(frozen=True)
class MaskSpec:
    kind: str = "none"
    width: int | None = None
    grid: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise MaskError(f"unknown mask kind {self.kind!r}; expected one of {_KINDS}")
        if self.kind == "window":
            if self.width is None or int(self.width) < 1:
                raise MaskError(f"sliding window width must be a positive integer, got {self.width}")
            object.__setattr__(self, "width", int(self.width))
        if self.kind == "explicit":
            grid = np.asarray(self.grid, dtype=bool)
            if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
                raise MaskError(f"explicit mask grid must be square 2-d, got shape {grid.shape}")
            empty = np.flatnonzero(~grid.any(axis=1))
            if empty.size:
                raise MaskError(f"explicit mask allows no key for query row {int(empty[0])}")
            object.__setattr__(self, "grid", grid)

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def causal(cls):
        return cls("causal")

    @classmethod
    def sliding_window(cls, width):
        return cls("window", width=width)

    @classmethod
    def explicit(cls, grid):
        return cls("explicit", grid=grid)

    def allowed(self, n):
        """Boolean (n, n) grid of permitted (query, key) pairs, or None if unmasked."""
        if self.kind == "none":
            return None
        if self.kind == "causal":
            q = np.arange(n)
            return q[None, :] <= q[:, None]
        if self.kind == "window":
            q = np.arange(n)
            delta = q[:, None] - q[None, :]
            return (delta >= 0) & (delta < self.width)
        if self.grid.shape[0] != n:
            raise MaskError(f"explicit mask sized {self.grid.shape[0]}, logits sized {n}")
        return self.grid

    def describe(self):
        if self.kind == "window":
            return f"window:{self.width}"
        return self.kind

    @classmethod
    def parse(cls, text):
        """Inverse of describe(); accepts 'none', 'causal', 'window:W'."""
        if text == "none":
            return cls.none()
        if text == "causal":
            return cls.causal()
        if text.startswith("window:"):
            return cls.sliding_window(int(text.split(":", 1)[1]))
        raise MaskError(f"cannot parse mask spec {text!r}")
