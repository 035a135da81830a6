"""Sparse feature masks gated by a hard step with surrogate gradients.

A :class:`FilterLayer` owns two trainable vectors over the feature axis: a
magnitude ``r`` and a threshold ``s``.  The binary gate is
``q = step(|r| - s)`` and the filtering vector is ``m = r * q``; applying
the layer multiplies hidden states elementwise by ``m``.  Because the step
is a hard 0/1, a pruned feature is exactly zero, and the surrogate
backward pass keeps both ``r`` and ``s`` learnable.

Variants:

* ``long_tailed`` (default): surrogate with a flat 0.4 tail out to |t| = 1.
* ``ste``: straight-through surrogate, factor 1 on |t| <= 1.
* ``str``: soft thresholding, ``m = sign(r) * relu(|r| - sigmoid(s))``;
  no hard gate, but features still hit exact zero below the threshold.
* ``scalar``: one shared threshold for every feature.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ShapeError
from .tensor import Tensor

VARIANTS = ("long_tailed", "ste", "str", "scalar")

# r is drawn well above the threshold scale so most gates start open.
# If the gates started at the threshold's own scale, the sparsity term
# would close them before the task loss had produced any preference
# between channels, and training would settle at an empty mask.  Starting
# open lets the task gradient establish which channels matter first; the
# sparsity term then prunes the rest.
R_INIT_STD = 0.2
S_INIT = 0.05


class FilterLayer:
    """Trainable sparse mask over a feature axis of width ``width``."""

    def __init__(self, width: int, variant: str = "long_tailed",
                 rng: np.random.Generator | None = None, layer_index: int = 0):
        if variant not in VARIANTS:
            raise ConfigError("mask_variant", f"unknown variant {variant!r}, expected one of {VARIANTS}")
        if width < 1:
            raise ConfigError("width", f"mask width must be positive, got {width}")
        rng = rng or np.random.default_rng(0)
        self.width = width
        self.variant = variant
        self.layer_index = layer_index
        self.frozen = False
        self.r = Tensor(rng.normal(0.0, R_INIT_STD, size=width), requires_grad=True)
        s_width = 1 if variant == "scalar" else width
        self.s = Tensor(np.full(s_width, S_INIT), requires_grad=True)
        # When set (by the reverse-mask study), overrides the learned gate.
        self.q_override: np.ndarray | None = None

    def parameters(self):
        return [("r", self.r), ("s", self.s)]

    def freeze(self) -> None:
        self.frozen = True

    def binary_mask(self) -> Tensor:
        """The 0/1 gate as a tensor (on-tape for the gated variants)."""
        if self.q_override is not None:
            return Tensor(self.q_override)
        if self.variant == "str":
            # No hard gate in this variant; synthesize one from the exact
            # zero pattern of m, off-tape.
            return Tensor((self.binary_mask_values() != 0).astype(np.float64))
        estimator = "ste" if self.variant == "ste" else "long_tailed"
        return tt.unit_step(tt.sub(tt.absolute(self.r), self.s), estimator=estimator)

    def binary_mask_values(self) -> np.ndarray:
        """The gate as plain numpy, never on a tape."""
        if self.q_override is not None:
            return self.q_override.copy()
        if self.variant == "str":
            sigma = 1.0 / (1.0 + np.exp(-self.s.data))
            return (np.abs(self.r.data) > sigma).astype(np.float64)
        return (np.abs(self.r.data) - self.s.data >= 0.0).astype(np.float64)

    def filtering_vector(self) -> Tensor:
        """m, the vector actually multiplied into hidden states."""
        if self.variant == "str" and self.q_override is None:
            sign = Tensor(np.sign(self.r.data))
            return tt.mul(sign, tt.relu(tt.sub(tt.absolute(self.r), tt.sigmoid(self.s))))
        return tt.mul(self.r, self.binary_mask())

    def filtering_values(self) -> np.ndarray:
        """m as plain numpy, never on a tape."""
        if self.variant == "str" and self.q_override is None:
            sigma = 1.0 / (1.0 + np.exp(-self.s.data))
            return np.sign(self.r.data) * np.maximum(np.abs(self.r.data) - sigma, 0.0)
        return self.r.data * self.binary_mask_values()

    def apply(self, states: Tensor) -> Tensor:
        """Multiply hidden states (..., width) by the filtering vector."""
        if states.shape[-1] != self.width:
            raise ShapeError(
                f"mask width {self.width} does not match feature width {states.shape[-1]}")
        return tt.mul(states, self.filtering_vector())

    def sparsity_loss(self) -> Tensor:
        """sum_i exp(-s_i); the scalar variant counts its one threshold
        once per feature so the pressure matches the vector variants."""
        total = tt.reduce_sum(tt.exp(tt.mul(self.s, Tensor(-1.0))))
        if self.variant == "scalar":
            total = tt.mul(total, Tensor(float(self.width)))
        return total

    def sparsity_fraction(self) -> float:
        """Fraction of features gated to exactly zero."""
        if self.variant == "str":
            return float((self.filtering_values() == 0.0).sum() / self.width)
        return float((self.binary_mask_values() == 0.0).sum() / self.width)

    def state(self) -> dict:
        out = {
            "layer_index": self.layer_index,
            "variant": self.variant,
            "frozen": self.frozen,
            "r": self.r.data.tolist(),
            "s": self.s.data.tolist(),
        }
        if self.q_override is not None:
            out["q_override"] = self.q_override.tolist()
        return out

    @classmethod
    def from_state(cls, state: dict) -> "FilterLayer":
        layer = cls.__new__(cls)
        layer.width = len(state["r"])
        layer.variant = state["variant"]
        layer.layer_index = state["layer_index"]
        layer.frozen = state["frozen"]
        layer.r = Tensor(np.array(state["r"], dtype=np.float64), requires_grad=True)
        layer.s = Tensor(np.array(state["s"], dtype=np.float64), requires_grad=True)
        layer.q_override = (np.array(state["q_override"], dtype=np.float64)
                           if "q_override" in state else None)
        return layer

    def snapshot(self) -> dict:
        """Self-contained record of the mask for reports and analysis."""
        return {
            "layer_index": self.layer_index,
            "variant": self.variant,
            "frozen": self.frozen,
            "r": self.r.data.tolist(),
            "s": self.s.data.tolist(),
            "q": self.binary_mask_values().tolist(),
            "m": self.filtering_values().tolist(),
        }
