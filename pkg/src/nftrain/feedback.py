"""Negative-feedback training objective.

The exit outputs act as stabilizing feedback on the backbone: the combined
logits subtract each exit's logits scaled by a coefficient that starts at
``alpha`` for the shallowest exit and decays by a fixed factor per exit, and
the whole combination is divided by (s + 1) before the cross-entropy.

The divisor counts *built* exits even when a mask deactivates some, so
ablating one exit leaves the coefficients of the remaining exits unchanged.
Note the divisor sits inside the cross-entropy (a temperature), so even
alpha = 0 differs from plain cross-entropy on the raw backbone logits;
``divide_inside=False`` moves the factor outside for comparison runs.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as ops
from .errors import ContractError, DomainError
from .network import ForwardBundle
from .tensor import Tensor

ALPHA_GRID = (1.0, 1e-1, 1e-2, 1e-3, 1e-4)


@dataclass(frozen=True)
class FeedbackSpec:
    """Feedback strength ``alpha``, per-exit ``decay``, and exit count ``s``.

    ``num_exits`` (s) may be left None to take the bundle's built exit count.
    ``exit_mask`` deactivates exits without renumbering the others (their
    coefficients and the built-count divisor stay put).
    """

    alpha: float = 0.01
    decay: float = 0.1
    num_exits: int | None = None
    divide_inside: bool = True
    exit_mask: tuple | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise DomainError(f"alpha must be >= 0, got {self.alpha}")
        if not 0 < self.decay <= 1:
            raise DomainError(f"decay must lie in (0, 1], got {self.decay}")

    def coefficient(self, exit_index: int) -> float:
        """Feedback coefficient of 1-based ``exit_index`` (shallowest = 1)."""
        return self.alpha * self.decay ** (exit_index - 1)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "decay": self.decay,
            "num_exits": self.num_exits,
            "divide_inside": self.divide_inside,
            "exit_mask": list(self.exit_mask) if self.exit_mask is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeedbackSpec":
        mask = d.get("exit_mask")
        return cls(
            alpha=float(d.get("alpha", 0.01)),
            decay=float(d.get("decay", 0.1)),
            num_exits=d.get("num_exits"),
            divide_inside=bool(d.get("divide_inside", True)),
            exit_mask=tuple(bool(m) for m in mask) if mask is not None else None,
        )


def _check_mask(mask, s):
    if mask is None:
        return [True] * s
    mask = list(mask)
    if len(mask) != s:
        raise ContractError(f"mask length {len(mask)} does not match {s} exits")
    return [bool(m) for m in mask]


def combine_logits(bundle: ForwardBundle, spec: FeedbackSpec, mask=None) -> Tensor:
    """(backbone - sum of coefficient-scaled active exit logits) / (s + 1)."""
    s = len(bundle.exit_logits)
    if spec.num_exits is not None and spec.num_exits != s:
        raise ContractError(f"spec expects {spec.num_exits} exits, bundle has {s}")
    mask = _check_mask(mask, s)
    acc = bundle.backbone_logits
    for i, (active, out_i) in enumerate(zip(mask, bundle.exit_logits), start=1):
        if active:
            acc = ops.add(acc, ops.scale(out_i, -spec.coefficient(i)))
    if spec.divide_inside:
        acc = ops.scale(acc, 1.0 / (s + 1))
    return acc


def negative_feedback_loss(bundle: ForwardBundle, labels, spec: FeedbackSpec, mask=None) -> Tensor:
    """Cross-entropy of the combined logits against integer labels."""
    if mask is None:
        mask = spec.exit_mask
    combined = combine_logits(bundle, spec, mask)
    loss = ops.softmax_cross_entropy(combined, labels)
    if not spec.divide_inside:
        s = len(bundle.exit_logits)
        loss = ops.scale(loss, 1.0 / (s + 1))
    return loss


def bundle_from_arrays(backbone_logits, exit_logits, requires_grad=False) -> ForwardBundle:
    """Convenience constructor for tests and direct loss evaluation."""
    return ForwardBundle(
        Tensor(np.asarray(backbone_logits), requires_grad=requires_grad),
        [Tensor(np.asarray(e), requires_grad=requires_grad) for e in exit_logits],
    )
