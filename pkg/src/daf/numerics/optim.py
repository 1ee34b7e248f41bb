"""Adam with an explicit descend/ascend switch.

The alternating minimax loop updates the generators by descending the joint
loss and the discriminator by ascending it; `direction="ascend"` simply
negates the gradient before the usual update.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


class Adam:
    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, direction: str = "descend") -> None:
        """Apply one Adam update from the accumulated grads, then zero them."""
        if direction not in ("descend", "ascend"):
            raise ContractError(f"direction must be descend|ascend, got {direction!r}")
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractError(f"opt step without gradients for: {', '.join(missing[:5])}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if direction == "descend" else -p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if not np.isfinite(p.data).all():
                raise ContractError(f"parameter {name!r} became non-finite")
            p.grad = None
