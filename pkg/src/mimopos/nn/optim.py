"""Adam optimiser with bias-corrected moment estimates."""

import numpy as np


class Adam:
    """Adam over a list of Parameters.

    Moment buffers start at zero, so stepping with all-zero gradients from a
    fresh state leaves the parameters unchanged.
    """

    def __init__(self, params, learning_rate=1e-3, betas=(0.9, 0.999),
                 eps=1e-8):
        self.params = list(params)
        if not self.params:
            raise ValueError("no parameters to optimise")
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0

    def step(self):
        """Apply one update from the accumulated gradients."""
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in {p.name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1 - b1 ** self.t
        bc2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.value -= (self.learning_rate * m_hat
                        / (np.sqrt(v_hat) + self.eps)).astype(
                p.value.dtype, copy=False)
