from __future__ import annotations

from typing import Optional

import numpy as np

from .diffmath import ParamStore
from .utils import NumericError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def clip_grad_norm(store: ParamStore, max_norm: Optional[float]) -> float:
    """Rescale the accumulated gradients so their global norm is at most max_norm

    Returns
    -------
    norm : float
        The global gradient norm before clipping
    """
    norm = store.grad_norm()
    if not np.isfinite(norm):
        raise NumericError(f"Non-finite gradient norm {norm}")
    if max_norm is not None and max_norm > 0.0 and norm > max_norm:
        factor = max_norm / norm
        for name in store:
            store.grad(name)[...] *= factor
    return norm


class Adam:
    """Adaptive moment estimation over all parameters of one ParamStore

    Parameters
    ----------
    store : ParamStore
        The parameters to update, in place

    lr : float
        Learning rate
    """

    def __init__(
        self,
        store: ParamStore,
        lr: float,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
    ) -> None:
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.n_steps = 0
        self._m = {name: np.zeros_like(store[name]) for name in store}
        self._v = {name: np.zeros_like(store[name]) for name in store}

    def step(self) -> None:
        """Apply one update from the accumulated gradients"""
        self.n_steps += 1
        bias1 = 1.0 - self.beta1**self.n_steps
        bias2 = 1.0 - self.beta2**self.n_steps
        for name in self.store:
            grad = self.store.grad(name)
            self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * grad
            self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * grad**2
            m_hat = self._m[name] / bias1
            v_hat = self._v[name] / bias2
            self.store[name] = self.store[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def reset(self) -> None:
        """Forget the moment estimates, e.g. after restoring a snapshot"""
        self.n_steps = 0
        for name in self.store:
            self._m[name].fill(0.0)
            self._v[name].fill(0.0)
