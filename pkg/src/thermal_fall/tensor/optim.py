"""Plain SGD and Adadelta."""
from __future__ import annotations

from typing import Dict

import numpy as np


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return param - lr * grad


def adadelta_step(param, grad, sq_grad, sq_update, rho=0.95, eps=1e-6, lr=1.0):
    """One Adadelta update; returns ``(param', sq_grad', sq_update')``."""
    sq_grad = rho * sq_grad + (1 - rho) * grad * grad
    update = -np.sqrt(sq_update + eps) / np.sqrt(sq_grad + eps) * grad
    sq_update = rho * sq_update + (1 - rho) * update * update
    return param + lr * update, sq_grad, sq_update


class SGD:
    kind = "sgd"

    def __init__(self, lr: float = 0.0002):
        self.lr = lr

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        for k, p in params.items():
            p -= p.dtype.type(self.lr) * grads[k]


class Adadelta:
    kind = "adadelta"

    def __init__(self, rho: float = 0.95, eps: float = 1e-6, lr: float = 1.0):
        self.rho, self.eps, self.lr = rho, eps, lr
        self.sq_grad: Dict[str, np.ndarray] = {}
        self.sq_update: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        for k, p in params.items():
            if k not in self.sq_grad:
                self.sq_grad[k] = np.zeros_like(p)
                self.sq_update[k] = np.zeros_like(p)
            new_p, self.sq_grad[k], self.sq_update[k] = adadelta_step(
                p, grads[k], self.sq_grad[k], self.sq_update[k], self.rho, self.eps, self.lr
            )
            p[...] = new_p
