"""Plain SGD and Adam over a name -> array parameter dict."""

import numpy as np


class SGD:
    def __init__(self, lr: float = 0.01):
        self.lr = lr
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for k, g in grads.items():
            params[k] -= self.lr * g

    def select(self, name: str, positions: np.ndarray, axis: int) -> None:
        pass

    def state_dict(self) -> dict:
        return {"t": self.t}


class Adam:
    # moments are kept per parameter name; pruning slices them with select()
    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= step_size * m / (np.sqrt(v / bc2) + self.epsilon)

    def select(self, name: str, positions: np.ndarray, axis: int) -> None:
        if name in self.m:
            self.m[name] = np.take(self.m[name], positions, axis=axis)
            self.v[name] = np.take(self.v[name], positions, axis=axis)


def make_optimizer(kind: str, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                   epsilon: float = 1e-8):
    if kind in ("adam", "adaptive-moment"):
        return Adam(lr, beta1, beta2, epsilon)
    if kind in ("sgd", "plain-sgd"):
        return SGD(lr)
    raise ValueError(f"unknown optimizer {kind!r}")
