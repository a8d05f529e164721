"""Parameter container, SGD with momentum and the step learning-rate schedule."""
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class ParamSet:
    """Ordered name -> Tensor mapping with one momentum buffer per parameter."""

    def __init__(self, params=None):
        self._params = {}
        self.velocity = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        self.velocity[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def count(self, prefix=""):
        """Number of scalar parameters whose name starts with ``prefix``."""
        return sum(t.size for n, t in self._params.items() if n.startswith(prefix))

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def arrays(self):
        return {n: t.data for n, t in self._params.items()}


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 0.01
    decay_factor: float = 0.1
    decay_every: int = 20
    momentum: float = 0.9

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 < self.decay_factor < 1:
            raise ValueError(f"decay_factor must lie in (0, 1), got {self.decay_factor}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def lr_at_epoch(schedule, epoch):
    """Step decay: ``base_lr * decay_factor ** (epoch // decay_every)``.

    Rounded to 15 significant digits so that 0.01 decayed twice by 0.1 is
    exactly 0.0001 rather than carrying representation noise.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    lr = schedule.base_lr * schedule.decay_factor ** (epoch // schedule.decay_every)
    return float(f"{lr:.15g}")


def sgd_momentum_step(params, lr, momentum, names=None):
    """In-place update ``v <- momentum*v + grad; p <- p - lr*v``; clears grads.

    ``names`` restricts the update to a subset; every updated parameter
    must carry a gradient.
    """
    names = params.names() if names is None else list(names)
    for name in names:
        if params[name].grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    for name in names:
        p = params[name]
        v = params.velocity[name]
        v *= momentum
        v += p.grad
        p.data -= lr * v
        p.grad = None
    return params
