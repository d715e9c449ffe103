"""Adaptive-moment optimizer with bias correction and optional decoupled weight decay."""

import numpy as np


class Adam:
    """Adam / AdamW over a dict of named ndarrays, updated in place.

    ``weight_decay`` is applied decoupled from the gradient (AdamW); with the
    default of 0 the update is plain Adam.
    """

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, grad_clip=None):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """Apply one update to every entry of ``params`` with a gradient in ``grads``."""
        if self.grad_clip is not None:
            total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
            if total > self.grad_clip:
                scale = self.grad_clip / (total + 1e-12)
                grads = {k: g * g.dtype.type(scale) for k, g in grads.items()}
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p -= (self.lr * self.weight_decay) * p
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {
            "hyper": {"lr": self.lr, "betas": [self.beta1, self.beta2], "eps": self.eps,
                      "weight_decay": self.weight_decay, "grad_clip": self.grad_clip,
                      "step_count": self.step_count},
            "m": self.m,
            "v": self.v,
        }

    @classmethod
    def from_state_dict(cls, state):
        h = state["hyper"]
        opt = cls(h["lr"], tuple(h["betas"]), h["eps"], h["weight_decay"], h["grad_clip"])
        opt.step_count = int(h["step_count"])
        opt.m = {k: np.array(v) for k, v in state["m"].items()}
        opt.v = {k: np.array(v) for k, v in state["v"].items()}
        return opt
