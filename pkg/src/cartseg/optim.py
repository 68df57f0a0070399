"""AMSGrad.

Per element, at step t with gradient g:

    m     <- beta1*m + (1-beta1)*g
    v     <- beta2*v + (1-beta2)*g^2
    v_hat <- max(v_hat, v)
    theta <- theta - lr * (m / (1 - beta1**t)) / (sqrt(v_hat) + eps)

Only the first moment is bias corrected. ``amsgrad=False`` uses v in place
of v_hat (Adam without second-moment correction), kept for comparison.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, zero_grads


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AMSGradConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            val = getattr(self, name)
            if not 0.0 <= val < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {val}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


class AMSGrad:
    def __init__(self, params: dict[str, Tensor], config: AMSGradConfig = AMSGradConfig(), amsgrad: bool = True):
        self.params = params
        self.config = config
        self.amsgrad = amsgrad
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v_hat = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grads(self) -> None:
        zero_grads(self.params.values())

    def step(self) -> None:
        """Apply one update from the populated grads, then zero them.

        Every grad is checked before anything is touched, so a rejected step
        leaves parameters and state unchanged.
        """
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        b1, b2 = cfg.beta1, cfg.beta2
        correction = 1.0 - b1**t
        for name, p in self.params.items():
            g = p.grad
            m, v, vh = self.m[name], self.v[name], self.v_hat[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            np.maximum(vh, v, out=vh)
            denom = np.sqrt(vh if self.amsgrad else v) + cfg.eps
            p.data -= ((cfg.learning_rate / correction) * m / denom).astype(p.data.dtype, copy=False)
        self.zero_grads()

    # checkpoint support
    def hyperparameters(self) -> dict:
        return {
            "learning_rate": self.config.learning_rate,
            "beta1": self.config.beta1,
            "beta2": self.config.beta2,
            "eps": self.config.eps,
            "amsgrad": self.amsgrad,
            "step_count": self.step_count,
        }

    def state_records(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for slot in ("m", "v", "v_hat"):
            buf = getattr(self, slot)
            out += [(f"opt.{slot}/{name}", buf[name]) for name in self.params]
        return out

    def load_state(self, hyper: dict, records: dict[str, np.ndarray]) -> None:
        self.config = AMSGradConfig(
            hyper["learning_rate"], hyper["beta1"], hyper["beta2"], hyper["eps"]
        )
        self.amsgrad = hyper.get("amsgrad", True)
        self.step_count = int(hyper["step_count"])
        for slot in ("m", "v", "v_hat"):
            buf = getattr(self, slot)
            for name, p in self.params.items():
                buf[name] = records[f"opt.{slot}/{name}"].astype(p.data.dtype)
