import collections

import numpy as np

from typing import Dict, Iterable, Tuple  # noqa F401

from mapgan.autodiff.tensor import DTYPE, Tensor  # noqa F401

DEFAULT_LR = 2e-4
DEFAULT_BETA1 = 0.5
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8


class MissingGradientError(ValueError):
    pass


class AdamState(object):
    """First/second moment estimates per named parameter, plus the step count."""

    def __init__(self, lr=DEFAULT_LR, beta1=DEFAULT_BETA1, beta2=DEFAULT_BETA2, eps=DEFAULT_EPS):
        if lr <= 0:
            raise ValueError("learning rate must be positive, got {}".format(lr))
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("betas must be in [0, 1)")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = collections.OrderedDict()  # type: Dict[str, np.ndarray]
        self.v = collections.OrderedDict()  # type: Dict[str, np.ndarray]

    def __repr__(self):
        return "AdamState(lr={!r}, beta1={!r}, beta2={!r}, eps={!r}, t={!r})".format(
            self.lr, self.beta1, self.beta2, self.eps, self.t
        )

    def ensure_moments(self, named_params):
        # type: (Iterable[Tuple[str, Tensor]]) -> None
        for name, param in named_params:
            if name not in self.m:
                self.m[name] = np.zeros(param.shape, dtype=DTYPE)
                self.v[name] = np.zeros(param.shape, dtype=DTYPE)

    def named_buffers(self, prefix=""):
        for name, moment in self.m.items():
            yield prefix + "m." + name, moment
        for name, moment in self.v.items():
            yield prefix + "v." + name, moment


def adam_step(named_params, state):
    # type: (Iterable[Tuple[str, Tensor]], AdamState) -> None
    """Bias-corrected Adam update, applied to parameter data in place."""
    named_params = list(named_params)
    for name, param in named_params:
        if param.grad is None:
            raise MissingGradientError(
                "parameter {!r} has no gradient for this step".format(name)
            )

    state.ensure_moments(named_params)
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t

    for name, param in named_params:
        grad = param.grad
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (grad * grad)

        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(DTYPE)
