from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def hyperparameters(self):
        return dict(alpha=self.alpha, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied in place to ``params``.

    ``params`` and ``grads`` are parallel lists of float32 arrays. A ``None``
    gradient counts as zero.
    """
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise ValueError(f"Adam state tracks {len(state.first_moment)} arrays, got {len(params)}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if m.shape != p.shape:
            raise ValueError(f"Adam moment shape {m.shape} does not match parameter {p.shape}")
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / c1
        vhat = v / c2
        p -= (state.alpha * mhat / (np.sqrt(vhat) + state.epsilon)).astype(p.dtype)
    return params
