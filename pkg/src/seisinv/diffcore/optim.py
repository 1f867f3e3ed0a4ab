"""Adam with bias correction and the learning-rate schedules."""

import numpy as np


def poly_lr(iteration, max_iterations, base_lr, power=0.9):
    """base_lr * (1 - t/T)^power."""
    if not 0 <= iteration <= max_iterations:
        raise ValueError(
            f"iteration {iteration} outside [0, {max_iterations}]")
    return base_lr * (1.0 - iteration / max_iterations) ** power


def step_decay_lr(epoch, base_lr, drop=0.1, every=15):
    """base_lr scaled by drop every `every` epochs."""
    if epoch < 0:
        raise ValueError(f"negative epoch {epoch}")
    return base_lr * drop ** (epoch // every)


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8) over Parameters."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                name = getattr(p, "name", f"param[{i}]")
                raise FloatingPointError(
                    f"non-finite gradient for {name} at step {t}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / (1.0 - b1 ** t)
            vhat = self.v[i] / (1.0 - b2 ** t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_tensors(self, names):
        """Moments keyed by parameter name, plus the step counter."""
        state = {"adam.step": np.asarray([float(self.step_count)])}
        for name, m, v in zip(names, self.m, self.v):
            state[f"adam.m.{name}"] = m
            state[f"adam.v.{name}"] = v
        return state

    def load_state_tensors(self, names, state):
        self.step_count = int(state["adam.step"][0])
        for i, name in enumerate(names):
            self.m[i] = state[f"adam.m.{name}"].astype(np.float32).copy()
            self.v[i] = state[f"adam.v.{name}"].astype(np.float32).copy()
