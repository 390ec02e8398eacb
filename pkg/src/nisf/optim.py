"""Adam optimizer and trainable-set selection.

The same optimizer drives prior training (model parameters plus the
sampled subject's latent row) and inference (one fresh latent only).
Bias-corrected update, in-place on parameter values; gradient arrays are
read but never modified (the caller resets them between steps).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, NumericalError

ADAM_LR = 1e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Adam:
    """Adam over a named parameter dict.

    Moments are float64 regardless of parameter dtype; the update is
    cast back on assignment. One instance per training context; latent
    rows each own an independent instance so subject j's moments never
    mix with subject k's.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = ADAM_LR,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        if not params:
            raise ContractError("Adam needs at least one parameter")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ContractError("Adam betas must lie in [0,1)")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {n: np.zeros(p.shape, dtype=np.float64) for n, p in self.params.items()}
        self.v = {n: np.zeros(p.shape, dtype=np.float64) for n, p in self.params.items()}

    def step(self) -> None:
        """One bias-corrected update from current .grad values."""
        grads = {}
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
            if p.grad.shape != p.values.shape:
                raise ContractError(f"parameter {name!r}: grad shape {p.grad.shape} "
                                    f"!= value shape {p.values.shape}")
            if not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"parameter {name!r} has non-finite gradient")
            grads[name] = p.grad
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name].astype(np.float64, copy=False)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.values -= update.astype(p.values.dtype, copy=False)

    def reset_grads(self) -> None:
        for p in self.params.values():
            p.reset_grad()

    # -- persistence (training checkpoints) ----------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"{name}.m"] = self.m[name]
            out[f"{name}.v"] = self.v[name]
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        if t < 0:
            raise ContractError("Adam step counter must be >= 0")
        for name, p in self.params.items():
            for kind, dest in (("m", self.m), ("v", self.v)):
                key = f"{name}.{kind}"
                if key not in arrays:
                    raise ContractError(f"optimizer state missing {key!r}")
                arr = np.asarray(arrays[key], dtype=np.float64)
                if arr.shape != p.shape:
                    raise ContractError(f"optimizer state {key!r} shape {arr.shape} "
                                        f"!= parameter shape {p.shape}")
                dest[name] = arr.copy()
        self.t = int(t)


def select_trainables(mode: str, model, latent: Tensor) -> dict[str, Tensor]:
    """Choose which tensors the optimizer may update, and mark them.

    ``prior_training``: model parameters and the latent, all trainable.
    ``inference``: the latent exactly; model parameters are frozen
    (requires_grad cleared) so the tape cannot even record gradients
    for them.
    """
    if mode not in ("prior_training", "inference"):
        raise ContractError(f"unknown trainable mode {mode!r}")
    if latent.ndim != 1 or latent.shape[0] != model.config.latent_dim:
        raise ContractError(f"latent shape {latent.shape} does not match model "
                            f"latent_dim {model.config.latent_dim}")
    latent.requires_grad = True
    if mode == "prior_training":
        model.set_trainable(True)
        out = {name: model.params[name] for name in model.param_names()}
        out["latent"] = latent
        return out
    model.set_trainable(False)
    return {"latent": latent}
