"""Finite-difference verification of tape gradients.

Central differences with step 1e-5 on float64 values give roughly ten
significant digits, so per-operation checks are held to 1e-6 relative
error and a full composed training loss to 1e-4 (longer chains compound
roundoff). Relative error uses max(|a|, |b|, 1e-6) in the denominator so
near-zero gradients compare absolutely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError

FD_STEP = 1e-5
# The composed check differences a loss whose wavelet layers carry
# curvature of order omega0^2 = 100; a coarser step keeps truncation
# harmless while cutting float64 cancellation noise well under the
# tolerance (at 1e-5 the noise alone can reach ~1e-4 relative).
COMPOSED_FD_STEP = 1e-4
REL_ERR_FLOOR = 1e-6
OP_TOL = 1e-6
COMPOSED_TOL = 1e-4


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, REL_ERR_FLOOR)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_ERR_FLOOR)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def numerical_gradient(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one element at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = float(f(x))
        flat[i] = keep - step
        lo = float(f(x))
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


@dataclass
class GradCheckReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.results), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            status = "ok" if r.passed else "FAIL"
            out.append(f"{status:4s} {r.name:32s} max_rel_err={r.max_rel_err:.3e} tol={r.tol:.0e}")
        return out


def check_scalar_fn(name: str, build, params: list[np.ndarray],
                    tol: float = OP_TOL, step: float = FD_STEP) -> CheckResult:
    """Compare tape gradients of build(params)->Tensor scalar against FD.

    ``build`` receives the list of parameter Tensors and must return a
    scalar Tensor computed from them (recorded on the active tape).
    """
    tensors = [ad.Tensor(np.array(p, dtype=np.float64), requires_grad=True) for p in params]
    with ad.Tape() as tape:
        loss = build(tensors)
        if loss.values.size != 1:
            raise ContractError(f"gradcheck '{name}': build must return a scalar")
        tape.backward(loss)
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    for k in range(len(params)):
        def f(x, k=k):
            trial = [ad.Tensor(x if i == k else np.array(params[i], dtype=np.float64))
                     for i in range(len(params))]
            with ad.Tape():
                return build(trial).item()

        fd = numerical_gradient(f, params[k], step=step)
        worst = max(worst, relative_error(analytic[k], fd))
    return CheckResult(name=name, max_rel_err=worst, tol=tol)


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([0x67D, seed]))


def run_op_checks(seed: int = 0) -> GradCheckReport:
    """Finite-difference check every differentiable op at random inputs.

    Each op's output is contracted to a scalar with a fixed random weight
    so the incoming gradient exercises all elements.
    """
    report = GradCheckReport()
    rng = _rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4)) + 3.0  # offset keeps div and log well away from 0
    w = rng.normal(size=(3, 4))
    pos = rng.uniform(0.2, 2.0, size=(3, 4))
    m1 = rng.normal(size=(3, 5))
    m2 = rng.normal(size=(5, 2))
    wm = rng.normal(size=(3, 2))
    vec = rng.normal(size=4)
    wide = rng.normal(size=(3, 7))
    wide_coef = rng.normal(size=(3, 7))

    def contract(t, weights):
        return ad.reduce_sum(ad.mul(t, ad.Tensor(weights)))

    cases = [
        ("add", lambda p: contract(ad.add(p[0], p[1]), w), [a, b]),
        ("add_scalar", lambda p: contract(ad.add(p[0], 1.7), w), [a]),
        ("sub", lambda p: contract(ad.sub(p[0], p[1]), w), [a, b]),
        ("mul", lambda p: contract(ad.mul(p[0], p[1]), w), [a, b]),
        ("mul_scalar", lambda p: contract(ad.mul(p[0], -2.5), w), [a]),
        ("div", lambda p: contract(ad.div(p[0], p[1]), w), [a, b]),
        ("exp", lambda p: contract(ad.exp(p[0]), w), [a]),
        ("cos", lambda p: contract(ad.cos(p[0]), w), [a]),
        ("square", lambda p: contract(ad.square(p[0]), w), [a]),
        ("sigmoid", lambda p: contract(ad.sigmoid(p[0]), w), [a]),
        ("log", lambda p: contract(ad.log(p[0]), w), [pos]),
        ("gabor", lambda p: contract(ad.gabor(p[0], 10.0, 5.0), w), [0.1 * a]),
        ("softmax", lambda p: contract(ad.softmax(p[0]), w), [a]),
        ("matmul", lambda p: contract(ad.matmul(p[0], p[1]), wm), [m1, m2]),
        ("linear", lambda p: contract(ad.linear(p[0], p[1], p[2]), wm),
         [m1, m2, rng.normal(size=2)]),
        ("sum_all", lambda p: ad.reduce_sum(p[0]), [a]),
        ("sum_axis0", lambda p: ad.reduce_sum(ad.mul(ad.reduce_sum(p[0], axis=0),
                                                     ad.Tensor(w[0]))), [a]),
        ("mean_all", lambda p: ad.reduce_mean(p[0]), [a]),
        ("mean_axis1", lambda p: ad.reduce_sum(ad.mul(ad.reduce_mean(p[0], axis=1),
                                                      ad.Tensor(w[:, 0]))), [a]),
        ("broadcast_rows", lambda p: contract(ad.broadcast_rows(p[0], 3), w), [vec]),
        ("add_rowvec", lambda p: contract(ad.add_rowvec(p[0], p[1]), w), [a, vec]),
        ("concat_cols", lambda p: contract(ad.concat_cols(p[0], p[1]),
                                           np.concatenate([w, w], axis=1)), [a, b]),
        ("chain_gabor_matmul",
         lambda p: ad.reduce_mean(ad.square(ad.gabor(ad.matmul(p[0], p[1]), 10.0, 5.0))),
         [m1, m2]),
        ("chain_softmax_log",
         lambda p: ad.reduce_mean(ad.mul(ad.log(ad.softmax(p[0])),
                                         ad.Tensor(wide_coef))),
         [wide]),
    ]
    for name, build, params in cases:
        report.results.append(check_scalar_fn(name, build, params))
    return report


def run_model_check(seed: int = 0) -> GradCheckReport:
    """Finite-difference check the full training objective of a small model.

    Gradients with respect to every network weight, bias, and the latent
    vector are verified in one composed pass through the joint loss.
    """
    from .losses import LossWeights, training_loss
    from .model import FieldModel, ModelConfig

    cfg = ModelConfig(num_res_layers=2, hidden_width=8, latent_dim=4,
                      coord_dim=4, num_classes=4)
    model = FieldModel.init(cfg, seed=seed)
    rng = _rng(seed + 1)
    batch = 6
    coords = rng.uniform(0.0, 1.0, size=(batch, cfg.coord_dim))
    labels = rng.integers(0, cfg.num_classes, size=batch)
    intensities = rng.uniform(0.05, 0.95, size=batch)
    latent_values = rng.normal(scale=0.1, size=cfg.latent_dim)

    names = [*model.param_names(), "latent"]
    arrays = [*(model.params[n].values for n in model.param_names()), latent_values]
    weights = LossWeights()

    def build(tensors):
        params = dict(zip(names[:-1], tensors[:-1]))
        latent = tensors[-1]
        trial = model.with_params(params)
        seg, recon = trial.forward(ad.Tensor(coords), latent)
        return training_loss(seg, recon, labels, intensities,
                             list(params.values()), latent, weights).total

    report = GradCheckReport()
    report.results.append(
        check_scalar_fn("composed_training_loss", build,
                        [np.array(x) for x in arrays], tol=COMPOSED_TOL,
                        step=COMPOSED_FD_STEP))
    return report
