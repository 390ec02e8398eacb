"""Latent-only inference on unseen subjects.

The model is frozen; a fresh latent drawn from N(0, 1e-4) is optimized
against the intensity reconstruction objective alone. Segmentations are
then decoded from the fitted latent: the bet is that a latent explaining
the image also lands where the segmentation head is accurate.

Early stopping uses a step count selected on validation subjects, not a
per-subject criterion: at inference time there is no ground truth to
monitor, so the only honest knob is how long to optimize.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError, NumericalError
from .losses import LossWeights, inference_loss
from .model import FieldModel
from .optim import Adam, select_trainables
from .training import make_batch
from .volume import VolumeSample

INFER_INIT_SIGMA = 0.01  # h starts from N(0, 1e-4)

_STREAM_INIT = 0x1F17
_STREAM_SAMPLE = 0x5A30


@dataclass(frozen=True)
class InferConfig:
    """Inference-time optimization settings."""

    max_steps: int = 1000
    selected_steps: int | None = None  # validation-chosen; defaults to max_steps
    lr_infer: float = 1e-4
    lambda_h: float = 1e-4
    seed: int = 0
    record_cadence: int = 50
    points_per_step: int | None = None  # None = all observed points every step

    def __post_init__(self):
        if self.max_steps < 0:
            raise ContractError("max_steps must be >= 0")
        steps = self.steps_to_run
        if not 0 <= steps <= self.max_steps:
            raise ContractError(f"selected_steps {steps} outside [0, {self.max_steps}]")
        if self.lr_infer <= 0:
            raise ContractError("lr_infer must be positive")
        if self.record_cadence < 1:
            raise ContractError("record_cadence must be >= 1")
        if self.points_per_step is not None and self.points_per_step < 1:
            raise ContractError("points_per_step must be >= 1 when set")

    @property
    def steps_to_run(self) -> int:
        return self.max_steps if self.selected_steps is None else self.selected_steps

    def weights(self) -> LossWeights:
        # alpha is a training-only coefficient; the reconstruction term
        # enters the inference objective unweighted.
        return LossWeights(alpha=1.0, lambda_theta_phi=0.0, lambda_h=self.lambda_h)


@dataclass
class InferenceTrace:
    """Recorded optimization history: step 0 plus every cadence-th step."""

    steps: list[int] = field(default_factory=list)
    recon_loss: list[float] = field(default_factory=list)
    latent_norm: list[float] = field(default_factory=list)
    dice_mean: list[float] = field(default_factory=list)       # empty without analysis
    dice_per_class: list[tuple] = field(default_factory=list)

    def append(self, step: int, recon: float, norm: float,
               dice: tuple | None = None) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ContractError("trace steps must be strictly increasing")
        if not (np.isfinite(recon) and np.isfinite(norm)):
            raise NumericalError(f"non-finite trace entry at step {step}")
        self.steps.append(step)
        self.recon_loss.append(recon)
        self.latent_norm.append(norm)
        if dice is not None:
            self.dice_per_class.append(tuple(dice))
            self.dice_mean.append(float(np.mean(dice)))

    @property
    def has_dice(self) -> bool:
        return len(self.dice_mean) == len(self.steps) and bool(self.steps)

    def csv_header(self) -> str:
        cols = ["step", "recon_loss", "latent_norm"]
        if self.has_dice:
            cols += [f"dice_class{i + 1}" for i in range(len(self.dice_per_class[0]))]
            cols += ["dice_mean"]
        return ",".join(cols)

    def csv_rows(self) -> list[str]:
        rows = []
        for i, step in enumerate(self.steps):
            cells = [str(step), repr(self.recon_loss[i]), repr(self.latent_norm[i])]
            if self.has_dice:
                cells += [repr(v) for v in self.dice_per_class[i]]
                cells += [repr(self.dice_mean[i])]
            rows.append(",".join(cells))
        return rows


def evaluate_points(model: FieldModel, h, coords: np.ndarray, chunk: int = 16384
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frozen forward over arbitrarily many points.

    Returns (labels [B], seg_probs [B,M], intensity [B]). Chunking does
    not change values: the forward pass is point-wise independent.
    """
    coords = np.asarray(coords, dtype=ad.default_dtype())
    h_arr = h.values if isinstance(h, Tensor) else np.asarray(h)
    h_t = Tensor(h_arr)
    probs_parts, int_parts = [], []
    for lo in range(0, coords.shape[0], chunk):
        out = model.forward(coords[lo:lo + chunk], h_t)
        probs_parts.append(out.seg_probs.values)
        int_parts.append(out.intensity.values[:, 0])
    probs = np.concatenate(probs_parts, axis=0)
    intensity = np.concatenate(int_parts, axis=0)
    return np.argmax(probs, axis=1).astype(np.uint8), probs, intensity


def decode_segmentation(model: FieldModel, h, coords
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Hard labels (argmax) and soft probabilities at the given coords."""
    labels, probs, _ = evaluate_points(model, h, coords)
    return labels, probs


def full_observations(volume: VolumeSample) -> tuple[np.ndarray, np.ndarray]:
    """(coords [B,4], intensities [B,1]) over every observed voxel, all frames."""
    coords, inten = [], []
    for t in range(volume.num_frames):
        frame_mask = volume.observed()[:, :, :, t]
        if not frame_mask.any():
            continue
        batch = make_batch(volume, t)
        coords.append(batch.coords)
        inten.append(batch.intensities)
    if not coords:
        raise ContractError("volume has no observed voxels")
    return np.concatenate(coords, axis=0), np.concatenate(inten, axis=0)


def sample_volume(model: FieldModel, h, volume: VolumeSample) -> VolumeSample:
    """Decode the fitted field on a volume's own voxel grid.

    The result carries predicted labels and (clipped) intensities on the
    same grid and spacing, with no mask and no generator geometry.
    """
    X, Y, Z, T = volume.shape
    intensity = np.empty(volume.shape, dtype=np.float64)
    labels = np.empty(volume.shape, dtype=np.uint8)
    unmasked = replace(volume, mask=None)
    for t in range(T):
        batch = make_batch(unmasked, t)
        lab, _, inten = evaluate_points(model, h, batch.coords)
        intensity[:, :, :, t] = inten.reshape(X, Y, Z)
        labels[:, :, :, t] = lab.reshape(X, Y, Z)
    return VolumeSample(subject_id=volume.subject_id,
                        intensity=np.clip(intensity, 0.0, 1.0), labels=labels,
                        spacing=volume.spacing)


def infer_latent(model: FieldModel, coords: np.ndarray, intensities: np.ndarray,
                 config: InferConfig, analysis: tuple[np.ndarray, np.ndarray] | None = None
                 ) -> tuple[Tensor, InferenceTrace]:
    """Fit a fresh latent to intensity observations; the model never moves.

    ``analysis`` optionally supplies (eval_coords, eval_labels) so the
    trace records Dice over the run; the optimization itself never sees
    labels. The trace always records the full-observation reconstruction
    BCE, even when steps draw subsampled batches.
    """
    coords = np.asarray(coords, dtype=ad.default_dtype())
    intensities = np.asarray(intensities, dtype=ad.default_dtype()).reshape(-1, 1)
    if coords.ndim != 2 or coords.shape[0] != intensities.shape[0]:
        raise ContractError(f"coords {coords.shape} and intensities "
                            f"{intensities.shape} do not align")
    if coords.shape[0] == 0:
        raise ContractError("inference needs at least one observation")
    if coords.size and (coords.min() < 0.0 or coords.max() > 1.0):
        raise ContractError("observation coordinates must lie in [0,1]^N")

    checksum_before = model.checksum()
    rng = np.random.default_rng(np.random.SeedSequence([_STREAM_INIT, config.seed]))
    h = Tensor(rng.normal(0.0, INFER_INIT_SIGMA, size=model.config.latent_dim)
               .astype(ad.default_dtype()), requires_grad=True, name="h")
    trainables = select_trainables("inference", model, h)
    adam = Adam(trainables, lr=config.lr_infer)
    weights = config.weights()
    sample_rng = np.random.default_rng(np.random.SeedSequence([_STREAM_SAMPLE, config.seed]))
    num_points = coords.shape[0]

    trace = InferenceTrace()

    def record(step: int) -> None:
        _, probs, inten = evaluate_points(model, h, coords)
        recon = float(np.mean(-(intensities[:, 0] * np.log(np.maximum(inten, ad.LOG_EPS))
                                + (1.0 - intensities[:, 0])
                                * np.log(np.maximum(1.0 - inten, ad.LOG_EPS)))))
        norm = float(np.sqrt(np.sum(h.values * h.values)))
        dice_vals = None
        if analysis is not None:
            eval_coords, eval_labels = analysis
            pred, _, _ = evaluate_points(model, h, eval_coords)
            num_classes = model.config.num_classes
            from .metrics import dice  # local import avoids a cycle at module load
            dice_vals = tuple(dice(pred, eval_labels, c) for c in range(1, num_classes))
        trace.append(step, recon, norm, dice_vals)

    steps_to_run = config.steps_to_run
    record(0)
    for step in range(1, steps_to_run + 1):
        if config.points_per_step is not None and config.points_per_step < num_points:
            idx = sample_rng.choice(num_points, size=config.points_per_step, replace=False)
            step_coords, step_targets = coords[idx], intensities[idx]
        else:
            step_coords, step_targets = coords, intensities
        with Tape() as tape:
            _, intensity = model.forward(step_coords, h)
            terms = inference_loss(intensity, step_targets, h, weights)
            tape.backward(terms.total)
        adam.step()
        adam.reset_grads()
        if step % config.record_cadence == 0 or step == steps_to_run:
            record(step)

    if model.checksum() != checksum_before:
        raise ContractError("model parameters changed during inference")
    return h, trace


def select_early_stop_steps(traces: list[InferenceTrace]) -> int:
    """Step count maximizing the mean validation Dice; ties break smaller.

    All traces must carry Dice on an identical step grid.
    """
    if not traces:
        raise ContractError("early-stop selection needs at least one trace")
    grid = traces[0].steps
    for tr in traces:
        if not tr.has_dice:
            raise ContractError("early-stop selection needs Dice in every trace")
        if tr.steps != grid:
            raise ContractError("early-stop selection needs identical step grids")
    mean_curve = np.mean([tr.dice_mean for tr in traces], axis=0)
    best = int(np.argmax(mean_curve))  # argmax returns the first (smallest) maximizer
    return grid[best]


def analysis_points(volume: VolumeSample, frames: tuple[int, ...] | None = None
                    ) -> tuple[np.ndarray, np.ndarray]:
    """(coords, true labels) for trace Dice, from ground-truth frames.

    Defaults to two frames spanning the cycle (first and mid), keeping
    per-record evaluation cost bounded.
    """
    if frames is None:
        frames = (0, volume.num_frames // 2) if volume.num_frames > 1 else (0,)
    unmasked = replace(volume, mask=None)  # ground truth exists even where unobserved
    coords, labels = [], []
    for t in sorted(set(frames)):
        b = make_batch(unmasked, t)
        coords.append(b.coords)
        labels.append(volume.labels[:, :, :, t].reshape(-1))
    return np.concatenate(coords, axis=0), np.concatenate(labels, axis=0)


@dataclass
class ValidationResult:
    traces: list[InferenceTrace]
    steps: list[int]
    mean_dice: np.ndarray
    selected_steps: int


def validate_prior(model: FieldModel, val_subjects: list[VolumeSample],
                   config: InferConfig) -> ValidationResult:
    """Dice-vs-step curves on validation subjects and the selected stop.

    Each subject gets an independent seed derived from the config seed;
    inference runs the full ``max_steps`` budget so the curve's shape
    (rise then fall) is observable past the eventual selection.
    """
    if not val_subjects:
        raise ContractError("validation needs at least one subject")
    traces = []
    for i, subject in enumerate(val_subjects):
        cfg = replace(config, selected_steps=None, seed=config.seed + 1000 * (i + 1))
        obs_coords, obs_inten = full_observations(subject)
        _, trace = infer_latent(model, obs_coords, obs_inten, cfg,
                                analysis=analysis_points(subject))
        traces.append(trace)
    mean_curve = np.mean([tr.dice_mean for tr in traces], axis=0)
    selected = select_early_stop_steps(traces)
    return ValidationResult(traces=traces, steps=list(traces[0].steps),
                            mean_dice=mean_curve, selected_steps=selected)
