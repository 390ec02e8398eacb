"""Prior training: joint optimization of the field network and a
per-subject latent table.

Each training step visits one subject, draws one uniform time frame,
builds a full-volume batch for that frame (every observed voxel), and
takes one Adam step on the model parameters together with that subject's
latent row. Every latent row owns an independent optimizer state that
persists across epochs.

Randomness is hierarchical: epoch-level generators are derived from
(seed, stream, epoch), so a run resumed from an epoch-boundary
checkpoint replays exactly the same subject order and frame draws as an
uninterrupted run.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError, NumericalError
from .losses import LossReport, LossWeights, train_loss
from .model import FieldModel, ModelConfig
from .optim import Adam
from .serial import read_blob, write_blob
from .volume import VolumeSample, normalize_index

CKPT_MAGIC = "NISF-CKPT"
CKPT_VERSION = 1

LATENT_PRIOR_SIGMA = 0.1  # rows start from N(0, 1e-2)

# Seed-stream tags (entropy words mixed into per-purpose SeedSequences).
_STREAM_TABLE = 0x1A7
_STREAM_ORDER = 0x0E0
_STREAM_FRAME = 0x0F0

normalize_coords = normalize_index


@dataclass(frozen=True)
class TrainConfig:
    """Prior-training hyperparameters (architecture included)."""

    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 200
    lr_prior: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    log_every: int = 1         # steps between log rows

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.lr_prior <= 0:
            raise ContractError("lr_prior must be positive")

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "epochs": self.epochs,
                "lr_prior": self.lr_prior,
                "weights": {"alpha": self.weights.alpha,
                            "lambda_theta_phi": self.weights.lambda_theta_phi,
                            "lambda_h": self.weights.lambda_h},
                "seed": self.seed, "checkpoint_every": self.checkpoint_every,
                "log_every": self.log_every}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)

    def trajectory_dict(self) -> dict:
        """The fields that determine the optimization trajectory.

        Epoch count and I/O cadences are deliberately excluded: a longer
        run is an exact extension of a shorter one (per-epoch seed
        streams), and checkpoint/log cadence never touch the math.
        """
        d = self.to_dict()
        for key in ("epochs", "checkpoint_every", "log_every"):
            del d[key]
        return d

    def content_hash(self) -> str:
        blob = json.dumps(self.trajectory_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


class LatentTable:
    """Trainable per-subject latent rows plus their optimizer states."""

    def __init__(self, subject_ids: list[str], latent_dim: int, seed: int,
                 lr: float, sigma: float = LATENT_PRIOR_SIGMA):
        if len(set(subject_ids)) != len(subject_ids):
            raise ContractError("duplicate subject ids in latent table")
        if not subject_ids:
            raise ContractError("latent table needs at least one subject")
        self.subject_ids = list(subject_ids)
        self.latent_dim = latent_dim
        rng = np.random.default_rng(np.random.SeedSequence([_STREAM_TABLE, seed]))
        rows = rng.normal(0.0, sigma, size=(len(subject_ids), latent_dim))
        dt = ad.default_dtype()
        self.rows = {sid: Tensor(rows[i].astype(dt), requires_grad=True, name=f"h[{sid}]")
                     for i, sid in enumerate(subject_ids)}
        self.adams = {sid: Adam({"h": self.rows[sid]}, lr=lr) for sid in subject_ids}

    def __len__(self) -> int:
        return len(self.subject_ids)

    def row(self, subject_id: str) -> Tensor:
        if subject_id not in self.rows:
            raise ContractError(f"unknown subject {subject_id!r}")
        return self.rows[subject_id]

    def adam(self, subject_id: str) -> Adam:
        return self.adams[subject_id]

    def matrix(self) -> np.ndarray:
        return np.stack([self.rows[sid].values for sid in self.subject_ids])

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"latent.H": self.matrix()}
        out["adam_latent.m"] = np.stack([self.adams[s].m["h"] for s in self.subject_ids])
        out["adam_latent.v"] = np.stack([self.adams[s].v["h"] for s in self.subject_ids])
        out["adam_latent.t"] = np.array([self.adams[s].t for s in self.subject_ids],
                                        dtype=np.int64)
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        H = arrays["latent.H"]
        if H.shape != (len(self), self.latent_dim):
            raise ContractError(f"latent table shape {H.shape} != "
                                f"({len(self)}, {self.latent_dim})")
        for i, sid in enumerate(self.subject_ids):
            self.rows[sid].values[...] = H[i]
            self.adams[sid].load_state(int(arrays["adam_latent.t"][i]),
                                       {"h.m": arrays["adam_latent.m"][i],
                                        "h.v": arrays["adam_latent.v"][i]})


@dataclass
class Batch:
    """All observed voxels of one subject's time frame, raster order."""

    coords: np.ndarray       # [B,4] normalized
    intensities: np.ndarray  # [B,1] in [0,1]
    labels: np.ndarray       # [B] class ids
    excluded: int            # unobserved voxels dropped from the frame


def make_batch(volume: VolumeSample, t_index: int) -> Batch:
    """Full-volume batch for frame t: one row per observed voxel.

    Row order is deterministic raster (x-major C order). Voxels the
    observation mask excludes are dropped; their count is reported so
    sparse-data runs can account for coverage.
    """
    gx, gy, gz, gt = volume.shape
    if not 0 <= t_index < gt:
        raise ContractError(f"frame index {t_index} outside [0,{gt})")
    axes = [normalize_index(np.arange(n), n) for n in (gx, gy, gz)]
    grids = np.meshgrid(*axes, indexing="ij")
    spatial = np.stack([g.reshape(-1) for g in grids], axis=1)  # [B,3]
    t_val = normalize_index(t_index, gt)
    coords = np.concatenate([spatial, np.full((spatial.shape[0], 1), t_val)], axis=1)

    keep = volume.observed()[:, :, :, t_index].reshape(-1)
    excluded = int(np.count_nonzero(~keep))
    if excluded:
        coords = coords[keep]
    if coords.shape[0] == 0:
        raise ContractError(f"frame {t_index} has no observed voxels")
    intensities = volume.intensity[:, :, :, t_index].reshape(-1, 1)[keep]
    labels = volume.labels[:, :, :, t_index].reshape(-1)[keep]
    return Batch(coords=coords, intensities=np.ascontiguousarray(intensities),
                 labels=np.ascontiguousarray(labels), excluded=excluded)


@dataclass
class LogRow:
    step: int
    epoch: int
    subject_id: str
    t_index: int
    report: LossReport
    wall_time: float

    @staticmethod
    def csv_header() -> str:
        return ",".join(["step", "epoch", "subject_id", "t_index",
                         *LossReport.csv_fields(), "wall_time"])

    def csv(self) -> str:
        return ",".join([str(self.step), str(self.epoch), self.subject_id,
                         str(self.t_index), *self.report.csv_row(),
                         f"{self.wall_time:.3f}"])


@dataclass
class TrainResult:
    model: FieldModel
    table: LatentTable
    log: list[LogRow]
    final_checkpoint: str | None
    global_step: int


def _epoch_rngs(seed: int, epoch: int) -> tuple[np.random.Generator, np.random.Generator]:
    order = np.random.default_rng(np.random.SeedSequence([_STREAM_ORDER, seed, epoch]))
    frame = np.random.default_rng(np.random.SeedSequence([_STREAM_FRAME, seed, epoch]))
    return order, frame


def train_prior(subjects: list[VolumeSample], config: TrainConfig,
                out_dir: str | None = None, resume_from: str | None = None,
                log_file=None) -> TrainResult:
    """Run the prior-training loop over epochs; optionally resumable.

    ``subjects`` order defines latent-table row order and must match
    between original and resumed runs (the checkpoint records the ids
    and refuses a mismatch). ``log_file`` is an optional open text file
    receiving CSV rows as they are produced.
    """
    if not subjects:
        raise ContractError("train_prior needs at least one subject")
    ids = [s.subject_id for s in subjects]
    by_id = {s.subject_id: s for s in subjects}
    for s in subjects:
        if int(s.labels.max()) >= config.model.num_classes:
            raise ContractError(f"subject {s.subject_id}: label ids exceed "
                                f"num_classes {config.model.num_classes}")

    if resume_from is not None:
        model, table, adam_model, start_epoch, global_step = load_checkpoint(
            resume_from, config, ids)
    else:
        model = FieldModel.init(config.model, seed=config.seed)
        model.set_trainable(True)
        table = LatentTable(ids, config.model.latent_dim, seed=config.seed,
                            lr=config.lr_prior)
        adam_model = Adam({n: model.params[n] for n in model.param_names()},
                          lr=config.lr_prior)
        start_epoch, global_step = 0, 0

    log: list[LogRow] = []
    t_start = time.monotonic()
    final_ckpt = None

    for epoch in range(start_epoch, config.epochs):
        order_rng, frame_rng = _epoch_rngs(config.seed, epoch)
        order = order_rng.permutation(len(ids))
        for visit in order:
            sid = ids[visit]
            subject = by_id[sid]
            t_index = int(frame_rng.integers(subject.num_frames))
            batch = make_batch(subject, t_index)
            h = table.row(sid)
            try:
                with Tape() as tape:
                    terms = train_loss(model, h, batch.coords, batch.intensities,
                                       batch.labels, config.weights)
                    report = terms.report()
                    tape.backward(terms.total)
            except NumericalError as exc:
                raise NumericalError(
                    f"non-finite loss at step {global_step} (epoch {epoch}, "
                    f"subject {sid}, frame {t_index}): {exc}") from exc
            adam_model.step()
            table.adam(sid).step()
            adam_model.reset_grads()
            table.adam(sid).reset_grads()
            global_step += 1
            if config.log_every and global_step % config.log_every == 0:
                row = LogRow(step=global_step, epoch=epoch, subject_id=sid,
                             t_index=t_index, report=report,
                             wall_time=time.monotonic() - t_start)
                log.append(row)
                if log_file is not None:
                    log_file.write(row.csv() + "\n")
                    log_file.flush()
        at_cadence = config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0
        if out_dir is not None and (at_cadence or epoch + 1 == config.epochs):
            final_ckpt = os.path.join(out_dir, f"ckpt_epoch{epoch + 1:05d}.nckpt")
            save_checkpoint(final_ckpt, model, table, adam_model, config,
                            epoch_done=epoch + 1, global_step=global_step)
    return TrainResult(model=model, table=table, log=log,
                       final_checkpoint=final_ckpt, global_step=global_step)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, model: FieldModel, table: LatentTable,
                    adam_model: Adam, config: TrainConfig, epoch_done: int,
                    global_step: int) -> None:
    header = {
        "train_config": config.to_dict(),
        "config_hash": config.content_hash(),
        "model_config": model.config.to_dict(),
        "subject_ids": table.subject_ids,
        "epoch_done": epoch_done,
        "global_step": global_step,
        "adam_model_t": adam_model.t,
    }
    arrays: dict[str, np.ndarray] = {}
    for name in model.param_names():
        arrays[f"model.{name}"] = model.params[name].values
    for key, arr in adam_model.state_arrays().items():
        arrays[f"adam_model.{key}"] = arr
    arrays.update(table.state_arrays())
    with open(path, "wb") as f:
        write_blob(f, CKPT_MAGIC, CKPT_VERSION, header, arrays)


def load_checkpoint(path: str, config: TrainConfig | None = None,
                    expect_ids: list[str] | None = None
                    ) -> tuple[FieldModel, LatentTable, Adam, int, int]:
    """Restore (model, table, model optimizer, next_epoch, global_step)."""
    with open(path, "rb") as f:
        _, header, arrays = read_blob(f, CKPT_MAGIC, CKPT_VERSION)
    saved_config = TrainConfig.from_dict(header["train_config"])
    if config is not None and config.content_hash() != header["config_hash"]:
        raise ContractError("checkpoint was written under a different config; "
                            "resuming would not reproduce the original run")
    cfg = (config or saved_config)
    ids = list(header["subject_ids"])
    if expect_ids is not None and ids != list(expect_ids):
        raise ContractError("checkpoint subject ids do not match the dataset")

    params = {name: Tensor(arrays[f"model.{name}"], requires_grad=True)
              for name in FieldModel._names_for(cfg.model)}
    model = FieldModel(cfg.model, params)
    adam_model = Adam({n: model.params[n] for n in model.param_names()},
                      lr=cfg.lr_prior)
    adam_model.load_state(int(header["adam_model_t"]),
                          {k[len("adam_model."):]: v for k, v in arrays.items()
                           if k.startswith("adam_model.")})
    table = LatentTable(ids, cfg.model.latent_dim, seed=cfg.seed, lr=cfg.lr_prior)
    table.load_state(arrays)
    return model, table, adam_model, int(header["epoch_done"]), int(header["global_step"])


def latest_checkpoint(out_dir: str) -> str | None:
    names = sorted(n for n in os.listdir(out_dir)
                   if n.startswith("ckpt_epoch") and n.endswith(".nckpt"))
    return os.path.join(out_dir, names[-1]) if names else None
