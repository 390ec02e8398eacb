"""The two-headed residual field network.

One MLP trunk maps a concatenated (coordinate, latent) input through
Gabor-activated residual blocks; a softmax head emits per-class
segmentation probabilities and a sigmoid head emits image intensity.
Both heads read the same trunk features, which is what lets a latent
fitted on intensities alone carry segmentation information.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .serial import read_blob, write_blob

MODEL_MAGIC = "NISF-MODEL"
MODEL_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults: 4 coordinates (x, y, z, t), 128-dim latent, 8 residual
    layers of width 128, 4 classes (background, LV pool, LV myocardium,
    RV pool). Class 0 is background so the softmax covers every point in
    the domain.
    """

    coord_dim: int = 4
    latent_dim: int = 128
    hidden_width: int = 128
    num_res_layers: int = 8
    num_classes: int = 4
    gabor_omega0: float = 10.0
    gabor_s0: float = 5.0

    def __post_init__(self):
        if self.coord_dim < 1 or self.latent_dim < 1:
            raise ContractError("coord_dim and latent_dim must be >= 1")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.num_res_layers < 1:
            raise ContractError("num_res_layers must be >= 1")
        if self.hidden_width < 1:
            raise ContractError("hidden_width must be >= 1")
        if self.gabor_omega0 <= 0 or self.gabor_s0 <= 0:
            raise ContractError("wavelet frequency and spread must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_count(cfg: ModelConfig) -> int:
    """Total learnable parameter count as a pure function of the config."""
    w, m = cfg.hidden_width, cfg.num_classes
    n_in = (cfg.coord_dim + cfg.latent_dim) * w + w
    n_res = cfg.num_res_layers * 2 * (w * w + w)
    n_heads = (w * m + m) + (w * 1 + 1)
    return n_in + n_res + n_heads


class FieldOutput:
    """Forward result: (seg_probs, intensity) plus query metadata.

    Unpacks as the pair ``seg_probs, intensity``. ``out_of_range`` is a
    boolean row mask marking coordinates outside [0,1]^N; such queries
    are legal (extrapolation) but callers that care must check the flag.
    """

    __slots__ = ("seg_probs", "intensity", "out_of_range")

    def __init__(self, seg_probs: Tensor, intensity: Tensor, out_of_range: np.ndarray):
        self.seg_probs = seg_probs
        self.intensity = intensity
        self.out_of_range = out_of_range

    def __iter__(self):
        yield self.seg_probs
        yield self.intensity


class FieldModel:
    """Parameter container + forward pass. Parameters live in a dict keyed
    by canonical names; ``param_names`` fixes the serialization order."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        expected = set(self._names_for(config))
        if set(params) != expected:
            missing = expected - set(params)
            extra = set(params) - expected
            raise ContractError(f"parameter set mismatch: missing={sorted(missing)} "
                                f"extra={sorted(extra)}")
        self.params = params

    # -- construction -------------------------------------------------

    @staticmethod
    def _names_for(cfg: ModelConfig) -> list[str]:
        names = ["w_in", "b_in"]
        for i in range(cfg.num_res_layers):
            names += [f"res{i}_w1", f"res{i}_b1", f"res{i}_w2", f"res{i}_b2"]
        names += ["w_seg", "b_seg", "w_int", "b_int"]
        return names

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "FieldModel":
        """Seeded random initialization.

        Scales are tuned so trunk activations on unit-cube coordinates
        with prior-scale latents have standard deviation well inside
        [0.1, 2.0]: the Gabor pre-activation must stay within the
        wavelet's envelope (|s0*x| around 1) or the trunk collapses to
        its skip path. Heads start small so initial predictions sit near
        uniform / 0.5 without being exactly degenerate.
        """
        rng = np.random.default_rng(np.random.SeedSequence([0xF1E1D, seed]))
        dt = ad.default_dtype()
        w = cfg.hidden_width

        def normal(scale, *shape):
            return Tensor(rng.normal(0.0, scale, size=shape).astype(dt), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

        params: dict[str, Tensor] = {}
        fan_in = cfg.coord_dim + cfg.latent_dim
        params["w_in"] = normal(1.0 / np.sqrt(fan_in), fan_in, w)
        params["b_in"] = zeros(w)
        # Pre-activation std target ~= 1/(2*s0); the 1/sqrt(w) keeps it
        # stable as trunk variance accumulates over residual layers.
        pre_scale = 1.0 / (2.0 * cfg.gabor_s0)
        for i in range(cfg.num_res_layers):
            params[f"res{i}_w1"] = normal(pre_scale * np.sqrt(3.0 / w), w, w)
            params[f"res{i}_b1"] = normal(pre_scale, w)
            params[f"res{i}_w2"] = normal(0.5 / np.sqrt(w), w, w)
            params[f"res{i}_b2"] = zeros(w)
        params["w_seg"] = normal(0.1 / np.sqrt(w), w, cfg.num_classes)
        params["b_seg"] = zeros(cfg.num_classes)
        params["w_int"] = normal(0.1 / np.sqrt(w), w, 1)
        params["b_int"] = zeros(1)
        return cls(cfg, params)

    def with_params(self, params: dict[str, Tensor]) -> "FieldModel":
        """Same architecture with a replacement parameter dict."""
        return FieldModel(self.config, params)

    # -- parameter access ---------------------------------------------

    def param_names(self) -> list[str]:
        return self._names_for(self.config)

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in self.param_names()]

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def checksum(self) -> str:
        """SHA-256 over canonical little-endian parameter bytes."""
        h = hashlib.sha256()
        for name in self.param_names():
            arr = self.params[name].values
            h.update(name.encode("ascii"))
            h.update(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()

    # -- evaluation ----------------------------------------------------

    def forward(self, coords, latent) -> FieldOutput:
        """Evaluate both heads at a batch of coordinates.

        coords: [B, N] tensor or array; latent: [d] vector (broadcast to
        all rows) or [B, d] per-row conditioning. Coordinates are
        expected in [0,1]^N; rows outside are evaluated anyway and
        flagged in ``out_of_range``.
        """
        cfg = self.config
        c = coords if isinstance(coords, Tensor) else Tensor(coords)
        h = latent if isinstance(latent, Tensor) else Tensor(latent)
        if c.ndim != 2 or c.shape[1] != cfg.coord_dim:
            raise DimensionError(f"coords must be [B,{cfg.coord_dim}], got {c.shape}")
        batch = c.shape[0]
        if h.ndim == 1:
            if h.shape[0] != cfg.latent_dim:
                raise DimensionError(f"latent length {h.shape[0]} != {cfg.latent_dim}")
            h_rows = ad.broadcast_rows(h, batch)
        elif h.ndim == 2 and h.shape == (batch, cfg.latent_dim):
            h_rows = h
        elif h.ndim == 2 and h.shape == (1, cfg.latent_dim):
            h_rows = ad.broadcast_rows(h, batch)
        else:
            raise DimensionError(f"latent must be [{cfg.latent_dim}] or "
                                 f"[{batch},{cfg.latent_dim}], got {h.shape}")

        p = self.params
        x = ad.concat_cols(c, h_rows)
        x = ad.linear(x, p["w_in"], p["b_in"])
        for i in range(cfg.num_res_layers):
            pre = ad.linear(x, p[f"res{i}_w1"], p[f"res{i}_b1"])
            psi = ad.gabor(pre, cfg.gabor_omega0, cfg.gabor_s0)
            x = ad.add(x, ad.linear(psi, p[f"res{i}_w2"], p[f"res{i}_b2"]))
        seg = ad.softmax(ad.linear(x, p["w_seg"], p["b_seg"]))
        intensity = ad.sigmoid(ad.linear(x, p["w_int"], p["b_int"]))
        oor = np.any((c.values < 0.0) | (c.values > 1.0), axis=1)
        return FieldOutput(seg, intensity, oor)

    def trunk_activations(self, coords, latent) -> list[np.ndarray]:
        """Values of the input projection and each residual block output.

        Diagnostic used to check initialization scale health.
        """
        cfg = self.config
        c = coords if isinstance(coords, Tensor) else Tensor(coords)
        h = latent if isinstance(latent, Tensor) else Tensor(latent)
        if h.ndim == 1 or h.shape[0] == 1:
            h_rows = ad.broadcast_rows(h, c.shape[0])
        else:
            h_rows = h
        p = self.params
        acts = []
        x = ad.linear(ad.concat_cols(c, h_rows), p["w_in"], p["b_in"])
        acts.append(x.values.copy())
        for i in range(cfg.num_res_layers):
            pre = ad.linear(x, p[f"res{i}_w1"], p[f"res{i}_b1"])
            psi = ad.gabor(pre, cfg.gabor_omega0, cfg.gabor_s0)
            x = ad.add(x, ad.linear(psi, p[f"res{i}_w2"], p[f"res{i}_b2"]))
            acts.append(x.values.copy())
        return acts

    # -- persistence ---------------------------------------------------

    def save(self, path, seed: int | None = None) -> None:
        header = {"config": self.config.to_dict(), "param_count": self.num_params,
                  "seed": seed}
        arrays = {name: self.params[name].values for name in self.param_names()}
        with open(path, "wb") as f:
            write_blob(f, MODEL_MAGIC, MODEL_VERSION, header, arrays)

    @classmethod
    def load(cls, path, trainable: bool = False) -> "FieldModel":
        with open(path, "rb") as f:
            _, header, arrays = read_blob(f, MODEL_MAGIC, MODEL_VERSION)
        cfg = ModelConfig.from_dict(header["config"])
        params = {name: Tensor(arr, requires_grad=trainable) for name, arr in arrays.items()}
        model = cls(cfg, params)
        if model.num_params != header.get("param_count"):
            raise ContractError("checkpoint param_count disagrees with payload")
        return model
