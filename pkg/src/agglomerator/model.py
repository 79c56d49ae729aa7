"""Full model assembly: tokenizer front end, column lattice, both heads.

Parameters live in one flat dict keyed by dotted paths (tokenizer.*,
lattice.*, h1.*, h2.*), which is also the checkpoint manifest namespace.
"""

from __future__ import annotations

import numpy as np

from . import checkpoint, heads, lattice, tokenizer
from . import tensor as T
from .config import TrainConfig
from .rng import RngStreams
from .tensor import Tensor

BACKBONE_PREFIXES = ("tokenizer.", "lattice.", "h1.")


class Agglomerator:
    """Column-lattice classifier with a contrastive projection head."""

    def __init__(self, cfg: TrainConfig, streams: RngStreams | None = None):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.float32 if cfg.precision == "float32" else np.float64
        height, width, channels = cfg.geometry()
        self.grid_h, self.grid_w = tokenizer.check_geometry(height, width, channels)
        self.channels = channels
        streams = streams or RngStreams(cfg.seed)
        self.streams = streams
        gen = streams.derive("init")

        self.params: dict[str, Tensor] = {}
        if cfg.linear_embedding:
            front = tokenizer.init_linear_embed(cfg.d, channels, gen, self.dtype)
        else:
            front = tokenizer.init_conv_tokenizer(cfg.d, channels, gen, self.dtype)
        self._adopt("tokenizer", front)
        self._adopt("lattice", lattice.init_lattice_weights(
            cfg.d, cfg.K + 1, gen, self.dtype, linear_columns=cfg.linear_columns))
        flat = self.grid_h * self.grid_w * cfg.d
        self._adopt("h1", heads.init_contrastive_head(
            flat, cfg.f1, gen, self.dtype, linear=cfg.linear_head))
        self._adopt("h2", heads.init_classification_head(
            cfg.f1, cfg.num_classes(), gen, self.dtype))

    def _adopt(self, prefix: str, group: dict[str, Tensor]) -> None:
        for name, p in group.items():
            p.name = f"{prefix}.{name}"
            self.params[p.name] = p

    # --- parameter bookkeeping ----------------------------------------------

    def named_parameters(self, prefixes=None) -> dict[str, Tensor]:
        if prefixes is None:
            return dict(self.params)
        return {k: v for k, v in self.params.items() if k.startswith(tuple(prefixes))}

    def backbone_parameters(self) -> dict[str, Tensor]:
        return self.named_parameters(BACKBONE_PREFIXES)

    def set_trainable(self, prefixes, flag: bool) -> None:
        for k, p in self.named_parameters(prefixes).items():
            p.requires_grad = flag

    def load_state(self, values: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = [k for k in self.params if k not in values]
        extra = [k for k in values if k not in self.params]
        if strict and (missing or extra):
            raise checkpoint.CheckpointError(
                f"checkpoint does not match model: missing={missing[:4]} extra={extra[:4]}")
        for k, arr in values.items():
            if k not in self.params:
                continue
            if self.params[k].value.shape != arr.shape:
                raise checkpoint.CheckpointError(
                    f"parameter {k}: checkpoint shape {arr.shape} != model {self.params[k].value.shape}")
            self.params[k].value = arr.astype(self.dtype)

    def load_backbone(self, values: dict[str, np.ndarray]) -> None:
        """Load a pretraining checkpoint (tokenizer + lattice + h1 only)."""
        expected = set(self.backbone_parameters())
        if set(values) != expected:
            raise checkpoint.CheckpointError(
                f"pretraining checkpoint keys do not match the backbone: "
                f"missing={sorted(expected - set(values))[:4]} "
                f"extra={sorted(set(values) - expected)[:4]}")
        self.load_state(values, strict=False)

    def save(self, path, prefixes=None) -> None:
        checkpoint.save(path, self.named_parameters(prefixes))

    # --- forward passes -----------------------------------------------------

    def _group(self, prefix: str) -> dict[str, Tensor]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def tokenize(self, images: np.ndarray | Tensor) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        front = self._group("tokenizer")
        if self.cfg.linear_embedding:
            return tokenizer.linear_embed(x, front)
        return tokenizer.conv_tokenize(x, front)

    def propagate(self, images, *, init_gen, dropout_gen=None, train: bool = False):
        tokens = self.tokenize(images)
        return lattice.propagate(tokens, self._group("lattice"), self.cfg.T, self._lattice_cfg(),
                                 init_gen=init_gen, dropout_gen=dropout_gen, train=train)

    def features(self, images, *, init_gen, dropout_gen=None, train: bool = False,
                 return_state: bool = False):
        """Images -> (B, f1) contrastive features via the top lattice layer."""
        state = self.propagate(images, init_gen=init_gen, dropout_gen=dropout_gen, train=train)
        feats = heads.contrastive_head(state.layers[-1], self._group("h1"))
        return (feats, state) if return_state else feats

    def logits(self, features: Tensor) -> Tensor:
        return heads.classification_head(features, self._group("h2"))

    def _lattice_cfg(self):
        return _LatticeView(self.cfg)


class _LatticeView:
    """The slice of TrainConfig the lattice step consumes."""

    def __init__(self, cfg: TrainConfig):
        self.K = cfg.K
        self.beta = cfg.beta
        self.neighborhood = cfg.neighborhood_arg()
        self.dropout = cfg.dropout
        self.use_attention = cfg.use_attention
        self._acts = cfg.column_activations()

    def column_activations(self):
        return self._acts
