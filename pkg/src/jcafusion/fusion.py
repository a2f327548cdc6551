"""Joint cross-attention fusion, its ablation baselines and the prediction head.

Feature matrices are stored time-major: ``X_m`` is ``L x d_m`` (one row per
clip).  With that orientation every product below is shape-consistent:

    J       = [X_a | X_v]                                  L x d
    C_m     = tanh(X_m^T W_jm J / sqrt(d))                 d_m x d
    H_m     = relu(W_m X_m + W_cm C_m^T)                   k x d_m
    X_att_m = W_hm H_m + X_m                               L x d_m
    X_hat   = [X_att_v | X_att_a]                          L x d

All functions also accept a leading batch axis on the features.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import linalg_ad as ad
from .errors import AlignmentError, ConfigError, DimensionError
from .linalg_ad import Node
from .optim import xavier_init

VARIANTS = ("jca", "ca", "concat", "audio", "visual")
ATTENTION_PARAMS = ("W_ja", "W_jv", "W_a", "W_v", "W_ca", "W_cv", "W_ha", "W_hv")
HEAD_PARAMS = ("head_w1", "head_b1", "head_w2", "head_b2")


@dataclass
class ModalFeatures:
    """One modality's clip-level features, ``X`` is ``L x d_m``."""

    X: np.ndarray
    modality: str = "audio"
    clips_per_second: float = 1.0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2 or min(self.X.shape) < 1:
            raise DimensionError(f"features must be a non-empty L x d matrix, got shape {self.X.shape}")
        if self.modality not in ("audio", "visual"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("features contain non-finite entries")
        if self.clips_per_second <= 0:
            raise ConfigError("clips_per_second must be positive")

    @property
    def L(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


@dataclass
class AttentionOutputs:
    C_a: np.ndarray
    C_v: np.ndarray
    H_a: np.ndarray
    H_v: np.ndarray
    X_att_a: np.ndarray
    X_att_v: np.ndarray
    clip_scores_a: np.ndarray
    clip_scores_v: np.ndarray


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, ModalFeatures):
        return ad.constant(x.X)
    return ad.constant(x)


def joint_representation(X_a, X_v) -> Node:
    X_a, X_v = _as_node(X_a), _as_node(X_v)
    if X_a.rows != X_v.rows:
        raise AlignmentError(f"audio has {X_a.rows} clips, visual has {X_v.rows}")
    return ad.concat_cols(X_a, X_v)


def joint_correlation(X_m, J, W_jm) -> Node:
    """``tanh(X_m^T W_jm J / sqrt(d))``; ``J`` may be any ``L x d`` block."""
    X_m, J, W_jm = _as_node(X_m), _as_node(J), _as_node(W_jm)
    if X_m.rows != W_jm.rows or W_jm.cols != J.rows:
        raise DimensionError(
            f"joint_correlation: X {X_m.shape}, W {W_jm.shape}, J {J.shape} are incompatible"
        )
    prod = ad.matmul(ad.matmul(ad.transpose(X_m), W_jm), J)
    return ad.tanh(ad.scale_const(prod, 1.0 / math.sqrt(J.cols)))


def attention_maps(X_m, C_m, W_m, W_cm) -> Node:
    """``relu(W_m X_m + W_cm C_m^T)``, shape ``k x d_m``."""
    X_m, C_m, W_m, W_cm = (_as_node(t) for t in (X_m, C_m, W_m, W_cm))
    return ad.relu(ad.add(ad.matmul(W_m, X_m), ad.matmul(W_cm, ad.transpose(C_m))))


def attended_features(X_m, H_m, W_hm) -> Node:
    """Residual attended features ``W_hm H_m + X_m``."""
    X_m, H_m, W_hm = _as_node(X_m), _as_node(H_m), _as_node(W_hm)
    return ad.add(ad.matmul(W_hm, H_m), X_m)


def _dropout(x: Node, dropout_p: float, training: bool, rng_seed: int) -> Node:
    if not 0.0 <= dropout_p < 1.0:
        raise ConfigError(f"dropout_p must lie in [0, 1), got {dropout_p}")
    if not training or dropout_p == 0.0:
        return x
    rng = np.random.default_rng(rng_seed)
    keep = rng.random(x.value.shape) >= dropout_p
    return ad.multiply_const(x, keep / (1.0 - dropout_p))


def head_forward(x: Node, w1: Node, b1: Node, w2: Node, b2: Node) -> Node:
    """Per-clip ``linear -> relu -> linear`` giving (valence, arousal) columns."""
    if x.cols != w1.rows:
        raise DimensionError(f"head expects {w1.rows} input features, got {x.cols}")
    hidden = ad.relu(ad.add_bias(ad.matmul(x, w1), b1))
    return ad.add_bias(ad.matmul(hidden, w2), b2)


def _row_norms(delta: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(delta * delta, axis=-1))


def _attend(X_a, X_v, p, key_a: Node, key_v: Node):
    """Correlation, attention maps and residual features; ``key_*`` is what each modality correlates against."""
    C_a = joint_correlation(X_a, key_a, p["W_ja"])
    C_v = joint_correlation(X_v, key_v, p["W_jv"])
    H_a = attention_maps(X_a, C_a, p["W_a"], p["W_ca"])
    H_v = attention_maps(X_v, C_v, p["W_v"], p["W_cv"])
    Xatt_a = attended_features(X_a, H_a, p["W_ha"])
    Xatt_v = attended_features(X_v, H_v, p["W_hv"])
    att = AttentionOutputs(
        C_a.value, C_v.value, H_a.value, H_v.value, Xatt_a.value, Xatt_v.value,
        _row_norms(Xatt_a.value - X_a.value), _row_norms(Xatt_v.value - X_v.value),
    )
    return Xatt_a, Xatt_v, att


def _head(x_hat: Node, p, dropout_p, training, rng_seed) -> Node:
    x_hat = _dropout(x_hat, dropout_p, training, rng_seed)
    return head_forward(x_hat, p["head_w1"], p["head_b1"], p["head_w2"], p["head_b2"])


def _check_pair(X_a: Node, X_v: Node) -> None:
    if X_a.rows != X_v.rows:
        raise DimensionError(f"audio has {X_a.rows} clips, visual has {X_v.rows}")


def jca_forward(X_a, X_v, p, dropout_p: float = 0.0, training: bool = False, rng_seed: int = 0):
    """Joint cross-attention forward pass.

    ``p`` maps parameter names to nodes (a :class:`JcaParams` works).  Returns
    ``(predictions, attention_outputs)``; predictions are ``L x 2`` with
    valence in column 0 and arousal in column 1.
    """
    X_a, X_v = _as_node(X_a), _as_node(X_v)
    _check_pair(X_a, X_v)
    J = joint_representation(X_a, X_v)
    Xatt_a, Xatt_v, att = _attend(X_a, X_v, p, J, J)
    x_hat = ad.concat_cols(Xatt_v, Xatt_a)
    return _head(x_hat, p, dropout_p, training, rng_seed), att


def ca_baseline_forward(X_a, X_v, p, dropout_p: float = 0.0, training: bool = False, rng_seed: int = 0):
    """Vanilla cross-attention: each modality correlates against the other one.

    ``C_a = tanh(X_a^T W_ja X_v / sqrt(d_v))`` and symmetrically for ``C_v``,
    so ``W_ca`` is ``k x d_v`` and ``W_cv`` is ``k x d_a``.
    """
    X_a, X_v = _as_node(X_a), _as_node(X_v)
    _check_pair(X_a, X_v)
    Xatt_a, Xatt_v, att = _attend(X_a, X_v, p, X_v, X_a)
    x_hat = ad.concat_cols(Xatt_v, Xatt_a)
    return _head(x_hat, p, dropout_p, training, rng_seed), att


def concat_baseline_forward(X_a, X_v, p, dropout_p: float = 0.0, training: bool = False, rng_seed: int = 0) -> Node:
    """Head applied directly to ``[X_v | X_a]``, no attention."""
    X_a, X_v = _as_node(X_a), _as_node(X_v)
    _check_pair(X_a, X_v)
    return _head(ad.concat_cols(X_v, X_a), p, dropout_p, training, rng_seed)


def unimodal_forward(X, p, dropout_p: float = 0.0, training: bool = False, rng_seed: int = 0) -> Node:
    return _head(_as_node(X), p, dropout_p, training, rng_seed)


# --- multi-backbone combiners -------------------------------------------------

def _check_backbones(features: Sequence[ModalFeatures]) -> None:
    if not features:
        raise ConfigError("need at least one feature set")
    mods = {f.modality for f in features}
    if len(mods) != 1:
        raise ConfigError(f"backbones mix modalities {sorted(mods)}")


def concat_fc(blocks: Sequence[Node], weights: Node) -> Node:
    """Column-concatenate per-backbone features and project with ``weights``."""
    out = blocks[0]
    for b in blocks[1:]:
        if b.rows != out.rows:
            raise AlignmentError(f"backbones disagree on clip count: {out.rows} vs {b.rows}")
        out = ad.concat_cols(out, b)
    if out.cols != weights.rows:
        raise DimensionError(f"combiner weights have {weights.rows} rows, features have {out.cols} columns")
    return ad.matmul(out, weights)


def combine_backbones_concat_fc(features: Sequence[ModalFeatures], out_dim: int, weights) -> ModalFeatures:
    _check_backbones(features)
    lengths = {f.L for f in features}
    if len(lengths) != 1:
        raise AlignmentError(f"backbones disagree on clip count: {sorted(lengths)}")
    w = _as_node(weights)
    if w.cols != out_dim:
        raise DimensionError(f"combiner weights have {w.cols} columns, expected {out_dim}")
    y = concat_fc([ad.constant(f.X) for f in features], w)
    f0 = features[0]
    return ModalFeatures(y.value, f0.modality, f0.clips_per_second)


def stack_rows(blocks: Sequence[Node]) -> Node:
    out = blocks[0]
    for b in blocks[1:]:
        out = ad.concat_rows(out, b)
    return out


def combine_backbones_stack(features: Sequence[ModalFeatures]) -> ModalFeatures:
    """Stack backbone outputs row-wise into one ``(sum L_i) x d_m`` block."""
    _check_backbones(features)
    dims = {f.dim for f in features}
    if len(dims) != 1:
        raise DimensionError(f"cannot stack feature sets with column counts {sorted(dims)}")
    f0 = features[0]
    return ModalFeatures(np.concatenate([f.X for f in features], axis=0), f0.modality, f0.clips_per_second)


# --- parameters and model -----------------------------------------------------

@dataclass
class ModelDims:
    L: int
    d_a: int
    d_v: int
    k: int = 32
    h_head: int = 128

    @property
    def d(self) -> int:
        return self.d_a + self.d_v


def param_shapes(variant: str, dims: ModelDims) -> dict[str, tuple[int, int]]:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown fusion variant {variant!r}; choose from {VARIANTS}")
    L, k, d = dims.L, dims.k, dims.d
    shapes: dict[str, tuple[int, int]] = {}
    if variant in ("jca", "ca"):
        shapes.update(
            W_ja=(L, L), W_jv=(L, L), W_a=(k, L), W_v=(k, L),
            W_ca=(k, d if variant == "jca" else dims.d_v),
            W_cv=(k, d if variant == "jca" else dims.d_a),
            W_ha=(L, k), W_hv=(L, k),
        )
    d_in = {"audio": dims.d_a, "visual": dims.d_v}.get(variant, d)
    shapes.update(
        head_w1=(d_in, dims.h_head), head_b1=(1, dims.h_head),
        head_w2=(dims.h_head, 2), head_b2=(1, 2),
    )
    return shapes


@dataclass
class JcaParams:
    """Named learnable matrices of one fusion model (leaf nodes)."""

    variant: str
    dims: ModelDims
    params: dict[str, Node] = field(default_factory=dict)

    @classmethod
    def init(cls, variant: str, dims: ModelDims, seed: int = 0) -> "JcaParams":
        """Xavier-uniform weights, zero biases, drawn in a fixed name order."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(variant, dims).items():
            if name.startswith("head_b"):
                value = np.zeros(shape)
            else:
                value = xavier_init(shape, rng)
            params[name] = ad.parameter(value, name=name)
        return cls(variant, dims, params)

    @classmethod
    def zeros(cls, variant: str, dims: ModelDims) -> "JcaParams":
        params = {n: ad.parameter(np.zeros(s), name=n) for n, s in param_shapes(variant, dims).items()}
        return cls(variant, dims, params)

    def __getitem__(self, name: str) -> Node:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def nodes(self) -> list[Node]:
        return list(self.params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, node in self.params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != node.value.shape:
                raise DimensionError(f"{name}: expected {node.value.shape}, got {value.shape}")
            node.value = value.copy()
            node.zero_grad()

    def n_attention_params(self) -> int:
        return sum(self.params[n].value.size for n in ATTENTION_PARAMS if n in self.params)


class FusionModel:
    """A fusion variant bound to its parameters.

    ``variant`` is one of ``jca``, ``ca``, ``concat`` (the ablation rows) or
    ``audio`` / ``visual`` (single-modality heads).  ``combiner`` controls how
    several backbone feature sets per modality are merged before fusion:
    ``single`` uses the first set, ``concat_fc`` learns a projection per
    modality, ``stack`` stacks them along time.
    """

    def __init__(self, params: JcaParams, combiner: str = "single",
                 combiner_weights: dict[str, Node] | None = None, n_backbones: int = 1):
        if combiner not in ("single", "concat_fc", "stack"):
            raise ConfigError(f"unknown combiner {combiner!r}")
        self.params = params
        self.combiner = combiner
        self.combiner_weights = combiner_weights or {}
        self.n_backbones = n_backbones
        self.backbone_dims = None

    @classmethod
    def create(cls, variant: str, dims: ModelDims, seed: int = 0, combiner: str = "single",
               backbone_dims: dict[str, list[int]] | None = None) -> "FusionModel":
        """Build a freshly initialised model.

        For ``stack``, ``dims.L`` must already be the stacked clip count.  For
        ``concat_fc``, ``backbone_dims`` lists each backbone's width per
        modality and ``dims.d_a`` / ``dims.d_v`` are the projection widths.
        """
        params = JcaParams.init(variant, dims, seed)
        weights = {}
        n_backbones = 1
        if combiner == "concat_fc":
            if not backbone_dims:
                raise ConfigError("concat_fc combiner needs backbone_dims")
            rng = np.random.default_rng(seed + 7919)
            for mod, out in (("audio", dims.d_a), ("visual", dims.d_v)):
                total = sum(backbone_dims[mod])
                weights[f"comb_{mod}"] = ad.parameter(xavier_init((total, out), rng), name=f"comb_{mod}")
            n_backbones = max(len(v) for v in backbone_dims.values())
        elif combiner == "stack" and backbone_dims:
            n_backbones = max(len(v) for v in backbone_dims.values())
        model = cls(params, combiner, weights, n_backbones)
        model.backbone_dims = backbone_dims
        return model

    @property
    def variant(self) -> str:
        return self.params.variant

    @property
    def dims(self) -> ModelDims:
        return self.params.dims

    def named_parameters(self) -> dict[str, Node]:
        named = dict(self.params.params)
        named.update(self.combiner_weights)
        return named

    def parameters(self) -> list[Node]:
        return list(self.named_parameters().values())

    def _merge(self, blocks: Sequence[np.ndarray], modality: str) -> Node:
        nodes = [ad.constant(b) for b in blocks]
        if self.combiner == "single" or len(nodes) == 1:
            return nodes[0]
        if self.combiner == "concat_fc":
            return concat_fc(nodes, self.combiner_weights[f"comb_{modality}"])
        return stack_rows(nodes)

    def forward(self, audio: Sequence[np.ndarray], visual: Sequence[np.ndarray], dropout_p: float = 0.0,
                training: bool = False, rng_seed: int = 0):
        """Predict from per-backbone feature arrays (``L x d`` or ``B x L x d`` each).

        Returns ``(predictions, attention_outputs_or_None)``.
        """
        X_a = self._merge(audio, "audio")
        X_v = self._merge(visual, "visual")
        p = self.params
        v = self.variant
        if X_a.rows != self.dims.L and v in ("jca", "ca"):
            raise DimensionError(f"model built for L={self.dims.L}, got {X_a.rows} clips")
        if v == "jca":
            return jca_forward(X_a, X_v, p, dropout_p, training, rng_seed)
        if v == "ca":
            return ca_baseline_forward(X_a, X_v, p, dropout_p, training, rng_seed)
        if v == "concat":
            return concat_baseline_forward(X_a, X_v, p, dropout_p, training, rng_seed), None
        X = X_a if v == "audio" else X_v
        return unimodal_forward(X, p, dropout_p, training, rng_seed), None

    def predict(self, audio, visual) -> np.ndarray:
        """Inference-mode predictions, stacked blocks averaged back to clip level."""
        pred, _ = self.forward(audio, visual, training=False)
        out = pred.value
        if self.combiner == "stack" and self.n_backbones > 1:
            out = unstack_mean(out, self.n_backbones)
        return out


def unstack_mean(pred: np.ndarray, n_blocks: int) -> np.ndarray:
    """Average ``n_blocks`` row blocks of a stacked prediction back to one block."""
    rows = pred.shape[-2]
    if rows % n_blocks:
        raise DimensionError(f"{rows} rows do not split into {n_blocks} blocks")
    parts = np.split(pred, n_blocks, axis=-2)
    return sum(parts[1:], parts[0]) / n_blocks


ATTENTION_CSV_COLUMNS = (
    "clip_index", "score_audio", "score_visual",
    "valence_pred", "arousal_pred", "valence_gt", "arousal_gt",
)


def write_attention_csv(path, att: AttentionOutputs, predictions: np.ndarray, labels: np.ndarray) -> None:
    """Per-clip attention scores next to predictions and ground truth.

    The score is the Euclidean norm of ``X_att - X`` for that clip, i.e. how
    far attention moved the clip's features.
    """
    predictions = np.asarray(predictions).reshape(-1, 2)
    labels = np.asarray(labels).reshape(-1, 2)
    sa = np.asarray(att.clip_scores_a).ravel()
    sv = np.asarray(att.clip_scores_v).ravel()
    if not (len(sa) == len(sv) == len(predictions) == len(labels)):
        raise AlignmentError("attention scores, predictions and labels differ in length")
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATTENTION_CSV_COLUMNS)
        for i in range(len(sa)):
            w.writerow([i, repr(float(sa[i])), repr(float(sv[i])),
                        repr(float(predictions[i, 0])), repr(float(predictions[i, 1])),
                        repr(float(labels[i, 0])), repr(float(labels[i, 1]))])
