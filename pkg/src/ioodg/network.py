"""Two-branch anchor network: pointwise extractors, anchor learning, attention aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import autodiff as ad
from .autodiff import Tensor
from .errors import BadConfig, EmptyNeighborhood, ShapeMismatch
from .geometry import (
    AnchorSet,
    NeighborhoodSet,
    NonParamTransform,
    ParamTransform,
    as_points,
    canonical_start_index,
    invert_param_transform,
    nonparam_indices,
    radius_neighbors,
)

MODES = ("full", "no_anchor", "pointnet")
PARAM_GROUPS = ("f1", "f2", "g1", "g2", "attention", "head")


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 32
    layers: int = 2
    anchors: int = 32
    radius: float = 0.04
    num_classes: int = 4
    slope: float = 0.2
    mode: str = "full"

    def validate(self):
        if self.mode not in MODES:
            raise BadConfig(f"unknown model mode {self.mode!r}")
        if self.hidden < 1 or self.layers < 1 or self.anchors < 1 or self.num_classes < 2:
            raise BadConfig("hidden, layers, anchors must be >= 1 and num_classes >= 2")
        if not self.radius > 0:
            raise BadConfig("radius must be > 0")


ModelParams = dict  # name -> Tensor, insertion ordered


def param_group(name: str) -> str:
    """Map a parameter name onto the reporting groups f1, f2, g1, g2, attention, head.

    Extractors beyond the second layer report under ``f2``.
    """
    head = name.split(".", 1)[0]
    if head.startswith("f") and head[1:].isdigit():
        return "f1" if head == "f1" else "f2"
    if head == "attn":
        return "attention"
    return head


def _dense(rng, fan_in, fan_out):
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
    return w.astype(np.float32).astype(np.float64)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """He-normal weights and zero biases, rounded to float32 values.

    The last linear layer of every g2 is all zeros, so initial anchors are
    exactly the FPS anchors.
    """
    cfg.validate()
    rng = np.random.default_rng([int(seed), 7919])
    d = cfg.hidden
    params = {}

    def add(name, arr):
        params[name] = Tensor(arr, requires_grad=True)

    for layer in range(1, cfg.layers + 1):
        fan_in = 3 if layer == 1 else 2 * d
        add(f"f{layer}.w0", _dense(rng, fan_in, d))
        add(f"f{layer}.b0", np.zeros(d))
        add(f"f{layer}.w1", _dense(rng, d, d))
        add(f"f{layer}.b1", np.zeros(d))
    for layer in range(1, cfg.layers + 1):
        add(f"g1.{layer}.w0", _dense(rng, d, d))
        add(f"g1.{layer}.b0", np.zeros(d))
        add(f"g1.{layer}.w1", _dense(rng, d, cfg.anchors))
        add(f"g1.{layer}.b1", np.zeros(cfg.anchors))
        add(f"g2.{layer}.w0", _dense(rng, d, d))
        add(f"g2.{layer}.b0", np.zeros(d))
        add(f"g2.{layer}.w1", np.zeros((d, 3)))
        add(f"g2.{layer}.b1", np.zeros(3))
        add(f"attn.{layer}.W", _dense(rng, d, d))
        a = rng.normal(0.0, np.sqrt(1.0 / d), size=(2 * d, 1))
        add(f"attn.{layer}.a", a.astype(np.float32).astype(np.float64))
    add("head.w", _dense(rng, d, cfg.num_classes))
    add("head.b", np.zeros(cfg.num_classes))
    return params


def params_to_arrays(params: ModelParams) -> dict:
    return {k: v.data for k, v in params.items()}


def params_from_arrays(arrays: dict) -> ModelParams:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()}


# ---------------------------------------------------------------- components


def extract_features(params: ModelParams, layer: int, inp) -> Tensor:
    """Shared pointwise MLP ``f^(layer)``: each row is mapped independently.

    The output layer is linear so invariance terms cannot park features in
    the dead zone of a ReLU.
    """
    p = f"f{layer}"
    x = ad.relu(ad.linear(inp, params[f"{p}.w0"], params[f"{p}.b0"]))
    return ad.linear(x, params[f"{p}.w1"], params[f"{p}.b1"])


def _as_anchor_array(a0):
    return a0.anchors if isinstance(a0, AnchorSet) else np.asarray(a0, dtype=np.float64)


def learn_anchors(h: Tensor, a0, params: ModelParams, layer: int):
    """Return ``(anchors, S)`` with ``S = softmax_rows(g1(h))`` and
    ``anchors = a0 + g2(S^T h)``."""
    base = _as_anchor_array(a0)
    p1, p2 = f"g1.{layer}", f"g2.{layer}"
    logits = ad.linear(ad.relu(ad.linear(h, params[f"{p1}.w0"], params[f"{p1}.b0"])),
                       params[f"{p1}.w1"], params[f"{p1}.b1"])
    if logits.shape[1] != base.shape[0]:
        raise ShapeMismatch(f"g1 emits {logits.shape[1]} columns for {base.shape[0]} anchors")
    s = ad.softmax(logits, axis=1)
    pooled = ad.matmul(ad.transpose(s), h)
    offset = ad.linear(ad.relu(ad.linear(pooled, params[f"{p2}.w0"], params[f"{p2}.b0"])),
                       params[f"{p2}.w1"], params[f"{p2}.b1"])
    return ad.add(offset, base), s


def map_anchors_back(anchors, t1: ParamTransform):
    """Apply the inverse of ``t1``; keeps Tensors differentiable."""
    inv = invert_param_transform(t1)
    if isinstance(anchors, Tensor):
        return ad.linear(anchors, inv.matrix, inv.translation)
    return AnchorSet(inv.apply_array(_as_anchor_array(anchors)))


def anchor_features(anchors, params: ModelParams) -> Tensor:
    """Anchor descriptors from the layer-1 pointwise extractor."""
    return extract_features(params, 1, anchors)


@dataclass
class Aggregation:
    features: Tensor
    weights: np.ndarray  # attention weight per edge
    dst: np.ndarray      # anchor id per edge; edges [0, M) are the self terms


def aggregate_local(h_anchor: Tensor, h: Tensor, nbrs: NeighborhoodSet, params: ModelParams,
                    layer: int, slope: float = 0.2) -> Aggregation:
    """Single-head attention over each anchor's self term plus its neighborhood.

    ``f_i = w_ii * hA_i + sum_j w_ij * h_j`` with
    ``w_i. = softmax(LeakyReLU(a_dst . W hA_i + a_src . W h_j))``.
    """
    m, d = h_anchor.shape
    if h.shape[1] != d:
        raise ShapeMismatch(f"anchor features {h_anchor.shape} vs point features {h.shape}")
    if nbrs.m != m:
        raise ShapeMismatch(f"{nbrs.m} neighborhoods for {m} anchors")
    if (nbrs.sizes() == 0).any():
        raise EmptyNeighborhood("aggregation needs a nonempty neighborhood per anchor")
    own = np.arange(m)
    src = np.concatenate([own, m + nbrs.indices])
    dst = np.concatenate([own, nbrs.owners()])
    z = ad.concat([h_anchor, h], axis=0)
    zw = ad.matmul(z, params[f"attn.{layer}.W"])
    a = params[f"attn.{layer}.a"]
    a_dst = ad.gather(a, np.arange(d))
    a_src = ad.gather(a, np.arange(d, 2 * d))
    score_src = ad.matmul(zw, a_src)
    score_dst = ad.matmul(ad.gather(zw, own), a_dst)
    e = ad.add(ad.gather(score_dst, dst), ad.gather(score_src, src))
    e = ad.leaky_relu(e, slope)
    w = ad.segment_softmax(ad.reshape(e, (-1,)), dst, m)
    msg = ad.mul(ad.gather(z, src), ad.reshape(w, (-1, 1)))
    return Aggregation(ad.segment_sum(msg, dst, m), w.data, dst)


def nearest_anchor(points, anchors) -> np.ndarray:
    """Index of the closest anchor for each point (lowest index on ties)."""
    return K.nearest(np.ascontiguousarray(as_points(points)),
                     np.ascontiguousarray(_as_anchor_array(anchors)))


def next_layer_features(h: Tensor, f: Tensor, assign, params: ModelParams, layer: int) -> Tensor:
    """``f^(layer)([h || f[assign]])``: every point is paired with its anchor's local feature."""
    if h.shape[0] != len(assign):
        raise ShapeMismatch(f"{len(assign)} assignments for {h.shape[0]} points")
    return extract_features(params, layer, ad.concat([h, ad.gather(f, assign)], axis=1))


def global_descriptor(h: Tensor) -> Tensor:
    return ad.max_pool(h, axis=0)


def classify(g: Tensor, params: ModelParams) -> Tensor:
    """Logits of shape (1, C); argmax ties resolve to the lowest class index."""
    return ad.linear(ad.reshape(g, (1, -1)), params["head.w"], params["head.b"])


def predict(logits) -> int:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return int(np.argmax(data.reshape(-1)))


# ---------------------------------------------------------------- full passes


@dataclass
class BranchOutputs:
    x: np.ndarray
    h: list = field(default_factory=list)          # per layer (N, D)
    anchors: list = field(default_factory=list)    # per layer Tensor or array (M, 3)
    nbrs: list = field(default_factory=list)       # per layer NeighborhoodSet
    f: list = field(default_factory=list)          # per layer (M, D)
    attention: list = field(default_factory=list)  # per layer Aggregation
    g: Tensor | None = None
    logits: Tensor | None = None


@dataclass
class ForwardOutputs:
    orig: BranchOutputs
    aug: BranchOutputs | None
    a0: list = field(default_factory=list)          # per layer FPS anchors on the augmented cloud
    selection: list = field(default_factory=list)   # per layer S (N_aug, M); empty without anchor learning
    t1: ParamTransform | None = None
    kept: np.ndarray | None = None


def fps_anchors(points: np.ndarray, m: int) -> np.ndarray:
    """FPS anchors started from the canonical (lexicographically smallest) point.

    Clouds with fewer than ``m`` points repeat the FPS order cyclically.
    """
    pts = np.ascontiguousarray(points)
    n = pts.shape[0]
    idx = K.fps(pts, int(min(m, n)), canonical_start_index(pts))
    if m > n:
        idx = np.resize(idx, m)
    return pts[idx]


def _aug_anchors(cfg, params, layer, h_aug, a0):
    if cfg.mode == "full":
        return learn_anchors(h_aug, a0, params, layer)
    return Tensor(a0), None


def forward_two_branch(x, t1: ParamTransform, t2: NonParamTransform, params: ModelParams,
                       cfg: ModelConfig) -> ForwardOutputs:
    """Original and augmented branches with shared weights.

    Anchors are learned on the augmented cloud and mapped back to the
    original pose with the inverse of ``t1``; ``t2`` is never inverted.
    """
    x = as_points(x)
    kept = nonparam_indices(x.shape[0], t2)
    x_aug = t1.apply_array(x)[kept]
    out = ForwardOutputs(BranchOutputs(x), BranchOutputs(x_aug), t1=t1, kept=kept)
    if cfg.mode == "pointnet":
        raise BadConfig("the pointnet baseline has no augmented branch; use forward_single")
    a0 = fps_anchors(x_aug, cfg.anchors)
    inp, inp_aug = x, x_aug
    for layer in range(1, cfg.layers + 1):
        h = extract_features(params, layer, inp)
        h_aug = extract_features(params, layer, inp_aug)
        anchors_aug, s = _aug_anchors(cfg, params, layer, h_aug, a0)
        anchors = map_anchors_back(anchors_aug, t1)
        nb = radius_neighbors(anchors.data, x, cfg.radius)
        nb_aug = radius_neighbors(anchors_aug.data, x_aug, cfg.radius)
        agg = aggregate_local(anchor_features(anchors, params), h, nb, params, layer, cfg.slope)
        agg_aug = aggregate_local(anchor_features(anchors_aug, params), h_aug, nb_aug, params,
                                  layer, cfg.slope)
        out.a0.append(a0)
        if s is not None:
            out.selection.append(s)
        for br, hh, an, nbh, ag in ((out.orig, h, anchors, nb, agg),
                                    (out.aug, h_aug, anchors_aug, nb_aug, agg_aug)):
            br.h.append(hh)
            br.anchors.append(an)
            br.nbrs.append(nbh)
            br.f.append(ag.features)
            br.attention.append(ag)
        if layer < cfg.layers:
            inp = ad.concat([h, ad.gather(agg.features, nearest_anchor(x, anchors.data))], axis=1)
            inp_aug = ad.concat(
                [h_aug, ad.gather(agg_aug.features, nearest_anchor(x_aug, anchors_aug.data))], axis=1)
    for br in (out.orig, out.aug):
        br.g = global_descriptor(br.h[-1])
        br.logits = classify(br.g, params)
    return out


def forward_single(x, params: ModelParams, cfg: ModelConfig) -> BranchOutputs:
    """Inference path: one unaugmented branch whose anchors come from its own features.

    Identical to the original branch of :func:`forward_two_branch` under an
    identity ``t1`` and keep-all ``t2``. In ``pointnet`` mode local features
    are zero and no anchors are computed.
    """
    x = as_points(x)
    br = BranchOutputs(x)
    inp = x
    if cfg.mode != "pointnet":
        a0 = fps_anchors(x, cfg.anchors)
    for layer in range(1, cfg.layers + 1):
        h = extract_features(params, layer, inp)
        br.h.append(h)
        if layer == cfg.layers:
            # the last layer's local features never reach the logits
            break
        if cfg.mode == "pointnet":
            inp = ad.concat([h, Tensor(np.zeros(h.shape))], axis=1)
            continue
        anchors, _ = _aug_anchors(cfg, params, layer, h, a0)
        nb = radius_neighbors(anchors.data, x, cfg.radius)
        agg = aggregate_local(anchor_features(anchors, params), h, nb, params, layer, cfg.slope)
        br.anchors.append(anchors)
        br.nbrs.append(nb)
        br.f.append(agg.features)
        br.attention.append(agg)
        if layer < cfg.layers:
            inp = ad.concat([h, ad.gather(agg.features, nearest_anchor(x, anchors.data))], axis=1)
    br.g = global_descriptor(br.h[-1])
    br.logits = classify(br.g, params)
    return br
