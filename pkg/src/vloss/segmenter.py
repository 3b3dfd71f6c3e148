"""Image-side network and inference post-processing.

Pipeline: strided-conv backbone -> multi-scale feature pyramid (coarsest
level f0 .. finest f3) -> FPN-style encoder (transformer on f0, convolutional
top-down fusion) -> masked-attention query decoder over f0'..f2' -> inner
product mask head on f3' and class-embedding classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from scipy.special import expit

from . import tensor as T
from .nn import (
    ParamStore,
    encoder_layer,
    ffn,
    layer_norm_affine,
    mlp,
    mlp_numpy,
    multi_head_attention,
    sine_pos_2d,
)
from .tensor import Tensor

STRIDES = (32, 16, 8, 4)  # f0 .. f3
VOID = 0


@dataclass
class ModelConfig:
    dim: int = 64
    queries: int = 100
    decoder_layers: int = 3
    encoder_layers: int = 1
    encoder_variant: str = "fpn_style"  # or "fpn_plain"
    heads: int = 4
    mask_mlp_layers: int = 3
    classifier: str = "raw"  # or "normalized" (L2 + learnable logit scale)
    score_thresh: float = 0.5
    overlap_thresh: float = 0.5
    group_norm_groups: int = 4

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PanopticSeg:
    """Per-pixel segment ids (0 = VOID) plus a segment table."""

    label_map: np.ndarray  # (H, W) int32
    segments: dict[int, dict]  # id -> {"class_id", "is_thing", "score"}


class Segmenter:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype: str = "f32"):
        if cfg.queries < 1:
            raise ValueError("queries must be >= 1")
        self.cfg = cfg
        self.params = ParamStore(np.random.default_rng(seed), dtype=dtype)
        # unit-scale query init: tiny queries stall symmetry breaking (masks
        # and class logits start indistinguishable across queries)
        self.params.param("query_emb", (cfg.queries, cfg.dim), init="unit_normal")
        if cfg.classifier == "normalized":
            self.params.param("logit_scale", (1,), init="zeros").data[:] = np.log(1.0 / 0.07)
        # mask head params must exist before the decoder's tape-free twin uses them
        mlp(self.params, "mask_mlp", Tensor(np.zeros((1, cfg.dim))), cfg.mask_mlp_layers)
        # probe pass materializes every conv/attention parameter
        probe = Tensor(np.zeros((3, 64, 64), dtype=np.float32), dtype=dtype)
        pyr = self.extract_features(probe)
        ref = self.encode_multiscale(pyr)
        e_obj, _ = self.decode_queries(self.initial_queries(), self.global_pool(ref[0]), ref[:3])
        self.predict_masks(e_obj, ref[3])
        self.params.zero_grad()

    # -- building blocks -----------------------------------------------------

    def _group_norm(self, name: str, x: Tensor) -> Tensor:
        c, h, w = x.shape
        g = self.cfg.group_norm_groups if c % self.cfg.group_norm_groups == 0 else 1
        y = T.reshape(T.layer_norm(T.reshape(x, (g, (c // g) * h * w))), (c, h, w))
        gamma = self.params.param(f"{name}.g", (c, 1, 1), init="ones")
        beta = self.params.param(f"{name}.b", (c, 1, 1), init="zeros")
        return T.add(T.mul(y, gamma), beta)

    def _conv_block(self, name: str, x: Tensor, cout: int, stride: int) -> Tensor:
        w = self.params.param(f"{name}.w", (cout, x.shape[0], 3, 3))
        b = self.params.param(f"{name}.b", (cout,), init="zeros")
        return T.relu(self._group_norm(f"{name}.gn", T.conv2d(x, w, b, stride=stride, pad=1)))

    # -- feature extraction ----------------------------------------------------

    def extract_features(self, image: Tensor) -> list[Tensor]:
        """(3,H,W) image -> [f0, f1, f2, f3] at strides 32/16/8/4, D channels each."""
        if image.ndim != 3 or image.shape[0] != 3:
            raise T.ShapeError(f"expected (3,H,W) image, got {image.shape}")
        h, w = image.shape[1], image.shape[2]
        if h % STRIDES[0] or w % STRIDES[0]:
            raise T.ShapeError(f"image size {h}x{w} not divisible by {STRIDES[0]}")
        d = self.cfg.dim
        x = self._conv_block("stem", image, d, stride=2)
        taps = []
        for i in range(4):  # strides 4, 8, 16, 32
            x = self._conv_block(f"stage{i}.a", x, d, stride=2)
            x = self._conv_block(f"stage{i}.b", x, d, stride=1)
            taps.append(x)
        return taps[::-1]

    # -- multi-scale encoder ---------------------------------------------------

    def encode_multiscale(self, pyr: list[Tensor], variant: str | None = None) -> list[Tensor]:
        """FPN top-down refinement; fpn_style runs a transformer on the coarsest level."""
        variant = variant or self.cfg.encoder_variant
        if variant not in ("fpn_style", "fpn_plain"):
            raise T.OpError(f"unknown encoder variant {variant!r}")
        f0 = pyr[0]
        if variant == "fpn_style":
            d, h, w = f0.shape
            tokens = T.transpose(T.reshape(f0, (d, h * w)), (1, 0))
            tokens = T.add(tokens, Tensor(sine_pos_2d(h, w, d, f0.data.dtype)))
            for i in range(self.cfg.encoder_layers):
                tokens = encoder_layer(self.params, f"enc{i}", tokens, self.cfg.heads)
            f0 = T.reshape(T.transpose(tokens, (1, 0)), (d, h, w))
        merged = f0
        refined = [f0]
        for li, feat in enumerate(pyr[1:], start=1):
            lw = self.params.param(f"fpn.lat{li}.w", (feat.shape[0], feat.shape[0], 1, 1))
            lb = self.params.param(f"fpn.lat{li}.b", (feat.shape[0],), init="zeros")
            lateral = T.conv2d(feat, lw, lb, stride=1, pad=0)
            up = T.bilinear_upsample(merged, 2)
            if up.shape != lateral.shape:
                raise T.ShapeError(f"pyramid level {li}: upsampled {up.shape} vs lateral {lateral.shape}")
            merged = T.add(up, lateral)
            sw = self.params.param(f"fpn.smooth{li}.w", (feat.shape[0], feat.shape[0], 3, 3))
            sb = self.params.param(f"fpn.smooth{li}.b", (feat.shape[0],), init="zeros")
            refined.append(T.conv2d(merged, sw, sb, stride=1, pad=1))
        return refined

    # -- decoder -----------------------------------------------------------------

    def initial_queries(self) -> Tensor:
        return self.params["query_emb"]

    def global_pool(self, f0_refined: Tensor) -> Tensor:
        return T.reshape(T.mean_pool_spatial(f0_refined), (1, f0_refined.shape[0]))

    def _attn_bias(self, slots: Tensor, feat: Tensor) -> np.ndarray:
        """Masked-attention bias: object slots see only their current mask support.

        Computed tape-free from detached values; a slot with empty support (and
        the image slot) attends everywhere.
        """
        n = self.cfg.queries
        d = feat.shape[0]
        proj = mlp_numpy(self.params, "mask_mlp", slots.data[:n], self.cfg.mask_mlp_layers)
        logits = proj @ feat.data.reshape(d, -1)
        allowed = logits > 0
        allowed[~allowed.any(axis=1)] = True
        bias = np.zeros((n + 1, logits.shape[1]), dtype=np.float64)
        bias[:n][~allowed] = -1e9
        return bias

    def decode_queries(
        self,
        e_obj0: Tensor,
        e_img0: Tensor,
        feats: list[Tensor],
        rounds: int | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Refine [e_obj; e_img] with decoder rounds over the given levels.

        Each round: masked cross-attention per level (coarse to fine), one
        self-attention across all N+1 slots, one FFN; post-norm residuals.
        """
        n, d = self.cfg.queries, self.cfg.dim
        if e_obj0.shape != (n, d) or e_img0.shape != (1, d):
            raise T.ShapeError(f"slot shapes {e_obj0.shape}/{e_img0.shape} != ({n},{d})/(1,{d})")
        rounds = self.cfg.decoder_layers if rounds is None else rounds
        ps = self.params
        slots = T.concat([e_obj0, e_img0], axis=0)
        for r in range(rounds):
            for li, feat in enumerate(feats):
                dd, h, w = feat.shape
                keys = T.transpose(T.reshape(feat, (dd, h * w)), (1, 0))
                keys = T.add(keys, Tensor(sine_pos_2d(h, w, dd, feat.data.dtype)))
                bias = self._attn_bias(slots, feat)
                x = multi_head_attention(ps, f"dec{r}.cross{li}", slots, keys, self.cfg.heads, bias)
                slots = layer_norm_affine(ps, f"dec{r}.cross{li}.ln", T.add(slots, x))
            x = multi_head_attention(ps, f"dec{r}.self", slots, slots, self.cfg.heads)
            slots = layer_norm_affine(ps, f"dec{r}.self.ln", T.add(slots, x))
            x = ffn(ps, f"dec{r}.ffn", slots, 2 * d)
            slots = layer_norm_affine(ps, f"dec{r}.ffn.ln", T.add(slots, x))
        return T.slice_(slots, (slice(0, n),)), T.slice_(slots, (slice(n, n + 1),))

    # -- heads -------------------------------------------------------------------

    def predict_masks(self, e_obj: Tensor, f3_refined: Tensor) -> Tensor:
        """Inner-product mask logits: (N,D) x (D,h3,w3) -> (N,h3,w3)."""
        d, h, w = f3_refined.shape
        if e_obj.shape[-1] != d:
            raise T.ShapeError(f"query dim {e_obj.shape[-1]} != feature dim {d}")
        proj = mlp(self.params, "mask_mlp", e_obj, self.cfg.mask_mlp_layers)
        return T.reshape(T.matmul(proj, T.reshape(f3_refined, (d, h * w))), (e_obj.shape[0], h, w))

    def classify_queries(self, e_obj: Tensor, e_cls: Tensor) -> Tensor:
        """Per-query class logits against the (C+1,D) class-embedding matrix.

        The inner products are reduced per (query, class) pair (mul + sum
        rather than one BLAS matmul) so appending class rows leaves existing
        columns bit-identical, which the zero-shot protocol relies on.
        """
        if e_obj.shape[-1] != e_cls.shape[-1]:
            raise T.ShapeError(f"query dim {e_obj.shape[-1]} != class dim {e_cls.shape[-1]}")
        if self.cfg.classifier == "normalized":
            e_obj = T.l2_normalize(e_obj, axis=-1)
            e_cls = T.l2_normalize(e_cls, axis=-1)
        n, d = e_obj.shape
        k = e_cls.shape[0]
        prod = T.mul(T.reshape(e_obj, (n, 1, d)), T.reshape(e_cls, (1, k, d)))
        c = T.sum_(prod, axis=2)
        if self.cfg.classifier == "normalized":
            c = T.mul(c, T.exp(self.params["logit_scale"]))
        return c

    # -- full forward --------------------------------------------------------------

    def forward_image(self, image: Tensor) -> dict:
        pyr = self.extract_features(image)
        refined = self.encode_multiscale(pyr)
        e_img0 = self.global_pool(refined[0])
        e_obj, e_img = self.decode_queries(self.initial_queries(), e_img0, refined[:3])
        masks = self.predict_masks(e_obj, refined[3])
        return {"pyramid": pyr, "refined": refined, "e_obj": e_obj, "e_img": e_img, "mask_logits": masks}


# ---------------------------------------------------------------------------
# inference post-processing (tape-free)


def _upsampled_sigmoid(mask_logits: np.ndarray, factor: int) -> np.ndarray:
    if factor > 1:
        up = T.bilinear_upsample(Tensor(mask_logits.astype(np.float64)), factor).data
    else:
        up = mask_logits
    return expit(up)


def panoptic_inference(
    c: np.ndarray,
    mask_logits: np.ndarray,
    label_space,
    score_thresh: float = 0.5,
    overlap_thresh: float = 0.5,
    upsample: int = 1,
    merge_stuff: bool = True,
) -> PanopticSeg:
    """Greedy query-competition post-processing.

    Keep queries whose argmax class is real and confident; assign each pixel to
    the argmax of class-prob * mask-prob among kept queries, restricted to the
    winner's mask support (sigmoid > 0.5). Segments keeping too little of their
    support are dropped; their pixels become VOID. Stuff segments of the same
    class are merged, following the usual panoptic convention.
    """
    z = c - c.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    num_classes = c.shape[1] - 1
    cls = p[:, :num_classes].argmax(axis=1)
    conf = p[np.arange(len(cls)), cls]
    keep = (p.argmax(axis=1) != num_classes) & (conf >= score_thresh)

    h, w = mask_logits.shape[1] * upsample, mask_logits.shape[2] * upsample
    seg = PanopticSeg(np.zeros((h, w), dtype=np.int32), {})
    if not keep.any():
        return seg

    prob = _upsampled_sigmoid(mask_logits[keep], upsample)
    kept_cls, kept_conf = cls[keep], conf[keep]
    scores = kept_conf[:, None, None] * prob
    winner = scores.argmax(axis=0)
    support = prob > 0.5

    next_id = 1
    stuff_ids: dict[int, int] = {}
    for qi in range(prob.shape[0]):
        claimed = (winner == qi) & support[qi]
        area, orig = int(claimed.sum()), int(support[qi].sum())
        if orig == 0 or area / orig < overlap_thresh:
            continue
        class_id = int(kept_cls[qi])
        is_thing = bool(label_space.is_thing[class_id])
        if merge_stuff and not is_thing and class_id in stuff_ids:
            seg.label_map[claimed] = stuff_ids[class_id]
            entry = seg.segments[stuff_ids[class_id]]
            entry["score"] = max(entry["score"], float(kept_conf[qi]))
            continue
        seg.label_map[claimed] = next_id
        seg.segments[next_id] = {"class_id": class_id, "is_thing": is_thing, "score": float(kept_conf[qi])}
        if merge_stuff and not is_thing:
            stuff_ids[class_id] = next_id
        next_id += 1
    return seg


def instance_inference(
    c: np.ndarray,
    mask_logits: np.ndarray,
    label_space,
    top_k: int = 100,
    upsample: int = 1,
) -> list[dict]:
    """Scored (query, thing-class) hypotheses: softmax prob x mean in-mask probability."""
    z = c - c.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    prob = _upsampled_sigmoid(mask_logits, upsample)
    binary = prob > 0.5
    thing_ids = [i for i, t in enumerate(label_space.is_thing) if t]

    out = []
    for q in range(prob.shape[0]):
        area = binary[q].sum()
        if area == 0:
            continue
        mask_quality = prob[q][binary[q]].mean()
        for ci in thing_ids:
            out.append(
                {
                    "query": q,
                    "class_id": ci,
                    "score": float(p[q, ci] * mask_quality),
                    "mask": binary[q],
                }
            )
    out.sort(key=lambda e: (-e["score"], e["query"], e["class_id"]))
    return out[:top_k]
