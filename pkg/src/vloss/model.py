"""Full system bundle: segmenter + text encoder + contrastive temperature.

Exposes a flat named-parameter view for the optimizer and checkpointing, and
tape-free prediction entry points for evaluation.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .data import LabelSpace
from .segmenter import ModelConfig, PanopticSeg, Segmenter, instance_inference, panoptic_inference
from .tensor import Tensor
from .text import TextConfig, TextEncoder, Vocabulary


class VlossSystem:
    def __init__(
        self,
        model_cfg: ModelConfig,
        text_cfg: TextConfig,
        vocab: Vocabulary,
        seed: int = 0,
        dtype: str = "f32",
    ):
        self.model_cfg = model_cfg
        self.text_cfg = text_cfg
        self.vocab = vocab
        self.dtype = dtype
        self.segmenter = Segmenter(model_cfg, seed=seed, dtype=dtype)
        self.text = TextEncoder(vocab, text_cfg, seed=seed + 1, dtype=dtype)
        self.log_tau = Tensor(np.log(0.07 * np.ones(1)), dtype=dtype, requires_grad=True)

    # -- parameters -----------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out = {f"seg.{k}": v for k, v in self.segmenter.params.items()}
        out.update({f"text.{k}": v for k, v in self.text.params.items()})
        out["log_tau"] = self.log_tau
        return out

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params()):
            h.update(name.encode())
            h.update(self.params()[name].data.tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for t in self.params().values():
            t.grad = None

    # -- forward --------------------------------------------------------------

    def class_embeddings(self, class_names: list[str]) -> Tensor:
        return self.text.build_class_embeddings(class_names)

    def forward_image(self, image: np.ndarray | Tensor) -> dict:
        if not isinstance(image, Tensor):
            image = Tensor(np.transpose(image, (2, 0, 1)), dtype=self.dtype)
        return self.segmenter.forward_image(image)

    def mask_upsample_factor(self, image_hw: tuple[int, int], mask_logits: Tensor) -> int:
        return image_hw[0] // mask_logits.shape[1]

    # -- inference ------------------------------------------------------------

    def predict_raw(self, image: np.ndarray, class_names: list[str]) -> tuple[np.ndarray, np.ndarray]:
        with T.no_grad():
            out = self.forward_image(image)
            e_cls = self.class_embeddings(class_names)
            c = self.segmenter.classify_queries(out["e_obj"], e_cls)
        return c.data, out["mask_logits"].data

    def predict_panoptic(self, image: np.ndarray, space: LabelSpace) -> PanopticSeg:
        c, m = self.predict_raw(image, space.names)
        return panoptic_inference(
            c,
            m,
            space,
            score_thresh=self.model_cfg.score_thresh,
            overlap_thresh=self.model_cfg.overlap_thresh,
            upsample=image.shape[0] // m.shape[1],
        )

    def predict_instances(self, image: np.ndarray, space: LabelSpace, top_k: int = 100) -> list[dict]:
        c, m = self.predict_raw(image, space.names)
        return instance_inference(c, m, space, top_k=top_k, upsample=image.shape[0] // m.shape[1])
