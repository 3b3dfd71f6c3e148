"""End-to-end optimization: AdamW with decoupled decay, parameter-group
learning rates, step LR decay, gradient clipping, checkpointing.

Loss recipes per stream: panoptic batches use the full classification loss
plus bce/dice; detection batches use the positive-only classification variant
(configurable for the ablation) with pseudo-mask supervision; caption batches
use the symmetric contrastive loss only. Mask logits are bilinearly upsampled
to image resolution before matching and loss, so supervision is full-res.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from . import tensor as T
from .data import Dataset, LabelSpace, flip_sample, unify_label_space
from .model import VlossSystem
from .scheduler import DatasetHandle, build_epoch_plan, next_batch
from .segmenter import ModelConfig
from .tensor import Tensor, backward
from .text import TextConfig, Vocabulary, build_vocab


class TrainAbort(RuntimeError):
    """Training hit a non-finite loss; message carries step diagnostics."""


@dataclass
class TrainConfig:
    epochs: int = 12
    base_lr: float = 2.0e-4
    text_lr: float = 2.0e-5
    decay_epochs: tuple = (8, 11)
    decay_factor: float = 0.1
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    dense_batch_size: int = 2
    caption_batch_size: int = 8
    strategy: str = "stt"
    seed: int = 0
    detection_cls_mode: str = "positive_only"  # "all" reproduces the ablation baseline
    hflip: bool = False
    split_epoch: int | None = None
    loss: L.LossWeights = field(default_factory=L.LossWeights)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = L.LossWeights(**self.loss)
        self.decay_epochs = tuple(self.decay_epochs)
        if any(d >= self.epochs for d in self.decay_epochs):
            raise ValueError(f"decay epochs {self.decay_epochs} must precede epochs={self.epochs}")
        if self.base_lr <= 0 or self.text_lr <= 0:
            raise ValueError("learning rates must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05

    @classmethod
    def for_params(cls, params: dict[str, Tensor], weight_decay: float = 0.05) -> "OptimState":
        return cls(
            m={k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()},
            v={k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()},
            weight_decay=weight_decay,
        )


def no_weight_decay(name: str) -> bool:
    """Norm affines, embeddings, the no-object row, and the temperature skip decay."""
    leaf = name.split(".")[-1]
    return leaf in ("b", "g") or "emb" in name or "no_object" in name or name == "log_tau"


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimState,
    lr_now,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``lr_now`` is a float or a per-name callable. Update (per parameter):
    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  bias-corrected mhat/vhat;
    p <- p - lr (mhat / (sqrt(vhat) + eps) + wd p).
    """
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise T.ShapeError(f"grad shape {g.shape} != param shape {p.data.shape} for {name}")
        lr = lr_now(name) if callable(lr_now) else lr_now
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = m / c1
        vhat = v / c2
        wd = 0.0 if no_weight_decay(name) else state.weight_decay
        update = mhat / (np.sqrt(vhat) + eps) + wd * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype)


def lr_at(epoch_progress: float, cfg: TrainConfig, group: str = "main") -> float:
    """Group base LR times decay_factor^(decay epochs passed)."""
    base = cfg.text_lr if group == "text_encoder" else cfg.base_lr
    passed = sum(epoch_progress >= d for d in cfg.decay_epochs)
    return base * cfg.decay_factor**passed


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# data plumbing


def system_for_datasets(
    datasets: dict[str, Dataset],
    model_cfg: ModelConfig,
    text_cfg: TextConfig,
    seed: int,
    dtype: str = "f32",
) -> tuple[VlossSystem, LabelSpace]:
    dense_spaces = [datasets[s].label_space for s in ("panoptic", "detection") if s in datasets]
    if not dense_spaces:
        dense_spaces = [datasets["caption"].label_space]
    space = unify_label_space(dense_spaces)
    corpus = [text_cfg.template.format(n) for n in space.names]
    if "caption" in datasets:
        corpus += [s.caption for s in datasets["caption"].samples]
        corpus += [text_cfg.template.format(n) for n in datasets["caption"].label_space.names]
    vocab = build_vocab(corpus, min_count=1)
    system = VlossSystem(model_cfg, text_cfg, vocab, seed=seed, dtype=dtype)
    return system, space


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class Trainer:
    def __init__(
        self,
        system: VlossSystem,
        label_space: LabelSpace,
        datasets: dict[str, Dataset],
        cfg: TrainConfig,
        out_dir=None,
    ):
        self.system = system
        self.space = label_space
        self.datasets = datasets
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir else None
        self.params = system.params()
        self.optim = OptimState.for_params(self.params, weight_decay=cfg.weight_decay)
        self.rows: list[dict] = []
        self.step = 0
        self.step_epoch_progress = 0.0
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # -- per-stream losses ------------------------------------------------------

    def _image_tensor(self, image: np.ndarray) -> Tensor:
        return Tensor(np.transpose(image, (2, 0, 1)), dtype=self.system.dtype)

    def _dense_targets(self, sample, stream: str, size: int) -> L.MatchTargets:
        if stream == "panoptic":
            entries = [(s["class"], s["mask"]) for s in sample.segments]
        else:
            entries = [(o["class"], o["mask"]) for o in sample.objects]
        labels = [self.space.index(c) for c, _ in entries]
        masks = (
            np.stack([m for _, m in entries]).astype(np.int64)
            if entries
            else np.zeros((0, size, size), dtype=np.int64)
        )
        return L.MatchTargets(labels=np.asarray(labels, dtype=np.int64), masks=masks)

    def dense_loss(self, samples, stream: str) -> tuple[Tensor, dict]:
        e_cls = self.system.class_embeddings(self.space.names)
        mode = "all" if stream == "panoptic" else self.cfg.detection_cls_mode
        totals, logs = [], {"cls": [], "bce": [], "dice": []}
        for sample in samples:
            size = sample.image.shape[0]
            out = self.system.forward_image(sample.image)
            c = self.system.segmenter.classify_queries(out["e_obj"], e_cls)
            factor = size // out["mask_logits"].shape[1]
            m_up = T.bilinear_upsample(out["mask_logits"], factor) if factor > 1 else out["mask_logits"]
            targets = self._dense_targets(sample, stream, size)
            mr = L.match_queries(c.data, m_up.data, targets, self.cfg.loss)
            terms = {"cls": L.classification_loss(c, mr.y, mode)}
            if mr.pairs:
                matched = L.gather_rows(m_up, [q for q, _ in mr.pairs])
                gt = targets.masks[[t for _, t in mr.pairs]]
                terms["bce"] = L.bce_mask_loss(matched, gt)
                terms["dice"] = L.dice_loss(matched, gt)
            totals.append(L.total_loss(terms, self.cfg.loss, stream))
            for k in logs:
                logs[k].append(terms[k].item() if k in terms else 0.0)
        batch_total = T.scale(_sum_list(totals), 1.0 / len(totals))
        return batch_total, {k: float(np.mean(v)) for k, v in logs.items()}

    def caption_loss(self, samples) -> tuple[Tensor, dict]:
        img_rows, txt_rows = [], []
        for sample in samples:
            out = self.system.forward_image(sample.image)
            img_rows.append(out["e_img"])
            txt_rows.append(T.reshape(self.system.text.encode_text(sample.caption), (1, -1)))
        e_img = T.concat(img_rows, axis=0)
        e_txt = T.concat(txt_rows, axis=0)
        sim = L.contrastive_sim(e_img, e_txt, self.system.log_tau)
        loss = L.contrastive_loss(sim)
        return loss, {"con": loss.item()}

    # -- the loop ----------------------------------------------------------------

    def train_step(self, ticket, batches_by_stream) -> dict:
        cfg = self.cfg
        idx = batches_by_stream[ticket.stream][ticket.index]
        samples = [self.datasets[ticket.stream].samples[i] for i in idx]
        if cfg.hflip:
            coin = np.random.default_rng([cfg.seed, 77, self.step]).random(len(samples))
            samples = [flip_sample(s) if c < 0.5 else s for s, c in zip(samples, coin)]

        if ticket.stream == "caption":
            loss, terms = self.caption_loss(samples)
            task = "caption"
        else:
            loss, terms = self.dense_loss(samples, ticket.stream)
            task = ticket.stream

        total = loss.item()
        if not np.isfinite(total):
            raise TrainAbort(f"non-finite loss at step {self.step}, task {task}: {terms}")

        grad_map = backward(loss)
        grads = {
            name: p.grad.astype(np.float64)
            for name, p in self.params.items()
            if p.grad is not None
        }
        clip_gradients(grads, cfg.clip_norm)
        progress = self.step_epoch_progress
        adamw_step(
            self.params,
            grads,
            self.optim,
            lambda name: lr_at(progress, cfg, "text_encoder" if name.startswith("text.") else "main"),
        )
        self.system.zero_grad()

        row = {
            "step": self.step,
            "task": task,
            "L_cls": terms.get("cls", 0.0),
            "L_bce": terms.get("bce", 0.0),
            "L_dice": terms.get("dice", 0.0),
            "L_con": terms.get("con", 0.0),
            "total": total,
        }
        self.rows.append(row)
        self.step += 1
        return row

    def run(self, max_steps: int | None = None, on_epoch_end=None) -> dict:
        """Train for cfg.epochs (or until ``max_steps``).

        ``on_epoch_end(trainer, epoch, mean_total)`` runs after each epoch;
        returning True stops training early.
        """
        cfg = self.cfg
        streams_present = {
            "detection": "detection" in self.datasets,
            "panoptic": "panoptic" in self.datasets,
            "caption": "caption" in self.datasets,
        }
        best = np.inf
        epoch = 0
        for epoch in range(cfg.epochs):
            self.step_epoch_progress = float(epoch)
            batches_by_stream = {}
            handles = []
            for si, stream in enumerate(("detection", "panoptic", "caption")):
                if not streams_present[stream]:
                    handles.append(DatasetHandle(stream, 0))
                    batches_by_stream[stream] = []
                    continue
                bs = cfg.caption_batch_size if stream == "caption" else cfg.dense_batch_size
                rng = np.random.default_rng([cfg.seed, 1000 + epoch, si])
                batches = _batches(len(self.datasets[stream]), bs, rng)
                batches_by_stream[stream] = batches
                handles.append(DatasetHandle(stream, len(batches), bs))
            plan = build_epoch_plan(
                cfg.strategy, handles, epoch, cfg.epochs, cfg.seed, split_epoch=cfg.split_epoch
            )
            cursor = 0
            epoch_totals = []
            while (ticket := next_batch(plan, cursor)) is not None:
                cursor += 1
                self.step_epoch_progress = epoch + cursor / max(len(plan), 1)
                row = self.train_step(ticket, batches_by_stream)
                epoch_totals.append(row["total"])
                if max_steps is not None and self.step >= max_steps:
                    break
            mean_total = float(np.mean(epoch_totals)) if epoch_totals else np.inf
            best = min(best, mean_total)
            if self.out_dir:
                self._flush_metrics()
                if mean_total <= best:
                    self.save(self.out_dir / "best.vlck")
                self.save(self.out_dir / "last.vlck")
            if on_epoch_end is not None and on_epoch_end(self, epoch, mean_total):
                break
            if max_steps is not None and self.step >= max_steps:
                break
        return {"steps": self.step, "epochs_run": epoch + 1, "best_epoch_loss": best}

    def _flush_metrics(self) -> None:
        path = self.out_dir / "metrics.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "task", "L_cls", "L_bce", "L_dice", "L_con", "total"])
            writer.writeheader()
            writer.writerows(self.rows)

    def save(self, path) -> None:
        save_checkpoint(
            path,
            self.system,
            self.space,
            optim=self.optim,
            rng_state={"step": self.step, "seed": self.cfg.seed},
        )


def _sum_list(tensors):
    acc = tensors[0]
    for t in tensors[1:]:
        acc = T.add(acc, t)
    return acc


# ---------------------------------------------------------------------------
# VLCK checkpoints

CKPT_MAGIC = b"VLCK"


def config_hash(system: VlossSystem, space: LabelSpace) -> str:
    payload = json.dumps(
        {
            "model": system.model_cfg.to_dict(),
            "text": asdict(system.text_cfg),
            "vocab": system.vocab.token_to_id,
            "label_space": space.to_dict(),
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def save_checkpoint(path, system: VlossSystem, space: LabelSpace, optim: OptimState | None = None, rng_state=None) -> None:
    arrays: dict[str, np.ndarray] = {k: v.data for k, v in system.params().items()}
    if optim is not None:
        arrays.update({f"optim.m.{k}": v for k, v in optim.m.items()})
        arrays.update({f"optim.v.{k}": v for k, v in optim.v.items()})

    blobs, entries, offset = [], [], 0
    for name in sorted(arrays):
        buf = io.BytesIO()
        T.write_tensor(buf, arrays[name])
        raw = buf.getvalue()
        entries.append({"name": name, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    manifest = {
        "format": 1,
        "config_hash": config_hash(system, space),
        "model": system.model_cfg.to_dict(),
        "text": asdict(system.text_cfg),
        "vocab": system.vocab.token_to_id,
        "label_space": space.to_dict(),
        "dtype": system.dtype,
        "optim_t": optim.t if optim else None,
        "rng_state": rng_state,
        "tensors": entries,
    }
    raw_manifest = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(raw_manifest)))
        fh.write(raw_manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expect_config_hash: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise T.OpError(f"bad checkpoint magic {magic!r}")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(mlen).decode())
        if expect_config_hash is not None and manifest["config_hash"] != expect_config_hash:
            raise T.OpError(
                f"checkpoint config hash {manifest['config_hash'][:12]} != expected {expect_config_hash[:12]}"
            )
        arrays = {}
        for entry in manifest["tensors"]:
            arrays[entry["name"]] = T.read_tensor(fh)
    return manifest, arrays


def restore_system(path, expect_config_hash: str | None = None) -> tuple[VlossSystem, LabelSpace, dict]:
    manifest, arrays = load_checkpoint(path, expect_config_hash)
    model_cfg = ModelConfig(**manifest["model"])
    text_cfg = TextConfig(**manifest["text"])
    vocab = Vocabulary(manifest["vocab"])
    system = VlossSystem(model_cfg, text_cfg, vocab, seed=0, dtype=manifest["dtype"])
    space = LabelSpace.from_dict(manifest["label_space"])
    stored = config_hash(system, space)
    if stored != manifest["config_hash"]:
        raise T.OpError("checkpoint config does not reproduce its stored hash (config drift)")
    params = system.params()
    for name, p in params.items():
        if name not in arrays:
            raise T.OpError(f"checkpoint missing tensor {name}")
        if arrays[name].shape != p.data.shape:
            raise T.ShapeError(f"checkpoint tensor {name} shape {arrays[name].shape} != {p.data.shape}")
        p.data = arrays[name].astype(p.data.dtype)
    return system, space, manifest


def train(
    datasets: dict[str, Dataset],
    model_cfg: ModelConfig,
    text_cfg: TextConfig,
    cfg: TrainConfig,
    out_dir=None,
    max_steps: int | None = None,
    dtype: str = "f32",
) -> tuple[VlossSystem, LabelSpace, dict]:
    """Build a system for the datasets and run the training loop."""
    system, space = system_for_datasets(datasets, model_cfg, text_cfg, cfg.seed, dtype=dtype)
    trainer = Trainer(system, space, datasets, cfg, out_dir=out_dir)
    summary = trainer.run(max_steps=max_steps)
    summary["trainer"] = trainer
    return system, space, summary
