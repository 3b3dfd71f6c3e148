"""Tokenization and text encoding for class names and captions.

A whitespace/punctuation tokenizer over a closed synthetic vocabulary feeds a
small transformer; the sentence vector is the EOS-position hidden state
(mean pooling available via config). Class embeddings stack one encoded
prompt per class name plus a learned no-object row.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import ParamStore, encoder_layer, layer_norm_affine, linear
from .tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = {"<pad>": PAD, "<bos>": BOS, "<eos>": EOS, "<unk>": UNK}

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Injective token -> id map with fixed reserved ids 0..3."""

    def __init__(self, token_to_id: dict[str, int]):
        for tok, i in RESERVED.items():
            if token_to_id.get(tok) != i:
                raise ValueError(f"reserved token {tok} must map to {i}")
        ids = sorted(token_to_id.values())
        if ids != list(range(len(token_to_id))):
            raise ValueError("vocabulary ids must be dense in [0, V)")
        self.token_to_id = dict(token_to_id)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.token_to_id, fh, indent=0, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "Vocabulary":
        with open(path) as fh:
            return cls(json.load(fh))


def build_vocab(corpus: list[str], min_count: int = 1) -> Vocabulary:
    """Reserved tokens plus all corpus tokens with frequency >= min_count.

    Ids are assigned by frequency desc, then lexicographic, so equal corpora
    always produce identical vocabularies.
    """
    if not corpus:
        raise ValueError("build_vocab: empty corpus")
    counts: dict[str, int] = {}
    for line in corpus:
        for tok in split_words(line):
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count),
        key=lambda tok: (-counts[tok], tok),
    )
    mapping = dict(RESERVED)
    for tok in kept:
        mapping[tok] = len(mapping)
    return Vocabulary(mapping)


def tokenize(text: str, vocab: Vocabulary, max_len: int = 48) -> list[int]:
    """BOS + ids (+UNK for OOV) + EOS, truncated to ``max_len`` keeping EOS last."""
    ids = [BOS] + [vocab.id_of(tok) for tok in split_words(text)]
    ids = ids[: max_len - 1]
    ids.append(EOS)
    return ids


@dataclass
class TextConfig:
    dim: int = 64
    heads: int = 4
    layers: int = 2
    max_len: int = 48
    ffn_mult: int = 4
    pooling: str = "eos"  # or "mean"
    template: str = "a photo of a {}."


class TextEncoder:
    """Token-sequence encoder producing D-dim sentence embeddings."""

    def __init__(self, vocab: Vocabulary, cfg: TextConfig | None = None, seed: int = 0, dtype: str = "f32"):
        self.vocab = vocab
        self.cfg = cfg or TextConfig()
        self.params = ParamStore(np.random.default_rng(seed), dtype=dtype)
        d = self.cfg.dim
        self.params.param("tok_emb", (len(vocab), d), init="normal")
        self.params.param("pos_emb", (self.cfg.max_len, d), init="normal")
        self.params.param("no_object", (1, d), init="normal")
        # materialize transformer params with a probe pass
        self.encode_tokens([BOS, EOS])

    def encode_tokens(self, ids: list[int]) -> Tensor:
        if any(i < 0 or i >= len(self.vocab) for i in ids):
            raise T.OpError(f"token id out of range [0, {len(self.vocab)})")
        if len(ids) > self.cfg.max_len:
            raise T.OpError(f"sequence length {len(ids)} exceeds max_len {self.cfg.max_len}")
        ps, cfg = self.params, self.cfg
        ids_arr = np.asarray(ids, dtype=np.int64)
        h = T.embedding_lookup(ps["tok_emb"], ids_arr)
        h = T.add(h, T.slice_(ps["pos_emb"], (slice(0, len(ids)),)))
        for i in range(cfg.layers):
            h = encoder_layer(ps, f"layer{i}", h, cfg.heads, cfg.ffn_mult)
        if cfg.pooling == "mean":
            pooled = T.mean_(h, axis=0, keepdims=True)
        else:
            pooled = T.slice_(h, (slice(len(ids) - 1, len(ids)),))
        pooled = layer_norm_affine(ps, "final_ln", pooled)
        return T.reshape(linear(ps, "proj", pooled, cfg.dim), (cfg.dim,))

    def encode_text(self, text: str) -> Tensor:
        return self.encode_tokens(tokenize(text, self.vocab, self.cfg.max_len))

    def build_class_embeddings(self, class_names: list[str], template: str | None = None) -> Tensor:
        """(C+1, D) matrix: one encoded prompt per name, then the no-object row."""
        if not class_names:
            raise ValueError("build_class_embeddings: empty class list")
        if len(set(class_names)) != len(class_names):
            dupes = sorted({n for n in class_names if class_names.count(n) > 1})
            raise ValueError(f"duplicate class names: {dupes}")
        template = self.cfg.template if template is None else template
        rows = [
            T.reshape(self.encode_text(template.format(name)), (1, self.cfg.dim))
            for name in class_names
        ]
        rows.append(self.params["no_object"])
        return T.concat(rows, axis=0)
