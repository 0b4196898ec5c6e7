"""Per-word sentence features.

Contextual mode concatenates the hidden states of transformer blocks 12-15 of a
frozen cased BERT-large model (blocks are numbered from 1; the embedding layer
is not a block), giving 4 x 1024 = 4096 features per word. Wordpieces of one
word are mean-pooled per layer before concatenation.

Static mode looks words up in a word2vec-style table (300 features).
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

BERT_DIR_ENV = "LANG2MOTION_BERT_DIR"


class ResourceError(RuntimeError):
    """Model weights or embedding tables are not available locally."""


@dataclass
class EmbedderConfig:
    model_id: str = "bert-large-cased"
    model_dir: str | None = None
    selected_layers: tuple[int, ...] = (12, 13, 14, 15)
    per_layer_width: int = 1024
    subword_pooling: str = "mean"  # "mean": one vector per word; "none": one per wordpiece
    max_words: int = 64

    def __post_init__(self):
        self.selected_layers = tuple(int(x) for x in self.selected_layers)
        if self.subword_pooling not in ("mean", "none"):
            raise ValueError(f"unknown subword pooling {self.subword_pooling!r}")

    @property
    def output_width(self) -> int:
        return self.per_layer_width * len(self.selected_layers)

    def hash(self) -> str:
        d = asdict(self)
        d.pop("model_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class StaticEmbedderConfig:
    table_path: str | None = None
    dim: int = 300
    oov: str = "zero"  # or "random": one fixed seeded vector shared by all unknown words
    oov_seed: int = 0
    max_words: int = 64

    def hash(self) -> str:
        d = asdict(self)
        d.pop("table_path")
        if self.table_path:
            d["table"] = _file_digest(self.table_path)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _file_digest(path) -> str:
    h = hashlib.sha256()
    if not Path(path).is_file():
        raise ResourceError(f"embedding table not found: {path!r}")
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


@dataclass
class WordEmbeddingSequence:
    vectors: np.ndarray  # (W, K)
    words: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError(f"need at least one word vector, got shape {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("non-finite word embedding")

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


def split_words(sentence: str, max_words: int) -> list[str]:
    words = sentence.split()
    if not words:
        raise ValueError("empty sentence")
    if len(words) > max_words:
        log.warning("sentence has %d words; truncated to %d", len(words), max_words)
        words = words[:max_words]
    return words


class BertEmbedder:
    def __init__(self, config: EmbedderConfig | None = None, model=None, tokenizer=None):
        self.config = config or EmbedderConfig()
        self._model = model
        self._tokenizer = tokenizer
        if model is not None:
            model.eval()

    @property
    def dim(self) -> int:
        return self.config.output_width

    def config_hash(self) -> str:
        return self.config.hash()

    def _load(self):
        if self._model is not None:
            return
        model_dir = self.config.model_dir or os.environ.get(BERT_DIR_ENV)
        if not model_dir or not Path(model_dir).is_dir():
            raise ResourceError(
                f"BERT weights for {self.config.model_id} not found; set {BERT_DIR_ENV} "
                "or EmbedderConfig.model_dir to a local model directory"
            )
        from transformers import AutoModel, AutoTokenizer

        self._tokenizer = AutoTokenizer.from_pretrained(model_dir, local_files_only=True, use_fast=True)
        self._model = AutoModel.from_pretrained(model_dir, local_files_only=True)
        self._model.eval()

    def hidden_states(self, words: list[str]):
        """Per-layer wordpiece states (tuple indexed by block number, 0 = embeddings) and word ids."""
        import torch

        self._load()
        enc = self._tokenizer(words, is_split_into_words=True, return_tensors="pt", truncation=True)
        with torch.no_grad():
            out = self._model(**enc, output_hidden_states=True)
        hs = out.hidden_states
        n_blocks = len(hs) - 1
        if max(self.config.selected_layers) > n_blocks or min(self.config.selected_layers) < 1:
            raise ResourceError(f"model has {n_blocks} blocks; cannot select {self.config.selected_layers}")
        width = hs[1].shape[-1]
        if width != self.config.per_layer_width:
            raise ResourceError(f"model width {width} != configured {self.config.per_layer_width}")
        return hs, enc.word_ids(0), enc

    def embed(self, sentence: str) -> WordEmbeddingSequence:
        words = split_words(sentence, self.config.max_words)
        hs, word_ids, enc = self.hidden_states(words)
        layers = [hs[layer][0].double().numpy() for layer in self.config.selected_layers]
        if self.config.subword_pooling == "none":
            pieces = [i for i, w in enumerate(word_ids) if w is not None]
            tokens = self._tokenizer.convert_ids_to_tokens(enc["input_ids"][0].tolist())
            vecs = np.concatenate([layer[pieces] for layer in layers], axis=1)
            return WordEmbeddingSequence(vecs.astype(np.float32), [tokens[i] for i in pieces])
        vecs = np.zeros((len(words), self.dim), dtype=np.float64)
        ids = np.array([-1 if w is None else w for w in word_ids])
        for w in range(len(words)):
            idx = np.flatnonzero(ids == w)
            if idx.size == 0:
                log.warning("word %r produced no wordpieces; using zeros", words[w])
                continue
            vecs[w] = np.concatenate([layer[idx].mean(axis=0) for layer in layers])
        return WordEmbeddingSequence(vecs.astype(np.float32), words)


_EDGE_PUNCT = re.compile(r"^[^\w]+|[^\w]+$")


class StaticEmbedder:
    """Context-free word vectors from a word2vec text table."""

    def __init__(self, config: StaticEmbedderConfig | None = None, table: dict[str, np.ndarray] | None = None):
        self.config = config or StaticEmbedderConfig()
        self._table = table
        if table is not None:
            self.config.dim = len(next(iter(table.values())))
        rng = np.random.default_rng(self.config.oov_seed)
        self._oov_random = rng.normal(scale=0.1, size=self.config.dim).astype(np.float32)

    @property
    def dim(self) -> int:
        return self.config.dim

    def config_hash(self) -> str:
        return self.config.hash()

    @property
    def table(self) -> dict[str, np.ndarray]:
        if self._table is None:
            path = self.config.table_path
            if not path or not Path(path).is_file():
                raise ResourceError(f"static embedding table not found: {path!r}")
            self._table = read_word2vec_text(path)
            self.config.dim = len(next(iter(self._table.values())))
            self._oov_random = np.random.default_rng(self.config.oov_seed).normal(
                scale=0.1, size=self.config.dim
            ).astype(np.float32)
        return self._table

    @property
    def oov_vector(self) -> np.ndarray:
        _ = self.table
        if self.config.oov == "random":
            return self._oov_random
        return np.zeros(self.config.dim, dtype=np.float32)

    def lookup(self, word: str) -> np.ndarray:
        table = self.table
        key = _EDGE_PUNCT.sub("", word) or word
        for k in (key, key.lower()):
            if k in table:
                return table[k]
        return self.oov_vector

    def embed(self, sentence: str) -> WordEmbeddingSequence:
        words = split_words(sentence, self.config.max_words)
        return WordEmbeddingSequence(np.stack([self.lookup(w) for w in words]).astype(np.float32), words)


def read_word2vec_text(path) -> dict[str, np.ndarray]:
    table = {}
    with open(path, encoding="utf8") as fh:
        first = fh.readline().split()
        if len(first) != 2 or not all(t.isdigit() for t in first):
            table[first[0]] = np.asarray(first[1:], dtype=np.float32)
        for line in fh:
            parts = line.rstrip().split(" ")
            if len(parts) > 1:
                table[parts[0]] = np.asarray(parts[1:], dtype=np.float32)
    if not table:
        raise ResourceError(f"empty embedding table {path}")
    return table


class EmbeddingCache:
    """Append-only directory of .npy files keyed by (config hash, sentence)."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(config_hash: str, sentence: str) -> str:
        return hashlib.sha256(f"{config_hash}\0{sentence}".encode()).hexdigest()

    def get(self, config_hash: str, sentence: str) -> np.ndarray | None:
        p = self.directory / f"{self.key(config_hash, sentence)}.npy"
        return np.load(p, allow_pickle=False) if p.exists() else None

    def put(self, config_hash: str, sentence: str, vectors: np.ndarray) -> None:
        p = self.directory / f"{self.key(config_hash, sentence)}.npy"
        if p.exists():
            return
        tmp = p.with_suffix(".tmp.npy")
        np.save(tmp, vectors)
        tmp.replace(p)


def embed_sentences(sentences, embedder, cache: EmbeddingCache | None = None) -> dict[str, np.ndarray]:
    out = {}
    h = embedder.config_hash()
    for s in sentences:
        if s in out:
            continue
        vec = cache.get(h, s) if cache else None
        if vec is None:
            vec = embedder.embed(s).vectors
            if cache:
                cache.put(h, s, vec)
        out[s] = vec
    return out
