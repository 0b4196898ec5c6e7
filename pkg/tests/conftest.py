from __future__ import annotations

import numpy as np
import pytest
import torch

from lang2motion import kit, toy
from lang2motion.model import ModelConfig, build_model

SMALL = dict(h1=4, h2=8, h=16, disc_hidden=8, disc_layers=2, disc_kernel=3)

TOY_VOCAB = sorted({w for ss in toy.KINDS.values() for s in ss for w in s.split()})
EXTRA_VOCAB = ["The", "the", "he", "sat", "by", "river", "bank", "robbed", "un", "##believ", "##able",
               "walks", "person", "forward", ".", ","]


def write_bert_dir(path, n_layers: int = 15, seed: int = 0):
    """Random-init cased BERT with BERT-large width (1024) and a small vocabulary.

    Only blocks up to 15 are read, so deeper layers would never contribute.
    """
    from transformers import BertConfig, BertModel, BertTokenizerFast

    path.mkdir(parents=True, exist_ok=True)
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + sorted(set(TOY_VOCAB + EXTRA_VOCAB))
    (path / "vocab.txt").write_text("\n".join(vocab) + "\n")
    tok = BertTokenizerFast(vocab={w: i for i, w in enumerate(vocab)}, do_lower_case=False)
    tok.save_pretrained(path)
    torch.manual_seed(seed)
    cfg = BertConfig(vocab_size=len(vocab), hidden_size=1024, num_hidden_layers=n_layers,
                     num_attention_heads=16, intermediate_size=64, max_position_embeddings=64)
    BertModel(cfg).eval().save_pretrained(path)
    return path


@pytest.fixture(scope="session")
def bert_dir(tmp_path_factory):
    return write_bert_dir(tmp_path_factory.mktemp("bert"))


@pytest.fixture(scope="session")
def bert_embedder(bert_dir):
    from lang2motion.text_embed import BertEmbedder, EmbedderConfig

    return BertEmbedder(EmbedderConfig(model_dir=str(bert_dir)))


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    return toy.write_toy_corpus(tmp_path_factory.mktemp("toy"), n_motions=12, seed=0)


@pytest.fixture(scope="session")
def toy_samples(toy_dir):
    return kit.make_samples(kit.load_corpus(toy_dir))


def random_embeddings(samples, dim: int, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {s: rng.normal(size=(len(s.split()), dim)).astype(np.float32)
            for s in sorted({x.sentence for x in samples})}


def small_model(seed: int = 0, dtype=torch.float64, **kw) -> torch.nn.Module:
    cfg = ModelConfig.from_skeleton(**{**SMALL, "embed_dim": 12, **kw})
    return build_model(cfg, seed=seed, dtype=dtype)
