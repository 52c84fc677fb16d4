"""Text featurization: hashing trick (default) or tf-idf bag of words.

Tokenization is fixed so two runs agree byte for byte: split on Unicode
whitespace, strip leading/trailing ASCII punctuation, drop empty tokens,
lowercase (unless disabled). Hashing uses 64-bit FNV-1a over the UTF-8 bytes
of each token; output vectors are L2-normalized when nonzero.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ValidationError

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

DEFAULT_HASH_DIM = 4096


def fnv1a64(data: bytes | str) -> int:
    """64-bit FNV-1a hash. Strings are hashed as UTF-8 bytes."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def tokenize(text: str, lowercase: bool = True) -> list[str]:
    tokens = []
    for raw in text.split():
        tok = raw.strip(string.punctuation)
        if not tok:
            continue
        tokens.append(tok.lower() if lowercase else tok)
    return tokens


@dataclass
class FeaturizerConfig:
    mode: str = "hashing"  # "hashing" | "tfidf"
    dim: int = DEFAULT_HASH_DIM  # hashing dimension; ignored by tfidf
    lowercase: bool = True

    def validate(self) -> None:
        if self.mode not in ("hashing", "tfidf"):
            raise ValidationError(f"unknown featurizer mode {self.mode!r}")
        if self.dim < 1:
            raise ValidationError("featurizer dim must be positive")


@dataclass
class Featurizer:
    """Immutable text-to-vector transform; safe to share across threads."""

    config: FeaturizerConfig
    vocabulary: dict[str, int] = field(default_factory=dict)  # tfidf only
    idf: np.ndarray = field(default_factory=lambda: np.zeros(0))  # tfidf only

    @property
    def dim(self) -> int:
        if self.config.mode == "hashing":
            return self.config.dim
        return len(self.vocabulary)

    def transform(self, text: str) -> np.ndarray:
        """Feature vector for one text; bit-identical across calls."""
        tokens = tokenize(text, self.config.lowercase)
        vec = np.zeros(self.dim, dtype=np.float64)
        if self.config.mode == "hashing":
            dim = self.config.dim
            for tok in tokens:
                vec[fnv1a64(tok) % dim] += 1.0
        else:
            vocab = self.vocabulary
            for tok in tokens:
                idx = vocab.get(tok)
                if idx is not None:
                    vec[idx] += 1.0
            vec *= self.idf
        norm = np.sqrt(np.dot(vec, vec))
        if norm > 0.0:
            vec /= norm
        return vec

    def transform_many(self, texts: list[str]) -> np.ndarray:
        """Stack of transform() rows, shape (len(texts), dim)."""
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            out[i] = self.transform(text)
        return out

    def to_dict(self) -> dict:
        d = {
            "mode": self.config.mode,
            "dim": self.config.dim,
            "lowercase": self.config.lowercase,
        }
        if self.config.mode == "tfidf":
            # vocabulary is sorted, so listing tokens in index order is lossless
            tokens = sorted(self.vocabulary, key=self.vocabulary.__getitem__)
            d["vocabulary"] = tokens
            d["idf"] = [float(x) for x in self.idf]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Featurizer":
        cfg = FeaturizerConfig(
            mode=d["mode"], dim=int(d["dim"]), lowercase=bool(d["lowercase"])
        )
        cfg.validate()
        if cfg.mode == "tfidf":
            tokens = d["vocabulary"]
            vocab = {tok: i for i, tok in enumerate(tokens)}
            idf = np.asarray(d["idf"], dtype=np.float64)
            return cls(cfg, vocab, idf)
        return cls(cfg)


def fit_featurizer(corpus: list[str], config: FeaturizerConfig | None = None) -> Featurizer:
    """Build a featurizer. Hashing ignores the corpus; tf-idf fits df/idf on it.

    tf-idf uses idf_t = ln((1+N)/(1+df_t)) + 1 with the vocabulary sorted
    lexicographically for determinism.
    """
    cfg = config or FeaturizerConfig()
    cfg.validate()
    if cfg.mode == "hashing":
        return Featurizer(cfg)
    if not corpus:
        raise ValidationError("tfidf featurizer requires a non-empty corpus")
    df: dict[str, int] = {}
    for text in corpus:
        for tok in set(tokenize(text, cfg.lowercase)):
            df[tok] = df.get(tok, 0) + 1
    vocab = {tok: i for i, tok in enumerate(sorted(df))}
    n_docs = len(corpus)
    idf = np.empty(len(vocab), dtype=np.float64)
    for tok, i in vocab.items():
        idf[i] = np.log((1.0 + n_docs) / (1.0 + df[tok])) + 1.0
    return Featurizer(cfg, vocab, idf)
