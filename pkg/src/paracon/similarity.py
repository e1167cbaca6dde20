"""Question embedding, cosine similarity, and paraphrase filtering.

The default embedder is a deterministic token-hash scheme: it stands in for a
neural sentence encoder so that the whole pipeline is reproducible offline.
Anything implementing the ``QuestionEmbedder`` protocol can be swapped in.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Protocol

import numpy as np

UNIT_NORM_ATOL = 1e-9


class QuestionEmbedder(Protocol):
    """Maps question text to a deterministic unit-norm vector."""

    name: str
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity u.v / (|u||v|), clamped to [-1, 1].

    Raises ValueError on dimension mismatch or zero vectors (undefined).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def _token_hash(token: str) -> int:
    # Stable across processes (unlike builtin hash, which is salted).
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class TokenHashEmbedder:
    """Deterministic bag-of-tokens hashing embedder.

    Lowercases, splits on whitespace, hashes each token to a signed basis
    vector, sums, and L2-normalizes.
    """

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise ValueError("embedder dim must be >= 1")
        self.dim = dim
        self.name = f"token-hash-{dim}"

    def embed(self, text: str) -> np.ndarray:
        tokens = text.lower().split()
        if not tokens:
            raise ValueError("cannot embed empty text")
        vec = np.zeros(self.dim, dtype=np.float64)
        for tok in tokens:
            code = _token_hash(tok)
            idx = code % self.dim
            sign = 1.0 if (code >> 63) & 1 else -1.0
            vec[idx] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            # Token signs cancelled exactly; fall back to the first basis
            # direction so the output is still a unit vector.
            vec[0] = 1.0
            norm = 1.0
        return vec / norm


def embed_question(text: str, embedder: QuestionEmbedder) -> np.ndarray:
    """Embed one question; rejects empty text, enforces the unit-norm contract."""
    if not text.strip():
        raise ValueError("question text is empty")
    vec = np.asarray(embedder.embed(text), dtype=np.float64)
    norm = np.linalg.norm(vec)
    if abs(norm - 1.0) > UNIT_NORM_ATOL:
        raise ValueError(f"embedder '{embedder.name}' returned non-unit vector (norm={norm!r})")
    return vec


@dataclass(frozen=True)
class FilterPolicy:
    """Similarity threshold and cap for accepting candidate paraphrases."""

    threshold: float = 0.95
    max_keep: int = 3
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must be in (0, 1]")
        if self.max_keep < 1:
            raise ValueError("max_keep must be >= 1")


def filter_paraphrases(
    original: str,
    candidates: Iterable[str],
    policy: FilterPolicy,
    embedder: QuestionEmbedder,
) -> list[str]:
    """Keep candidates similar enough to the original, capped at max_keep.

    Candidates are deduplicated on casefolded trimmed text (first occurrence
    wins) and candidates equal to the original are dropped. Survivors must
    have cosine similarity >= threshold to the original. If more than
    max_keep survive, max_keep are sampled uniformly without replacement;
    output preserves input order and is deterministic given the policy seed.
    """
    if not original.strip():
        raise ValueError("original question text is empty")
    origin_key = original.strip().casefold()
    origin_vec = embed_question(original, embedder)

    survivors: list[str] = []
    seen: set[str] = {origin_key}
    for cand in candidates:
        key = cand.strip().casefold()
        if not key or key in seen:
            continue
        seen.add(key)
        if cosine_similarity(origin_vec, embed_question(cand, embedder)) >= policy.threshold:
            survivors.append(cand)

    if len(survivors) <= policy.max_keep:
        return survivors
    rng = np.random.default_rng(policy.rng_seed)
    picked = rng.choice(len(survivors), size=policy.max_keep, replace=False)
    return [survivors[i] for i in sorted(picked)]


def read_paraphrase_file(path: str) -> list[tuple[str, str]]:
    """Read line-delimited {group_id, paraphrase_text} records."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            try:
                records.append((obj["group_id"], obj["paraphrase_text"]))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from exc
    return records


def write_paraphrase_file(path: str, records: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for group_id, text in records:
            fh.write(json.dumps(
                {"group_id": group_id, "paraphrase_text": text}, sort_keys=True))
            fh.write("\n")
