"""Contrastive batch curation and the cross-entropy batch sampler.

A curated batch is built in two phases. Phase one draws N_r triplets of
(reference, intra-class positive, typed negative), where the negative's type
comes from a categorical distribution over {img, que, rand}; phase two adds
one paraphrase for every one of the 3*N_r collected samples, giving a batch
of exactly 6*N_r with known roles.

Every phase-one draw must land on a sample that has at least one paraphrase,
because phase two needs one; draws that miss are retried a bounded number of
times, after which the starved pool is named in the error. A sampled negative
type whose pool is empty falls back to the remaining types with renormalized
weights; the recorded type is the fallback type.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import IndexedDataset, NegativeType
from .losses import BatchRelations

MAX_DRAW_ATTEMPTS = 100


class CurationError(RuntimeError):
    """A sampling pool was empty or starved of paraphrase-bearing members."""


class BatchRole(Enum):
    REFERENCE = "reference"
    INTRA_CLASS_POSITIVE = "intra_class_positive"
    NEGATIVE = "negative"
    PARAPHRASED_POSITIVE = "paraphrased_positive"


@dataclass(frozen=True)
class NegativeWeights:
    """Categorical weights over (img, que, rand); must sum to one."""

    w_img: float = 0.25
    w_que: float = 0.25
    w_rand: float = 0.5

    def __post_init__(self):
        vals = (self.w_img, self.w_que, self.w_rand)
        if any(v < 0 for v in vals):
            raise ValueError("negative-type weights must be >= 0")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"negative-type weights must sum to 1, got {sum(vals)!r}")

    def weight(self, t: NegativeType) -> float:
        return {NegativeType.IMG: self.w_img,
                NegativeType.QUE: self.w_que,
                NegativeType.RAND: self.w_rand}[t]


@dataclass
class CuratedBatch:
    sample_ids: list[str]
    roles: list[BatchRole]
    negative_types: list[NegativeType]
    fallback_count: int
    relations: BatchRelations
    n_references: int

    def __len__(self) -> int:
        return len(self.sample_ids)


def sample_negative_type(
    w: NegativeWeights, rng: np.random.Generator,
    allowed: tuple[NegativeType, ...] = (NegativeType.IMG, NegativeType.QUE, NegativeType.RAND),
) -> NegativeType:
    """One categorical draw over the allowed types, renormalized to them.

    With zero total weight on the allowed types the draw is uniform over
    them (this only arises during empty-pool fallback).
    """
    weights = np.array([w.weight(t) for t in allowed], dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        weights = np.ones(len(allowed)) / len(allowed)
    else:
        weights = weights / total
    r = rng.random()
    acc = 0.0
    for t, p in zip(allowed, weights):
        acc += p
        if r < acc:
            return t
    return allowed[-1]


def _has_paraphrase(idx: IndexedDataset, sample_id: str) -> bool:
    return len(idx.by_group[idx.sample(sample_id).group_id]) > 1


def _draw_with_paraphrase(
    pool: list[str], idx: IndexedDataset, rng: np.random.Generator, pool_name: str,
) -> str:
    """Uniform draw from pool, retried until the pick has a paraphrase."""
    if not pool:
        raise CurationError(f"{pool_name} is empty")
    for _ in range(MAX_DRAW_ATTEMPTS):
        pick = pool[int(rng.integers(len(pool)))]
        if _has_paraphrase(idx, pick):
            return pick
    raise CurationError(
        f"{pool_name} starved: no paraphrase-bearing member found "
        f"in {MAX_DRAW_ATTEMPTS} attempts")


def curate(
    n_r: int,
    idx: IndexedDataset,
    w: NegativeWeights,
    rng: np.random.Generator,
) -> CuratedBatch:
    """Assemble one 6*N_r contrastive batch with role annotations.

    References are drawn uniformly without replacement from original
    (non-paraphrase) samples; positives and negatives may repeat across
    triplets.
    """
    if n_r < 1:
        raise ValueError("n_r must be >= 1")
    samples = idx.samples
    labels_arr = np.array([s.answer_label for s in samples])
    positions = idx.by_id

    candidates = [s.sample_id for s in samples if not s.is_paraphrase]
    first_half: list[str] = []
    roles: list[BatchRole] = []
    negative_types: list[NegativeType] = []
    fallback_count = 0

    for _ in range(n_r):
        ref_id, intra_pool = _draw_reference(idx, candidates, rng)
        ref = idx.sample(ref_id)

        intra_id = _draw_with_paraphrase(
            intra_pool, idx, rng,
            f"intra-class positive pool of reference {ref_id!r}")

        pools = _negative_pools(idx, ref_id, labels_arr, positions)
        chosen_type, fallbacks = _draw_negative_type(w, pools, rng, ref_id)
        fallback_count += fallbacks
        neg_id = _draw_with_paraphrase(
            pools[chosen_type], idx, rng,
            f"{chosen_type.value} negative pool of reference {ref_id!r}")

        first_half.extend((ref_id, intra_id, neg_id))
        roles.extend((BatchRole.REFERENCE, BatchRole.INTRA_CLASS_POSITIVE,
                      BatchRole.NEGATIVE))
        negative_types.append(chosen_type)
        del ref

    second_half: list[str] = []
    for sid in first_half:
        group = idx.by_group[idx.sample(sid).group_id]
        mates = [g for g in group if g != sid]
        second_half.append(mates[int(rng.integers(len(mates)))])
    roles.extend([BatchRole.PARAPHRASED_POSITIVE] * len(second_half))

    ids = first_half + second_half
    relations = BatchRelations(
        labels=np.array([idx.sample(s).answer_label for s in ids]),
        group_ids=[idx.sample(s).group_id for s in ids],
    )
    return CuratedBatch(
        sample_ids=ids,
        roles=roles,
        negative_types=negative_types,
        fallback_count=fallback_count,
        relations=relations,
        n_references=n_r,
    )


def _draw_reference(
    idx: IndexedDataset, candidates: list[str], rng: np.random.Generator,
) -> tuple[str, list[str]]:
    """Pick an eligible reference; ineligible picks leave the candidate pool.

    Eligible means: has a paraphrase (phase two), and a non-empty intra-class
    positive pool. Picks are removed from ``candidates`` either way, which
    implements without-replacement references.
    """
    while candidates:
        j = int(rng.integers(len(candidates)))
        ref_id = candidates.pop(j)
        if not _has_paraphrase(idx, ref_id):
            continue
        ref = idx.sample(ref_id)
        group = set(idx.by_group[ref.group_id])
        intra_pool = [s for s in idx.by_label[ref.answer_label] if s not in group]
        if intra_pool:
            return ref_id, intra_pool
    raise CurationError(
        "reference pool exhausted: no remaining original sample with both "
        "a paraphrase and an intra-class positive")


def _negative_pools(
    idx: IndexedDataset, ref_id: str,
    labels_arr: np.ndarray, positions: dict[str, int],
) -> dict[NegativeType, list[str]]:
    ref = idx.sample(ref_id)
    img = [s for s in idx.by_image[ref.image_id]
           if idx.sample(s).answer_label != ref.answer_label]
    que = idx.que_negatives[ref_id]
    exclude = np.zeros(len(idx), dtype=bool)
    for sid in img:
        exclude[positions[sid]] = True
    for sid in que:
        exclude[positions[sid]] = True
    rand_mask = (labels_arr != ref.answer_label) & ~exclude
    rand = [idx.samples[j].sample_id for j in np.flatnonzero(rand_mask)]
    return {NegativeType.IMG: img, NegativeType.QUE: list(que), NegativeType.RAND: rand}


def _draw_negative_type(
    w: NegativeWeights, pools: dict[NegativeType, list[str]],
    rng: np.random.Generator, ref_id: str,
) -> tuple[NegativeType, int]:
    allowed = (NegativeType.IMG, NegativeType.QUE, NegativeType.RAND)
    fallbacks = 0
    while allowed:
        t = sample_negative_type(w, rng, allowed)
        if pools[t]:
            return t, fallbacks
        fallbacks += 1
        allowed = tuple(a for a in allowed if a is not t)
    raise CurationError(f"all negative pools of reference {ref_id!r} are empty")


def sample_ce_batch(idx: IndexedDataset, size: int, rng: np.random.Generator) -> list[str]:
    """Uniform without-replacement draw over every sample in the dataset."""
    if size < 1:
        raise ValueError("size must be >= 1")
    if size > len(idx):
        raise ValueError(f"batch size {size} exceeds dataset size {len(idx)}")
    picks = rng.choice(len(idx), size=size, replace=False)
    return [idx.samples[int(j)].sample_id for j in picks]


def write_batch_dump(path: str, batch: CuratedBatch) -> None:
    """Debugging dump: one record per batch slot."""
    with open(path, "w", encoding="utf-8") as fh:
        for pos, (sid, role) in enumerate(zip(batch.sample_ids, batch.roles)):
            record: dict[str, object] = {
                "position": pos, "sample_id": sid, "role": role.value}
            if role is BatchRole.NEGATIVE:
                record["negative_type"] = batch.negative_types[pos // 3].value
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")
