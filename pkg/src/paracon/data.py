"""Dataset records, paraphrase-group structure, and positive/negative set queries.

A sample is one (image-features, question, answer) record. Samples sharing a
``group_id`` are paraphrases of one original question and always share the
image and the answer label. Negatives of a sample are all differently-answered
samples; they split into three mutually exclusive types:

* ``img``  — same image, different answer
* ``que``  — different image, question embedding within similarity epsilon
* ``rand`` — everything else

The ``img`` case takes precedence over ``que`` when both hold.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .similarity import QuestionEmbedder, embed_question


class NegativeType(Enum):
    IMG = "img"
    QUE = "que"
    RAND = "rand"


@dataclass
class Sample:
    """One classification record with paraphrase-group linkage.

    ``question_embedding`` starts as None and is filled when indices are
    built; it is not part of the on-disk record.
    """

    sample_id: str
    image_id: str
    image_features: np.ndarray
    question_text: str
    answer_label: int
    group_id: str
    is_paraphrase: bool
    question_embedding: np.ndarray | None = None

    def __post_init__(self):
        self.image_features = np.asarray(self.image_features, dtype=np.float64)


@dataclass
class IndexedDataset:
    """Immutable-after-build dataset with all positive/negative set queries.

    ``que_negatives`` is precomputed exactly (all-pairs similarity) at build
    time; there is no approximate nearest-neighbor shortcut.
    """

    samples: list[Sample]
    epsilon: float
    num_labels: int
    embedder_name: str
    by_id: dict[str, int] = field(repr=False)
    by_label: dict[int, list[str]] = field(repr=False)
    by_group: dict[str, list[str]] = field(repr=False)
    by_image: dict[str, list[str]] = field(repr=False)
    embeddings: np.ndarray = field(repr=False)
    que_negatives: dict[str, list[str]] = field(repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    def sample(self, sample_id: str) -> Sample:
        try:
            return self.samples[self.by_id[sample_id]]
        except KeyError:
            raise KeyError(f"unknown sample_id {sample_id!r}") from None

    @property
    def d_v(self) -> int:
        return int(self.samples[0].image_features.shape[0])

    @property
    def d_q(self) -> int:
        return int(self.embeddings.shape[1])

    def original_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples if not s.is_paraphrase]


def _validate_samples(samples: list[Sample]) -> None:
    if not samples:
        raise ValueError("dataset is empty")
    d_v = samples[0].image_features.shape[0]
    seen_ids: set[str] = set()
    group_original: dict[str, int] = {}
    group_image: dict[str, str] = {}
    group_label: dict[str, int] = {}
    for s in samples:
        if s.sample_id in seen_ids:
            raise ValueError(f"duplicate sample_id {s.sample_id!r}")
        seen_ids.add(s.sample_id)
        if s.image_features.shape != (d_v,):
            raise ValueError(
                f"sample {s.sample_id!r}: image_features has shape "
                f"{s.image_features.shape}, expected ({d_v},)")
        if s.answer_label < 0:
            raise ValueError(f"sample {s.sample_id!r}: negative answer_label")
        group_original.setdefault(s.group_id, 0)
        if not s.is_paraphrase:
            group_original[s.group_id] += 1
        if group_image.setdefault(s.group_id, s.image_id) != s.image_id:
            raise ValueError(f"group {s.group_id!r}: members disagree on image_id")
        if group_label.setdefault(s.group_id, s.answer_label) != s.answer_label:
            raise ValueError(f"group {s.group_id!r}: members disagree on answer_label")
    for gid, n_orig in group_original.items():
        if n_orig != 1:
            raise ValueError(f"group {gid!r} has {n_orig} originals, expected exactly 1")


def build_indices(
    samples: list[Sample],
    epsilon: float,
    embedder: QuestionEmbedder,
    num_labels: int | None = None,
) -> IndexedDataset:
    """Validate samples, embed every question, and populate all index maps.

    Question-negative lists are materialized exactly via all-pairs cosine
    similarity on the (unit-norm) embeddings, which is fine at desk scale.
    """
    if not 0.0 < epsilon <= 1.0:
        raise ValueError("epsilon must be in (0, 1]")
    _validate_samples(samples)
    max_label = max(s.answer_label for s in samples)
    if num_labels is None:
        num_labels = max_label + 1
    elif max_label >= num_labels:
        raise ValueError(f"answer_label {max_label} out of range [0, {num_labels})")

    emb = np.empty((len(samples), embedder.dim), dtype=np.float64)
    for i, s in enumerate(samples):
        emb[i] = embed_question(s.question_text, embedder)
        s.question_embedding = emb[i]

    by_id = {s.sample_id: i for i, s in enumerate(samples)}
    by_label: dict[int, list[str]] = {}
    by_group: dict[str, list[str]] = {}
    by_image: dict[str, list[str]] = {}
    for s in samples:
        by_label.setdefault(s.answer_label, []).append(s.sample_id)
        by_group.setdefault(s.group_id, []).append(s.sample_id)
        by_image.setdefault(s.image_id, []).append(s.sample_id)

    # Exact que-negative lists: different image, similarity > epsilon,
    # different label. Unit embeddings make the gram matrix the similarity.
    sims = emb @ emb.T
    labels = np.array([s.answer_label for s in samples])
    image_codes = {img: k for k, img in enumerate(by_image)}
    images = np.array([image_codes[s.image_id] for s in samples])
    que_negatives: dict[str, list[str]] = {}
    for i, s in enumerate(samples):
        mask = (labels != labels[i]) & (images != images[i]) & (sims[i] > epsilon)
        que_negatives[s.sample_id] = [samples[j].sample_id for j in np.flatnonzero(mask)]

    return IndexedDataset(
        samples=samples,
        epsilon=epsilon,
        num_labels=num_labels,
        embedder_name=embedder.name,
        by_id=by_id,
        by_label=by_label,
        by_group=by_group,
        by_image=by_image,
        embeddings=emb,
        que_negatives=que_negatives,
    )


def classify_negative(x: Sample, xbar: Sample, idx: IndexedDataset) -> NegativeType:
    """Type of the negative pair (x, xbar): img before que before rand."""
    if x.answer_label == xbar.answer_label:
        raise ValueError(
            f"samples {x.sample_id!r} and {xbar.sample_id!r} share a label; not a negative pair")
    if x.image_id == xbar.image_id:
        return NegativeType.IMG
    sim = float(np.dot(_embedding(idx, x), _embedding(idx, xbar)))
    if sim > idx.epsilon:
        return NegativeType.QUE
    return NegativeType.RAND


def _embedding(idx: IndexedDataset, s: Sample) -> np.ndarray:
    return idx.embeddings[idx.by_id[s.sample_id]]


def positives(idx: IndexedDataset, x: Sample) -> tuple[set[str], set[str]]:
    """(paraphrased, intra_class) positive id sets for x; disjoint, exclude x."""
    if x.sample_id not in idx.by_id:
        raise KeyError(f"unknown sample_id {x.sample_id!r}")
    group = set(idx.by_group[x.group_id])
    paraphrased = group - {x.sample_id}
    intra_class = set(idx.by_label[x.answer_label]) - group
    return paraphrased, intra_class


def negatives(idx: IndexedDataset, x: Sample, t: NegativeType) -> set[str]:
    """The id set of type-t negatives of x."""
    if x.sample_id not in idx.by_id:
        raise KeyError(f"unknown sample_id {x.sample_id!r}")
    if t is NegativeType.IMG:
        return {
            sid for sid in idx.by_image[x.image_id]
            if idx.sample(sid).answer_label != x.answer_label
        }
    if t is NegativeType.QUE:
        return set(idx.que_negatives[x.sample_id])
    img = negatives(idx, x, NegativeType.IMG)
    que = set(idx.que_negatives[x.sample_id])
    allneg = {
        s.sample_id for s in idx.samples
        if s.answer_label != x.answer_label
    }
    return allneg - img - que


# ---------------------------------------------------------------------------
# Dataset file format: one JSON object per line, first line is the header
# {"d_v": ..., "num_labels": ...}. Round-trips bit-exactly (json float repr
# preserves float64 values).

_SAMPLE_FIELDS = (
    "sample_id", "image_id", "image_features", "question_text",
    "answer_label", "group_id", "is_paraphrase",
)


def write_dataset(path: str, samples: list[Sample], num_labels: int) -> None:
    _validate_samples(samples)
    d_v = int(samples[0].image_features.shape[0])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"d_v": d_v, "num_labels": num_labels}, sort_keys=True))
        fh.write("\n")
        for s in samples:
            record = {
                "sample_id": s.sample_id,
                "image_id": s.image_id,
                "image_features": [float(v) for v in s.image_features],
                "question_text": s.question_text,
                "answer_label": int(s.answer_label),
                "group_id": s.group_id,
                "is_paraphrase": bool(s.is_paraphrase),
            }
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")


def read_dataset(path: str) -> tuple[list[Sample], int]:
    """Load samples and the declared label-space size from a dataset file."""
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise ValueError(f"{path}: missing header line")
        header = json.loads(header_line)
        if "d_v" not in header or "num_labels" not in header:
            raise ValueError(f"{path}: header must declare d_v and num_labels")
        d_v = int(header["d_v"])
        num_labels = int(header["num_labels"])
        samples = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            extra = set(obj) - set(_SAMPLE_FIELDS)
            missing = set(_SAMPLE_FIELDS) - set(obj)
            if extra or missing:
                raise ValueError(
                    f"{path}:{lineno}: bad record fields "
                    f"(extra={sorted(extra)}, missing={sorted(missing)})")
            features = np.asarray(obj["image_features"], dtype=np.float64)
            if features.shape != (d_v,):
                raise ValueError(
                    f"{path}:{lineno}: image_features has length {features.size}, "
                    f"header declares d_v={d_v}")
            label = int(obj["answer_label"])
            if not 0 <= label < num_labels:
                raise ValueError(
                    f"{path}:{lineno}: answer_label {label} out of range [0, {num_labels})")
            samples.append(Sample(
                sample_id=obj["sample_id"],
                image_id=obj["image_id"],
                image_features=features,
                question_text=obj["question_text"],
                answer_label=label,
                group_id=obj["group_id"],
                is_paraphrase=bool(obj["is_paraphrase"]),
            ))
    _validate_samples(samples)
    return samples, num_labels


def split_by_group(
    samples: list[Sample], holdout_fraction: float, seed: int,
) -> tuple[list[Sample], list[Sample]]:
    """Deterministic train/held-out split on whole paraphrase groups.

    Groups stay intact so consensus scoring on the held-out part sees full
    paraphrase sets. Copies are returned so the two sides can be indexed
    independently.
    """
    if not 0.0 <= holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must be in [0, 1)")
    group_ids = sorted({s.group_id for s in samples})
    rng = np.random.default_rng(seed)
    rng.shuffle(group_ids)
    n_hold = int(round(holdout_fraction * len(group_ids)))
    held = set(group_ids[:n_hold])
    train = [replace(s, question_embedding=None) for s in samples if s.group_id not in held]
    holdout = [replace(s, question_embedding=None) for s in samples if s.group_id in held]
    return train, holdout
