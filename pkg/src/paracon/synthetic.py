"""Deterministic generator of paraphrase-structured multimodal datasets.

Every image belongs to one of a small number of feature archetypes, and every
image carries one question group per template. The answer is a fixed function
of (archetype, template), so it genuinely needs both modalities: the same
question text yields different answers on images of different archetypes
(populating question negatives), and different templates on one image yield
different answers (populating image negatives).

Paraphrases are synonym-table substitutions plus an occasional adjacent-token
swap, applied at a configurable rate. They keep the template marker token, so
a paraphrased question still identifies its template.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Sample

SYNONYMS = {
    "which": "what",
    "relation": "connection",
    "links": "ties",
    "to": "toward",
    "the": "that",
    "scene": "picture",
    "shown": "displayed",
    "here": "now",
}


@dataclass(frozen=True)
class SynthSpec:
    num_labels: int = 16
    num_images: int = 128
    groups_per_image: int = 4
    paraphrases_per_group: int = 3
    d_v: int = 32
    feature_noise: float = 0.5
    perturb_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("num_labels", "num_images", "groups_per_image",
                     "paraphrases_per_group", "d_v"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be >= 0")
        if not 0.0 <= self.perturb_rate <= 1.0:
            raise ValueError("perturb_rate must be in [0, 1]")

    @property
    def num_archetypes(self) -> int:
        # Enough archetypes that (archetype * G + template) covers the label
        # space, but never more than there are images.
        return min(self.num_images, math.ceil(self.num_labels / self.groups_per_image))


def _template_tokens(template: int) -> list[str]:
    return ["which", "relation", "links", f"marker{template}",
            "to", "the", "scene", "shown", "here"]


def _perturb(tokens: list[str], rate: float, rng: np.random.Generator) -> list[str]:
    out = list(tokens)
    subbable = [j for j, t in enumerate(out) if t in SYNONYMS]
    substituted = False
    for j in subbable:
        if rng.random() < rate:
            out[j] = SYNONYMS[out[j]]
            substituted = True
    if rate > 0 and not substituted and subbable:
        j = subbable[int(rng.integers(len(subbable)))]
        out[j] = SYNONYMS[out[j]]
    if rate > 0 and rng.random() < rate and len(out) > 1:
        j = int(rng.integers(len(out) - 1))
        out[j], out[j + 1] = out[j + 1], out[j]
    return out


def generate(spec: SynthSpec) -> list[Sample]:
    """Build the full sample list for a spec; same spec, same bytes."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    n_arch = spec.num_archetypes
    archetypes = rng.normal(size=(n_arch, spec.d_v))

    samples: list[Sample] = []
    for img in range(spec.num_images):
        arch = img % n_arch
        image_id = f"img{img:05d}"
        for template in range(spec.groups_per_image):
            label = (arch * spec.groups_per_image + template) % spec.num_labels
            group_id = f"{image_id}-q{template}"
            original_tokens = _template_tokens(template)
            texts = [" ".join(original_tokens)]
            attempts = 0
            while len(texts) < 1 + spec.paraphrases_per_group:
                cand = " ".join(_perturb(original_tokens, spec.perturb_rate, rng))
                attempts += 1
                if cand not in texts or spec.perturb_rate == 0.0 or attempts > 50:
                    texts.append(cand)
            for k, text in enumerate(texts):
                features = archetypes[arch] + spec.feature_noise * rng.normal(size=spec.d_v)
                suffix = "o" if k == 0 else f"p{k}"
                samples.append(Sample(
                    sample_id=f"{group_id}-{suffix}",
                    image_id=image_id,
                    image_features=features,
                    question_text=text,
                    answer_label=label,
                    group_id=group_id,
                    is_paraphrase=k > 0,
                ))
    return samples
