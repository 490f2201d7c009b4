"""Anomaly detection on synthetic samples and diversity-aware refinement.

The full pipeline: extract per-class prototypes, generate one sample per
prototype, flag samples whose predicted label mismatches the intent or
whose confidence is not above the threshold, then regenerate each
defective slot from its originating prototype. Replacement candidates are
gated by the same label/confidence rule, ranked by confidence, and the
survivor least similar (cumulative cosine) to the class's accepted pool is
chosen, trading confidence for intra-class diversity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Protocol

import numpy as np

from .data import LabeledDataset
from .models import Detector, extract_features_batch, predict_batch
from .numerics import SeededRng, cosine_similarity
from .prototypes import Prototype, extract_prototypes

__all__ = [
    "CandidateGenerator",
    "DiffusionCandidateGenerator",
    "DistillConfig",
    "DistillResult",
    "NormalPool",
    "SampleVerdict",
    "SyntheticSample",
    "classify_sample",
    "cumulative_similarity",
    "distill",
    "is_accepted",
    "refine_defective",
    "select_replacement",
]

STATUS_NORMAL = "normal"
STATUS_REFINED = "refined"
STATUS_FALLBACK = "fallback"

SELECTION_MODES = ("base", "top1", "sim", "tplus_s")
FALLBACK_POLICIES = ("best_confidence",)

# spawn() key domains, keeping generation streams disjoint across pipeline stages
_KEY_PROTO = 11
_KEY_INITIAL = 12
_KEY_REFINE = 13


@dataclass
class DistillConfig:
    """All refinement knobs.

    beta is the strict confidence threshold (accept needs p > beta); top_k
    bounds the confidence-ranked shortlist from which the least-similar
    candidate is taken. Defaults follow the sensitivity optima (k=2,
    beta=0.9) and the 20-candidate refinement budget.
    """

    ipc: int = 10
    beta: float = 0.9
    top_k: int = 2
    num_candidates: int = 20
    guidance_scale: float = 10.0
    strength: float = 0.7
    seed: int = 0
    selection_mode: str = "tplus_s"
    fallback_policy: str = "best_confidence"
    kmeans_restarts: int = 10
    kmeans_max_iters: int = 100

    def __post_init__(self):
        if self.ipc < 1:
            raise ValueError("ipc must be >= 1")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.top_k > self.num_candidates:
            raise ValueError("top_k cannot exceed num_candidates")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("strength must lie in [0, 1]")
        if self.guidance_scale < 0.0:
            raise ValueError("guidance_scale must be non-negative")
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"selection_mode must be one of {SELECTION_MODES}")
        if self.fallback_policy not in FALLBACK_POLICIES:
            raise ValueError(f"fallback_policy must be one of {FALLBACK_POLICIES}")


@dataclass(frozen=True)
class Provenance:
    class_id: int
    cluster_index: int
    candidate_index: int | None  # None for the initial generation pass
    seed: int  # seed of the rng stream that generated the sample


@dataclass(frozen=True)
class SyntheticSample:
    """A generated image with its detector verdict and feature vector."""

    image: np.ndarray
    latent: np.ndarray
    intended_label: int
    predicted_label: int
    confidence: float
    feature: np.ndarray
    status: str
    provenance: Provenance


@dataclass(frozen=True)
class SampleVerdict:
    accepted: bool
    predicted_label: int
    confidence: float


class NormalPool:
    """Per-class feature vectors of currently accepted samples."""

    def __init__(self, num_classes: int):
        self._pools: dict[int, list[np.ndarray]] = {c: [] for c in range(num_classes)}

    def add(self, class_id: int, feature: np.ndarray) -> None:
        self._pools[class_id].append(np.asarray(feature, dtype=np.float32))

    def features(self, class_id: int) -> list[np.ndarray]:
        return list(self._pools[class_id])

    def size(self, class_id: int) -> int:
        return len(self._pools[class_id])


class CandidateGenerator(Protocol):
    """Contract for sample producers: (prototype, label, rng) -> (image, latent).

    Implementations must be deterministic per rng stream. An optional
    ``generate_batch(prototype, label, rngs)`` returning stacked
    (images, latents) lets the pipeline batch the reverse process.
    """

    def __call__(self, prototype: np.ndarray, label: int, rng: SeededRng): ...


@dataclass(frozen=True)
class DiffusionCandidateGenerator:
    """Candidate generator backed by the guided diffusion sampler."""

    denoiser: object
    schedule: object
    decode_fn: Callable[[np.ndarray], np.ndarray]
    strength: float
    guidance_scale: float

    def __call__(self, prototype: np.ndarray, label: int, rng: SeededRng):
        images, latents = self.generate_batch(prototype, label, [rng])
        return images[0], latents[0]

    def generate_batch(self, prototype: np.ndarray, label: int, rngs):
        from .diffusion import sample_img2img_batch

        protos = np.atleast_2d(np.asarray(prototype))
        if len(protos) == 1 and len(rngs) > 1:
            protos = np.repeat(protos, len(rngs), axis=0)
        latents = sample_img2img_batch(
            self.denoiser,
            self.schedule,
            protos,
            label,
            self.strength,
            self.guidance_scale,
            rngs,
        )
        return self.decode_fn(latents), latents


def is_accepted(predicted_label: int, confidence: float, intended_label: int, beta: float) -> bool:
    """The acceptance rule: label agreement and strictly above-threshold confidence."""
    return predicted_label == intended_label and confidence > beta


def classify_sample(
    det: Detector, image: np.ndarray, intended_label: int, beta: float
) -> SampleVerdict:
    """Run the detector on one image and apply the acceptance rule."""
    labels, confs, _ = predict_batch(det, np.asarray(image)[None])
    predicted, conf = int(labels[0]), float(confs[0])
    return SampleVerdict(
        accepted=is_accepted(predicted, conf, intended_label, beta),
        predicted_label=predicted,
        confidence=conf,
    )


def cumulative_similarity(feature: np.ndarray, pool: NormalPool, class_id: int) -> float:
    """Sum of cosine similarities against the class pool; empty pool -> 0."""
    feats = pool.features(class_id)
    return float(sum(cosine_similarity(feature, n) for n in feats))


def select_replacement(
    candidates: list[SyntheticSample],
    pool: NormalPool,
    top_k: int,
    beta: float,
) -> int | None:
    """Gate, rank, diversify: index of the chosen candidate, or None.

    Keep candidates with matching predicted label and confidence strictly
    above beta; of those, rank by confidence (ties to the lower index) and
    keep the top k; return the one with the lowest cumulative similarity to
    the accepted pool (ties to higher confidence, then lower index).
    """
    passing = [
        i
        for i, c in enumerate(candidates)
        if is_accepted(c.predicted_label, c.confidence, c.intended_label, beta)
    ]
    if not passing:
        return None
    ranked = sorted(passing, key=lambda i: (-candidates[i].confidence, i))
    shortlist = ranked[:top_k]
    scored = [
        (cumulative_similarity(candidates[i].feature, pool, candidates[i].intended_label), -candidates[i].confidence, i)
        for i in shortlist
    ]
    return min(scored)[2]


def _fallback_choice(candidates: list[SyntheticSample]) -> int:
    """Best-effort slot filler: highest-confidence label-matching candidate,
    else highest-confidence overall (ties to the lower index)."""
    matching = [i for i, c in enumerate(candidates) if c.predicted_label == c.intended_label]
    indices = matching if matching else range(len(candidates))
    return min(indices, key=lambda i: (-candidates[i].confidence, i))


def _evaluate_candidates(det, images, latents, intended_label, rng_seeds, class_id, cluster_index):
    labels, confs, _ = predict_batch(det, images)
    feats = extract_features_batch(det, images)
    return [
        SyntheticSample(
            image=images[i],
            latent=latents[i],
            intended_label=intended_label,
            predicted_label=int(labels[i]),
            confidence=float(confs[i]),
            feature=feats[i],
            status=STATUS_FALLBACK,  # provisional; final status set by caller
            provenance=Provenance(class_id, cluster_index, i, rng_seeds[i]),
        )
        for i in range(len(images))
    ]


def _generate(gen, prototype, label, rngs):
    if hasattr(gen, "generate_batch"):
        return gen.generate_batch(prototype, label, rngs)
    pairs = [gen(prototype, label, r) for r in rngs]
    images = np.stack([p[0] for p in pairs])
    latents = np.stack([p[1] for p in pairs])
    return images, latents


def refine_defective(
    prototype: Prototype,
    gen: CandidateGenerator,
    det: Detector,
    pool: NormalPool,
    cfg: DistillConfig,
    rng: SeededRng,
) -> tuple[SyntheticSample, list[SyntheticSample]]:
    """Regenerate one defective slot from its originating prototype.

    Returns (chosen sample with final status, all evaluated candidates).
    The chosen sample joins the pool only when it passes the acceptance
    rule (status refined); fallback picks stay out of the pool.
    """
    label = prototype.class_id
    rngs = [rng.spawn(i) for i in range(cfg.num_candidates)]
    images, latents = _generate(gen, prototype.latent, label, rngs)
    candidates = _evaluate_candidates(
        det, images, latents, label, [r.seed for r in rngs], label, prototype.cluster_index
    )
    mode = cfg.selection_mode
    if mode == "tplus_s":
        chosen = select_replacement(candidates, pool, cfg.top_k, cfg.beta)
    elif mode == "top1":
        chosen = min(range(len(candidates)), key=lambda i: (-candidates[i].confidence, i))
    elif mode == "sim":
        scored = [
            (cumulative_similarity(c.feature, pool, label), -c.confidence, i)
            for i, c in enumerate(candidates)
        ]
        chosen = min(scored)[2]
    else:
        raise ValueError(f"refine_defective called with selection_mode={mode!r}")
    if chosen is None:
        chosen = _fallback_choice(candidates)
        status = STATUS_FALLBACK
    else:
        cand = candidates[chosen]
        status = (
            STATUS_REFINED
            if is_accepted(cand.predicted_label, cand.confidence, cand.intended_label, cfg.beta)
            else STATUS_FALLBACK
        )
    sample = replace(candidates[chosen], status=status)
    if status == STATUS_REFINED:
        pool.add(label, sample.feature)
    return sample, candidates


def distill(
    train: LabeledDataset,
    encode_fn: Callable[[np.ndarray], np.ndarray],
    gen: CandidateGenerator,
    det: Detector,
    cfg: DistillConfig,
    rng: SeededRng | None = None,
) -> "DistillResult":
    """Run the full pipeline: prototypes, generation, anomaly check, refinement.

    Slots are processed in deterministic (class ascending, cluster
    ascending) order; per-class pools are seeded with the accepted initial
    samples in that same order before any refinement happens. When
    selection_mode is "base" defective slots are kept as generated
    (flagged fallback, excluded from the pool).
    """
    if rng is None:
        rng = SeededRng(cfg.seed)
    protos = extract_prototypes(
        encode_fn,
        train,
        cfg.ipc,
        rng.spawn(_KEY_PROTO),
        restarts=cfg.kmeans_restarts,
        max_iters=cfg.kmeans_max_iters,
    )
    # initial pass, batched per class
    samples: list[SyntheticSample | None] = [None] * len(protos)
    for c in range(train.num_classes):
        cls_protos = [p for p in protos if p.class_id == c]
        rngs = [rng.spawn(_KEY_INITIAL, c, p.cluster_index) for p in cls_protos]
        latvecs = np.stack([p.latent for p in cls_protos])
        images, latents = _generate(gen, latvecs, c, rngs)
        labels, confs, _ = predict_batch(det, images)
        feats = extract_features_batch(det, images)
        for j, p in enumerate(cls_protos):
            ok = is_accepted(int(labels[j]), float(confs[j]), c, cfg.beta)
            samples[c * cfg.ipc + p.cluster_index] = SyntheticSample(
                image=images[j],
                latent=latents[j],
                intended_label=c,
                predicted_label=int(labels[j]),
                confidence=float(confs[j]),
                feature=feats[j],
                status=STATUS_NORMAL if ok else STATUS_FALLBACK,
                provenance=Provenance(c, p.cluster_index, None, rngs[j].seed),
            )
    pool = NormalPool(train.num_classes)
    for s in samples:
        if s.status == STATUS_NORMAL:
            pool.add(s.intended_label, s.feature)
    # refinement pass over defective slots in slot order
    slot_records = []
    for slot, s in enumerate(samples):
        record = {
            "class": s.provenance.class_id,
            "cluster": s.provenance.cluster_index,
            "status": s.status,
            "predicted_label": s.predicted_label,
            "confidence": s.confidence,
            "candidate_index": s.provenance.candidate_index,
            "seed": s.provenance.seed,
        }
        if s.status != STATUS_NORMAL and cfg.selection_mode != "base":
            proto = protos[slot]
            slot_rng = rng.spawn(_KEY_REFINE, proto.class_id, proto.cluster_index)
            chosen, candidates = refine_defective(proto, gen, det, pool, cfg, slot_rng)
            samples[slot] = chosen
            record.update(
                status=chosen.status,
                predicted_label=chosen.predicted_label,
                confidence=chosen.confidence,
                candidate_index=chosen.provenance.candidate_index,
                seed=chosen.provenance.seed,
                candidates=[
                    {
                        "index": i,
                        "predicted_label": c.predicted_label,
                        "confidence": c.confidence,
                    }
                    for i, c in enumerate(candidates)
                ],
            )
        slot_records.append(record)
    counts = {
        STATUS_NORMAL: sum(s.status == STATUS_NORMAL for s in samples),
        STATUS_REFINED: sum(s.status == STATUS_REFINED for s in samples),
        STATUS_FALLBACK: sum(s.status == STATUS_FALLBACK for s in samples),
    }
    report = {
        "config": {
            "ipc": cfg.ipc,
            "beta": cfg.beta,
            "top_k": cfg.top_k,
            "num_candidates": cfg.num_candidates,
            "guidance_scale": cfg.guidance_scale,
            "strength": cfg.strength,
            "seed": cfg.seed,
            "selection_mode": cfg.selection_mode,
            "fallback_policy": cfg.fallback_policy,
        },
        "master_seed": rng.seed,
        "counts": dict(counts, total=len(samples)),
        "slots": slot_records,
    }
    distilled = LabeledDataset(
        images=np.stack([s.image for s in samples]),
        labels=np.array([s.intended_label for s in samples], dtype=np.int64),
        num_classes=train.num_classes,
        class_names=train.class_names,
        provenance={
            "source": "distill",
            "seed": cfg.seed,
            "selection_mode": cfg.selection_mode,
            "counts": {k: int(v) for k, v in counts.items()},
        },
    )
    return DistillResult(dataset=distilled, report=report, samples=samples, pool=pool, prototypes=protos)


@dataclass
class DistillResult:
    """Distilled dataset plus the per-slot provenance report.

    ``samples``, ``pool``, and ``prototypes`` expose the pipeline's final
    state for tests and analysis; the JSON-ready ``report`` is what the CLI
    persists.
    """

    dataset: LabeledDataset
    report: dict
    samples: list[SyntheticSample]
    pool: NormalPool
    prototypes: list[Prototype]
