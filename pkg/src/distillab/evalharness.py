"""Downstream evaluation: classifiers trained on distilled data, ablations.

Measures what the distilled set is worth: train a fresh classifier on it
(plain one-hot cross-entropy, no CutMix) and report Top-1 accuracy on the
held-out test split. The ablation runner compares the selection modes
(base / top1 / sim / tplus_s) across seeds, with a random-real-subset
baseline, and the sensitivity runner sweeps the shortlist size and the
confidence threshold.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .data import LabeledDataset
from .models import Detector, TrainConfig, predict_batch, train_detector
from .numerics import SeededRng
from .refine import DiffusionCandidateGenerator, DistillConfig, distill

__all__ = [
    "AblationInputs",
    "EvalReport",
    "RunRecord",
    "evaluate",
    "run_ablation",
    "run_sensitivity",
    "train_downstream",
]

_KEY_DOWNSTREAM = 21
_KEY_BASELINE = 22


def train_downstream(distilled: LabeledDataset, cfg: TrainConfig, rng: SeededRng) -> Detector:
    """Train a fresh detector-architecture classifier on the distilled set.

    Always plain one-hot targets: CutMix is a property of detector training
    on the original data, not of downstream validation.
    """
    if len(distilled) == 0:
        raise ValueError("distilled dataset is empty")
    if cfg.use_cutmix:
        cfg = replace(cfg, use_cutmix=False)
    return train_detector(distilled, cfg, rng)


def evaluate(classifier: Detector, test: LabeledDataset) -> float:
    """Top-1 accuracy of the classifier on a held-out set."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    labels, _, _ = predict_batch(classifier, test.images)
    return float((labels == test.labels).mean())


@dataclass(frozen=True)
class RunRecord:
    mode: str
    seed: int
    accuracy: float
    fallback_count: int
    seconds: float


@dataclass
class EvalReport:
    """Per-run records plus per-mode aggregates (mean, std over seeds)."""

    records: list[RunRecord]
    summary: dict[str, dict]
    config_fingerprint: str
    total_seconds: float

    def to_json(self) -> str:
        payload = {
            "records": [vars(r) for r in self.records],
            "summary": self.summary,
            "config_fingerprint": self.config_fingerprint,
            "total_seconds": self.total_seconds,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["mode", "seed", "accuracy", "fallback_count"])
        for r in self.records:
            writer.writerow([r.mode, r.seed, f"{r.accuracy:.6f}", r.fallback_count])
        return buf.getvalue()


def summarize_records(records: list[RunRecord]) -> dict[str, dict]:
    """Mean and std (ddof=1, absent when fewer than 2 seeds) per mode."""
    out: dict[str, dict] = {}
    for mode in sorted({r.mode for r in records}):
        accs = [r.accuracy for r in records if r.mode == mode]
        entry = {"n": len(accs), "mean": float(np.mean(accs))}
        entry["std"] = float(np.std(accs, ddof=1)) if len(accs) >= 2 else None
        entry["fallbacks"] = int(sum(r.fallback_count for r in records if r.mode == mode))
        out[mode] = entry
    return out


@dataclass
class AblationInputs:
    """Everything a pipeline run needs besides the per-run config.

    ``generator_factory(cfg)`` builds the candidate generator for one run;
    the default wires the diffusion sampler with the run's strength and
    guidance scale.
    """

    train: LabeledDataset
    test: LabeledDataset
    encode_fn: Callable[[np.ndarray], np.ndarray]
    detector: Detector
    generator_factory: Callable[[DistillConfig], object] | None = None
    denoiser: object = None
    schedule: object = None
    decode_fn: Callable[[np.ndarray], np.ndarray] | None = None

    def make_generator(self, cfg: DistillConfig):
        if self.generator_factory is not None:
            return self.generator_factory(cfg)
        if self.denoiser is None or self.schedule is None or self.decode_fn is None:
            raise ValueError("need denoiser/schedule/decode_fn or a generator_factory")
        return DiffusionCandidateGenerator(
            denoiser=self.denoiser,
            schedule=self.schedule,
            decode_fn=self.decode_fn,
            strength=cfg.strength,
            guidance_scale=cfg.guidance_scale,
        )


def _config_fingerprint(base_cfg: DistillConfig, downstream_cfg: TrainConfig, extra: dict) -> str:
    import hashlib

    payload = json.dumps(
        {"distill": vars(base_cfg), "downstream": vars(downstream_cfg), **extra},
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _run_once(inputs: AblationInputs, cfg: DistillConfig, downstream_cfg: TrainConfig):
    gen = inputs.make_generator(cfg)
    rng = SeededRng(cfg.seed)
    res = distill(inputs.train, inputs.encode_fn, gen, inputs.detector, cfg, rng)
    clf = train_downstream(res.dataset, downstream_cfg, rng.spawn(_KEY_DOWNSTREAM))
    acc = evaluate(clf, inputs.test)
    return acc, res


def _random_subset(train: LabeledDataset, ipc: int, rng: SeededRng) -> LabeledDataset:
    """ipc uniformly chosen real images per class, without replacement."""
    picks = []
    for c in range(train.num_classes):
        idx = train.class_indices(c)
        perm = rng.spawn(c).permutation(len(idx))
        picks.extend(idx[perm[:ipc]].tolist())
    return LabeledDataset(
        images=train.images[picks],
        labels=train.labels[picks],
        num_classes=train.num_classes,
        class_names=train.class_names,
        provenance={"source": "random-subset", "ipc": ipc},
    )


def run_ablation(
    inputs: AblationInputs,
    modes: list[str],
    seeds: list[int],
    base_cfg: DistillConfig,
    downstream_cfg: TrainConfig,
    include_random_baseline: bool = True,
) -> EvalReport:
    """Full mode x seed grid, plus a random-real-subset baseline per seed."""
    if not modes or not seeds:
        raise ValueError("need at least one mode and one seed")
    records = []
    t_all = time.perf_counter()
    for seed in seeds:
        for mode in modes:
            cfg = replace(base_cfg, selection_mode=mode, seed=seed)
            t0 = time.perf_counter()
            acc, res = _run_once(inputs, cfg, downstream_cfg)
            records.append(
                RunRecord(
                    mode=mode,
                    seed=seed,
                    accuracy=acc,
                    fallback_count=res.report["counts"]["fallback"],
                    seconds=time.perf_counter() - t0,
                )
            )
        if include_random_baseline:
            t0 = time.perf_counter()
            subset = _random_subset(inputs.train, base_cfg.ipc, SeededRng(seed).spawn(_KEY_BASELINE))
            clf = train_downstream(subset, downstream_cfg, SeededRng(seed).spawn(_KEY_DOWNSTREAM, 1))
            acc = evaluate(clf, inputs.test)
            records.append(
                RunRecord(
                    mode="random",
                    seed=seed,
                    accuracy=acc,
                    fallback_count=0,
                    seconds=time.perf_counter() - t0,
                )
            )
    return EvalReport(
        records=records,
        summary=summarize_records(records),
        config_fingerprint=_config_fingerprint(
            base_cfg, downstream_cfg, {"modes": modes, "seeds": seeds}
        ),
        total_seconds=time.perf_counter() - t_all,
    )


def _passing_set(candidates: list[dict], intended: int, beta: float) -> frozenset:
    return frozenset(
        c["index"]
        for c in candidates
        if c["predicted_label"] == intended and c["confidence"] > beta
    )


def run_sensitivity(
    inputs: AblationInputs,
    ks: list[int],
    betas: list[float],
    seed: int,
    base_cfg: DistillConfig,
    downstream_cfg: TrainConfig,
) -> tuple[list[dict], dict]:
    """Sweep the shortlist size and confidence threshold on one seed.

    Returns (grid records, monotonicity evidence). While sweeping, asserts
    the exact monotone-filter property: for a fixed candidate batch,
    raising beta never grows the passing set. Candidate batches for the
    same slot are identical across runs (generation never reads k or beta),
    which the sweep also verifies.
    """
    grid = []
    slot_candidates: dict[tuple, dict[float, list[dict]]] = {}
    for k in sorted(ks):
        for beta in betas:
            cfg = replace(base_cfg, top_k=k, beta=beta, seed=seed, selection_mode="tplus_s")
            acc, res = _run_once(inputs, cfg, downstream_cfg)
            grid.append(
                {
                    "top_k": k,
                    "beta": beta,
                    "seed": seed,
                    "accuracy": acc,
                    "fallback_count": res.report["counts"]["fallback"],
                    "refined_count": res.report["counts"]["refined"],
                }
            )
            for slot in res.report["slots"]:
                if "candidates" not in slot:
                    continue
                key = (slot["class"], slot["cluster"])
                slot_candidates.setdefault(key, {})[beta] = slot["candidates"]
    checked_slots = 0
    for key, by_beta in slot_candidates.items():
        betas_here = sorted(by_beta)
        # identical candidate batches across runs for the same slot
        first = by_beta[betas_here[0]]
        for b in betas_here[1:]:
            assert by_beta[b] == first, f"candidate batch for slot {key} varies with beta"
        intended = key[0]
        sets = [_passing_set(first, intended, b) for b in betas_here]
        for lo, hi in zip(sets, sets[1:]):
            assert hi <= lo, f"raising beta grew the passing set for slot {key}"
        checked_slots += 1
    evidence = {"slots_checked": checked_slots, "betas": sorted(betas), "ks": sorted(ks)}
    return grid, evidence


def sensitivity_csv(grid: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["top_k", "beta", "seed", "accuracy", "fallback_count", "refined_count"])
    for row in grid:
        writer.writerow(
            [
                row["top_k"],
                row["beta"],
                row["seed"],
                f"{row['accuracy']:.6f}",
                row["fallback_count"],
                row["refined_count"],
            ]
        )
    return buf.getvalue()
