"""Stand-in fidelity metrics, timing, and FLOP reporting.

Fidelity is cosine similarity in the frozen encoder's feature space
between a generated region crop and a concept's reference images, with
the encoder's fixed offset (its zero-image response) removed so scores
reflect content rather than the shared bias. Timing/FLOP sweeps mirror
how inference cost moves as regions are added.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .concept import ConceptModule
from .dataset import SyntheticConcept
from .denoiser import DenoiserNet, NoiseSchedule
from . import counters
from .encoders import IMG_SIZE, ImageEncoder, LatentCoder
from .rcm import BoundingBox, Layout, RegionSpec
from .sampler import SampleConfig, sample
from .vocab import Vocabulary

# Disjoint quadrant boxes for the 1..4-region sweeps; every concept adds a
# fixed-size region, so the summed region area grows with the count.
_QUADRANTS = [(0.0, 0.0, 0.5, 0.5), (0.5, 0.0, 1.0, 0.5),
              (0.0, 0.5, 0.5, 1.0), (0.5, 0.5, 1.0, 1.0)]
BENCH_BOXES: dict[int, list[tuple[float, float, float, float]]] = {
    n: _QUADRANTS[:n] for n in (1, 2, 3, 4)
}


@dataclass
class EvalReport:
    fidelity: list[dict] = field(default_factory=list)
    timing: list[dict] = field(default_factory=list)
    flops: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


class FidelityScorer:
    """Cosine scoring against per-concept reference features."""

    def __init__(self, image_encoder: ImageEncoder):
        self.encoder = image_encoder
        zero = np.zeros((image_encoder.img_size, image_encoder.img_size, 3),
                        dtype=np.float32)
        self._offset = image_encoder.encode(zero).pooled

    def features(self, img: np.ndarray) -> np.ndarray:
        return self.encoder.encode(img).pooled - self._offset

    def reference(self, concept: SyntheticConcept) -> np.ndarray:
        return np.mean([self.features(im) for im in concept.images], axis=0)

    def score(self, img: np.ndarray, reference: np.ndarray) -> float:
        f = self.features(img).astype(np.float64)
        r = reference.astype(np.float64)
        denom = np.linalg.norm(f) * np.linalg.norm(r)
        if denom == 0:
            return 0.0
        return float(f @ r / denom)


def crop_region(img: np.ndarray, bbox: BoundingBox, out_size: int = IMG_SIZE
                ) -> np.ndarray:
    """Crop the box from a generated image and resize (nearest) so the
    frozen encoder can consume it."""
    h, w = img.shape[:2]
    r0, r1, c0, c1 = bbox.to_cells(h, w)
    crop = img[r0:r1, c0:c1]
    rows = np.clip((np.arange(out_size) + 0.5) * crop.shape[0] / out_size,
                   0, crop.shape[0] - 1).astype(int)
    cols = np.clip((np.arange(out_size) + 0.5) * crop.shape[1] / out_size,
                   0, crop.shape[1] - 1).astype(int)
    return crop[rows][:, cols]


def evaluate(layouts: list[Layout],
             references: dict[str, SyntheticConcept],
             net: DenoiserNet, vocab: Vocabulary, latent_coder: LatentCoder,
             image_encoder: ImageEncoder, cfg: SampleConfig,
             seeds: list[int], sched: NoiseSchedule | None = None,
             bench_modules: list[ConceptModule] | None = None,
             concept_counts: tuple[int, ...] = (1, 2, 3, 4),
             bench_steps: int = 8) -> EvalReport:
    """Generate per layout/seed, score every region crop against every
    reference concept, and (optionally) sweep timing/FLOPs over 1..N
    concepts. `references` maps placeholder -> source concept."""
    if not layouts:
        raise ValueError("evaluate needs at least one layout")
    scorer = FidelityScorer(image_encoder)
    ref_feats = {ph: scorer.reference(c) for ph, c in references.items()}
    report = EvalReport()
    for li, layout in enumerate(layouts):
        for seed in seeds:
            run_cfg = SampleConfig(steps=cfg.steps, guidance=cfg.guidance,
                                   seed=seed, overlap_literal=cfg.overlap_literal)
            img = sample(layout, run_cfg, net, vocab, latent_coder, sched)
            for spec in layout.regions:
                crop = crop_region(img, spec.bbox)
                scores = {ph: scorer.score(crop, feat)
                          for ph, feat in ref_feats.items()}
                own = spec.module.placeholder
                report.fidelity.append({
                    "layout": li,
                    "seed": seed,
                    "region": own,
                    "score": scores.get(own),
                    "cross_scores": scores,
                })
    if bench_modules:
        timing, flops = bench(bench_modules, net, vocab, latent_coder,
                              concept_counts, steps=bench_steps,
                              guidance=cfg.guidance, seed=cfg.seed, sched=sched)
        report.timing = timing
        report.flops = {"by_concepts": flops}
    return report


def bench_layout(modules: list[ConceptModule], n: int) -> Layout:
    """Fixed-geometry layout with n disjoint regions."""
    if n not in BENCH_BOXES:
        raise ValueError(f"no bench geometry for {n} concepts")
    if len(modules) < n:
        raise ValueError(f"need {n} modules, got {len(modules)}")
    regions = [
        RegionSpec(module=m, bbox=BoundingBox(*box),
                   prompt=f"a {m.placeholder} {m.class_noun}")
        for m, box in zip(modules[:n], BENCH_BOXES[n])
    ]
    return Layout(base_prompt="a photo", regions=regions)


def bench(modules: list[ConceptModule], net: DenoiserNet, vocab: Vocabulary,
          latent_coder: LatentCoder, concept_counts=(1, 2, 3, 4),
          steps: int = 8, guidance: float = 7.5, seed: int = 0,
          sched: NoiseSchedule | None = None) -> tuple[list[dict], list[dict]]:
    """Wall-time and exact FLOP counts per concept count."""
    timing, flops = [], []
    res = net.config.latent_size
    for n in concept_counts:
        layout = bench_layout(modules, n)
        counters.reset_counters()
        cfg = SampleConfig(steps=steps, guidance=guidance, seed=seed)
        start = time.perf_counter()
        sample(layout, cfg, net, vocab, latent_coder, sched)
        elapsed = time.perf_counter() - start
        snap = counters.snapshot()
        area = 0
        for spec in layout.regions:
            r0, r1, c0, c1 = spec.bbox.to_cells(res, res)
            area += (r1 - r0) * (c1 - c0)
        timing.append({"concepts": n, "seconds": elapsed})
        flops.append({
            "concepts": n,
            "self_attention": snap["attention_flops"]["self"],
            "cross_attention": snap["attention_flops"]["cross"],
            "region_cells": area,
        })
    return timing, flops
