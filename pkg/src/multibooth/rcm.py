"""Region-partitioned cross-attention for training-free composition.

A layout places trained concept modules into normalized bounding boxes
with per-region prompts. At every cross-attention layer each region's
cells are cropped, attended against that region's summed (region +
base) prompt embedding using that concept's LoRA-adapted keys/values,
and written back: cells owned by one region take its output, cells
under several regions take a weighted mean with renormalized weights,
and uncovered cells attend to the base prompt with no LoRA. No
parameter is ever updated here — composition is pure inference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .concept import ConceptModule, load_module
from .denoiser import AttentionLayer, DenoiserNet, predict_noise
from .tensor import Tensor, add, matmul, reshape
from .vocab import PromptEmbedding, Vocabulary

LAYOUT_VERSION = 1


class LayoutError(ValueError):
    """Invalid layout, region, or bounding box."""


@dataclass(frozen=True)
class BoundingBox:
    """Normalized [0,1] box; maps to at least one cell at any resolution."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise LayoutError(
                f"bounding box ({self.x0}, {self.y0}, {self.x1}, {self.y1}) "
                "needs 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1"
            )

    def to_cells(self, h: int, w: int) -> tuple[int, int, int, int]:
        """(r0, r1, c0, c1) cell bounds: floor/ceil with a >=1x1 guarantee."""
        r0 = min(int(np.floor(self.y0 * h)), h - 1)
        r1 = max(int(np.ceil(self.y1 * h)), r0 + 1)
        c0 = min(int(np.floor(self.x0 * w)), w - 1)
        c1 = max(int(np.ceil(self.x1 * w)), c0 + 1)
        return r0, min(r1, h), c0, min(c1, w)

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass
class RegionSpec:
    """One concept's placement: module, box, region prompt, overlap weight."""

    module: ConceptModule
    bbox: BoundingBox
    prompt: str
    weight: float = 1.0

    def __post_init__(self):
        if self.weight < 0:
            raise LayoutError(f"region weight must be >= 0, got {self.weight}")
        words = self.prompt.split() if isinstance(self.prompt, str) else list(self.prompt)
        hits = sum(1 for w in words if w == self.module.placeholder)
        if hits != 1:
            raise LayoutError(
                f"region prompt {self.prompt!r} must contain placeholder "
                f"{self.module.placeholder!r} exactly once (found {hits})"
            )


@dataclass
class Layout:
    """A base prompt plus 1..8 regions with distinct placeholders."""

    base_prompt: str
    regions: list[RegionSpec] = field(default_factory=list)

    def __post_init__(self):
        if not 1 <= len(self.regions) <= 8:
            raise LayoutError(f"layouts support 1..8 regions, got {len(self.regions)}")
        names = [r.module.placeholder for r in self.regions]
        if len(set(names)) != len(names):
            raise LayoutError(f"duplicate placeholders across regions: {names}")

    def bindings(self) -> dict[str, np.ndarray]:
        return {r.module.placeholder: r.module.embedding_final for r in self.regions}

    def canonical_regions(self) -> list[RegionSpec]:
        """Regions in placeholder order, so results never depend on list order."""
        return sorted(self.regions, key=lambda r: r.module.placeholder)


def load_layout(path, module_dir=None) -> Layout:
    """Read the versioned layout JSON; module paths resolve relative to the
    layout file unless module_dir is given."""
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise LayoutError(f"layout file {path} is not valid JSON: {exc}") from exc
    if spec.get("version", 1) != LAYOUT_VERSION:
        raise LayoutError(f"layout version {spec.get('version')} unsupported")
    base = module_dir if module_dir is not None else path.parent
    regions = []
    for r in spec["regions"]:
        module_path = Path(r["module"])
        if not module_path.is_absolute():
            module_path = Path(base) / module_path
        regions.append(RegionSpec(
            module=load_module(module_path),
            bbox=BoundingBox(*[float(v) for v in r["bbox"]]),
            prompt=r["prompt"],
            weight=float(r.get("weight", 1.0)),
        ))
    return Layout(base_prompt=spec.get("base_prompt", ""), regions=regions)


def save_layout(layout: Layout, path, module_paths: dict[str, str]) -> None:
    spec = {
        "version": LAYOUT_VERSION,
        "base_prompt": layout.base_prompt,
        "regions": [{
            "module": module_paths[r.module.placeholder],
            "prompt": r.prompt,
            "bbox": r.bbox.as_list(),
            "weight": r.weight,
        } for r in layout.regions],
    }
    Path(path).write_text(json.dumps(spec, indent=2, sort_keys=True))


def region_text_embedding(spec: RegionSpec, layout: Layout,
                          vocab: Vocabulary) -> PromptEmbedding:
    """Sum of the region prompt's and base prompt's embeddings (k x d each).

    The region's placeholder binds to its module's final embedding; an
    empty base prompt short-circuits to the region embedding alone so
    the additive identity is exact.
    """
    bindings = layout.bindings()
    region = vocab.encode(spec.prompt, bindings)
    base_words = layout.base_prompt.split() if isinstance(layout.base_prompt, str) \
        else list(layout.base_prompt)
    if not base_words:
        return region
    base = vocab.encode(base_words, bindings)
    return PromptEmbedding(tokens=add(region.tokens, base.tokens),
                           mask=region.mask | base.mask,
                           words=region.words)


def _overlap_blend(stack: np.ndarray, weights: np.ndarray, covered: np.ndarray,
                   count: np.ndarray, literal: bool) -> np.ndarray:
    """Weighted mean over covering regions for cells with count >= 2.

    Renormalized weights are asserted to sum to 1 per cell before
    blending. `literal` additionally divides by the overlap count (the
    printed-formula variant kept for comparison).
    """
    over = count >= 2
    w = weights[:, None, None] * covered  # (S, h, w)
    denom = w.sum(axis=0)
    if np.any(over & (denom <= 0)):
        raise LayoutError("overlapping regions have zero total weight")
    w_norm = np.where(over[None], w / np.where(denom == 0, 1.0, denom)[None], 0.0)
    sums = w_norm.sum(axis=0)[over]
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise LayoutError("renormalized overlap weights do not sum to 1")
    blended = np.einsum("s h w, s h w d -> h w d", w_norm, stack)
    if literal:
        blended = blended / np.maximum(count, 1)[:, :, None]
    return blended


def regional_cross_attention(feat: Tensor, layout: Layout, layer: AttentionLayer,
                             vocab: Vocabulary, overlap_literal: bool = False) -> Tensor:
    """One cross-attention layer evaluated region by region on an
    (h, w, d_model) feature map; output has the same shape.

    All regions are computed within a single pass over the layer. The
    assembly runs on plain arrays (composition is inference-only); the
    per-region attention itself is the exact same code path as plain
    cross-attention, so a single full-image region with an empty base
    prompt is bit-identical to the unpartitioned layer.
    """
    h, w, d_model = feat.shape
    tokens = reshape(feat, (h * w, d_model))
    # Uncovered cells attend to the base prompt with no LoRA; an empty
    # base prompt degenerates to the all-pad (null) conditioning.
    base_prompt = vocab.encode(layout.base_prompt, layout.bindings())
    base_map = layer.attention_map(tokens, base_prompt.tokens).data.reshape(
        h, w, layer.v_dim)

    regions = layout.canonical_regions()
    stack = np.zeros((len(regions), h, w, layer.v_dim), dtype=base_map.dtype)
    covered = np.zeros((len(regions), h, w), dtype=base_map.dtype)
    weights = np.zeros(len(regions), dtype=base_map.dtype)
    for i, spec in enumerate(regions):
        r0, r1, c0, c1 = spec.bbox.to_cells(h, w)
        if r1 <= r0 or c1 <= c0:
            raise LayoutError(
                f"region {spec.module.placeholder!r} maps to an empty box at "
                f"resolution {h}x{w}"
            )
        crop = feat[r0:r1, c0:c1, :]
        crop_tokens = reshape(crop, ((r1 - r0) * (c1 - c0), d_model))
        ctx = region_text_embedding(spec, layout, vocab)
        lora = spec.module.lora_pairs(dtype=crop_tokens.dtype).get(layer.name)
        if lora is None:
            raise LayoutError(
                f"module {spec.module.placeholder!r} has no LoRA for layer "
                f"{layer.name!r}"
            )
        att = layer.attention_map(crop_tokens, ctx.tokens, lora).data
        stack[i, r0:r1, c0:c1] = att.reshape(r1 - r0, c1 - c0, layer.v_dim)
        covered[i, r0:r1, c0:c1] = 1.0
        weights[i] = spec.weight

    count = covered.sum(axis=0)
    out = base_map.copy()
    # Cells owned by exactly one region take that region's output verbatim.
    for i in range(len(regions)):
        single = (count == 1) & (covered[i] > 0)
        out[single] = stack[i][single]
    if np.any(count >= 2):
        blended = _overlap_blend(stack, weights, covered, count, overlap_literal)
        out[count >= 2] = blended[count >= 2]

    out_tokens = Tensor(out.reshape(h * w, layer.v_dim))
    projected = matmul(out_tokens, layer.w_out)
    return reshape(projected, (h, w, d_model))


def compose_and_denoise(z_t: Tensor, t: int, layout: Layout, net: DenoiserNet,
                        vocab: Vocabulary, overlap_literal: bool = False) -> Tensor:
    """Full denoiser pass with every cross-attention layer partitioned by
    the layout. Plug-and-play: zero parameter updates occur."""
    for spec in layout.regions:
        spec.module.validate()

    def cross_fn(name: str, layer: AttentionLayer, tokens: Tensor, res: int) -> Tensor:
        grid = reshape(tokens, (res, res, net.config.d_model))
        out = regional_cross_attention(grid, layout, layer, vocab, overlap_literal)
        return reshape(out, (res * res, net.config.d_model))

    return net.forward(z_t, t, cross_fn=cross_fn)
