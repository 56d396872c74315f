"""Regional cross-attention: partition oracles, overlap blending, locality."""

import json

import numpy as np
import pytest

from multibooth import counters
from multibooth.concept import ConceptModule, save_module
from multibooth.denoiser import DenoiserConfig, DenoiserNet, predict_noise
from multibooth.rcm import (BoundingBox, Layout, LayoutError, RegionSpec,
                            compose_and_denoise, load_layout,
                            region_text_embedding, regional_cross_attention,
                            save_layout)
from multibooth.rng import Rng
from multibooth.tensor import Tensor
from multibooth.vocab import Vocabulary

RNG = Rng(404).child("rcm-tests")
FULL = BoundingBox(0.0, 0.0, 1.0, 1.0)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary(seed=0)


@pytest.fixture(scope="module")
def net():
    return DenoiserNet(DenoiserConfig(), seed=21).freeze()


def make_module(placeholder: str, noun: str, seed: int, net: DenoiserNet,
                vocab: Vocabulary, lora_scale: float = 0.3) -> ConceptModule:
    """A synthetic trained-module stand-in with random low-rank factors."""
    rng = Rng(seed).child(f"module/{placeholder}")
    direction = rng.normal((64,), np.float64)
    final = direction / np.linalg.norm(direction) * vocab.norm(noun)
    raw = (direction * 3.7).astype(np.float32)
    lora = {}
    for name, dims in net.lora_dims().items():
        lora[name] = {}
        for part, (in_dim, out_dim) in dims.items():
            lora[name][part] = {
                "a": (rng.child(f"{name}/{part}/a").normal((16, in_dim), np.float64)
                      * lora_scale / 4.0).astype(np.float32),
                "b": (rng.child(f"{name}/{part}/b").normal((out_dim, 16), np.float64)
                      * lora_scale / 4.0).astype(np.float32),
            }
    module = ConceptModule(
        placeholder=placeholder, class_noun=noun,
        embedding_raw=raw, embedding_final=final.astype(np.float32),
        lora=lora, rank=16,
        metadata={"class_noun_norm": vocab.norm(noun), "vocab_seed": 0,
                  "concept_id": f"synthetic-{placeholder}"},
    )
    module.validate()
    return module


def feature_map(res: int, stream: str) -> Tensor:
    return Tensor(RNG.child(stream).normal((res, res, 64)))


# -- bounding boxes ----------------------------------------------------------------


class TestBoundingBox:
    def test_validation(self):
        with pytest.raises(LayoutError):
            BoundingBox(0.5, 0.0, 0.5, 1.0)
        with pytest.raises(LayoutError):
            BoundingBox(0.0, 0.0, 1.2, 1.0)

    def test_full_box_covers_everything(self):
        assert FULL.to_cells(8, 8) == (0, 8, 0, 8)
        assert FULL.to_cells(4, 4) == (0, 4, 0, 4)

    def test_minimum_one_cell_at_coarse_resolution(self):
        tiny = BoundingBox(0.50, 0.50, 0.52, 0.52)
        r0, r1, c0, c1 = tiny.to_cells(4, 4)
        assert r1 - r0 >= 1 and c1 - c0 >= 1

    def test_resolution_consistency(self):
        # Any box valid at 8x8 stays non-empty at 4x4.
        rng = RNG.child("boxes")
        for _ in range(100):
            x0, y0 = rng.uniform(0.0, 0.95), rng.uniform(0.0, 0.95)
            box = BoundingBox(x0, y0, min(1.0, x0 + max(0.01, rng.uniform(0, 0.5))),
                              min(1.0, y0 + max(0.01, rng.uniform(0, 0.5))))
            for res in (8, 4):
                r0, r1, c0, c1 = box.to_cells(res, res)
                assert r1 > r0 and c1 > c0


# -- layout / specs ----------------------------------------------------------------


class TestLayoutValidation:
    def test_placeholder_once_in_prompt(self, net, vocab):
        module = make_module("S*", "dog", 1, net, vocab)
        with pytest.raises(LayoutError, match="exactly once"):
            RegionSpec(module=module, bbox=FULL, prompt="a S* S* dog")
        with pytest.raises(LayoutError, match="exactly once"):
            RegionSpec(module=module, bbox=FULL, prompt="a dog")

    def test_duplicate_placeholders_rejected(self, net, vocab):
        m1 = make_module("S*", "dog", 1, net, vocab)
        m2 = make_module("S*", "cat", 2, net, vocab)
        with pytest.raises(LayoutError, match="duplicate placeholders"):
            Layout(base_prompt="", regions=[
                RegionSpec(module=m1, bbox=FULL, prompt="a S* dog"),
                RegionSpec(module=m2, bbox=FULL, prompt="a S* cat"),
            ])

    def test_region_count_bounds(self, net, vocab):
        with pytest.raises(LayoutError, match="1..8"):
            Layout(base_prompt="", regions=[])


class TestRegionTextEmbedding:
    def test_empty_base_is_identity(self, net, vocab):
        module = make_module("S*", "dog", 3, net, vocab)
        layout = Layout(base_prompt="", regions=[
            RegionSpec(module=module, bbox=FULL, prompt="a S* dog")])
        combined = region_text_embedding(layout.regions[0], layout, vocab)
        alone = vocab.encode("a S* dog", {"S*": module.embedding_final})
        assert np.array_equal(combined.tokens.data, alone.tokens.data)

    def test_equal_prompts_double(self, net, vocab):
        module = make_module("S*", "dog", 3, net, vocab)
        layout = Layout(base_prompt="a S* dog", regions=[
            RegionSpec(module=module, bbox=FULL, prompt="a S* dog")])
        combined = region_text_embedding(layout.regions[0], layout, vocab)
        alone = vocab.encode("a S* dog", {"S*": module.embedding_final})
        assert np.array_equal(combined.tokens.data, 2.0 * alone.tokens.data)

    def test_placeholder_slot_is_embedding_plus_base_row(self, net, vocab):
        module = make_module("S*", "dog", 4, net, vocab)
        layout = Layout(base_prompt="on the beach", regions=[
            RegionSpec(module=module, bbox=FULL, prompt="a S* dog")])
        combined = region_text_embedding(layout.regions[0], layout, vocab)
        base = vocab.encode("on the beach")
        expected = module.embedding_final + base.tokens.data[1]
        assert np.allclose(combined.tokens.data[1], expected, atol=1e-7)


# -- the partition oracles -----------------------------------------------------------


class TestDegeneratePartition:
    def test_full_region_matches_plain_lora_attention_everywhere(self, net, vocab):
        # The module's primary oracle, checked at every cross layer and
        # both attention resolutions.
        module = make_module("S*", "dog", 5, net, vocab)
        layout = Layout(base_prompt="", regions=[
            RegionSpec(module=module, bbox=FULL, prompt="a S* dog")])
        ctx = vocab.encode("a S* dog", {"S*": module.embedding_final})
        for layer in net.cross_attn:
            lora = module.lora_pairs()[layer.name]
            for res in (8, 4):
                feat = feature_map(res, f"deg/{layer.name}/{res}")
                tokens = feat.reshape((res * res, 64))
                regional = regional_cross_attention(feat, layout, layer, vocab)
                plain = layer.forward(tokens, ctx.tokens, lora)
                assert np.array_equal(regional.data.reshape(res * res, 64),
                                      plain.data), (layer.name, res)

    def test_compose_reduces_to_single_concept_path(self, net, vocab):
        module = make_module("S*", "dog", 6, net, vocab)
        layout = Layout(base_prompt="", regions=[
            RegionSpec(module=module, bbox=FULL, prompt="a S* dog")])
        z = Tensor(RNG.child("compose-z").normal((4, 8, 8)))
        composed = compose_and_denoise(z, 321, layout, net, vocab)
        prompt = vocab.encode("a S* dog", {"S*": module.embedding_final})
        plain = predict_noise(net, z, 321, prompt, module.lora_pairs())
        assert np.array_equal(composed.data, plain.data)


class TestCompositionality:
    def test_disjoint_regions_match_reference_runs(self, net, vocab):
        dog = make_module("S*", "dog", 7, net, vocab)
        cat = make_module("V*", "cat", 8, net, vocab)
        left = BoundingBox(0.0, 0.0, 0.5, 1.0)
        right = BoundingBox(0.625, 0.0, 1.0, 1.0)
        base_prompt = "on the beach"
        both = Layout(base_prompt=base_prompt, regions=[
            RegionSpec(module=dog, bbox=left, prompt="a S* dog"),
            RegionSpec(module=cat, bbox=right, prompt="a V* cat"),
        ])
        only_dog = Layout(base_prompt=base_prompt, regions=[both.regions[0]])
        only_cat = Layout(base_prompt=base_prompt, regions=[both.regions[1]])

        for layer in net.cross_attn:
            for res in (8, 4):
                feat = feature_map(res, f"comp/{layer.name}/{res}")
                combined = regional_cross_attention(feat, both, layer, vocab).data
                ref_dog = regional_cross_attention(feat, only_dog, layer, vocab).data
                ref_cat = regional_cross_attention(feat, only_cat, layer, vocab).data
                base_ctx = vocab.encode(base_prompt)
                tokens = feat.reshape((res * res, 64))
                ref_base = layer.forward(tokens, base_ctx.tokens).data.reshape(
                    res, res, 64)

                dog_mask = np.zeros((res, res), dtype=bool)
                r0, r1, c0, c1 = left.to_cells(res, res)
                dog_mask[r0:r1, c0:c1] = True
                cat_mask = np.zeros((res, res), dtype=bool)
                r0, r1, c0, c1 = right.to_cells(res, res)
                cat_mask[r0:r1, c0:c1] = True
                outside = ~(dog_mask | cat_mask)

                assert np.abs(combined[dog_mask] - ref_dog[dog_mask]).max() < 1e-6
                assert np.abs(combined[cat_mask] - ref_cat[cat_mask]).max() < 1e-6
                if outside.any():
                    assert np.abs(combined[outside] - ref_base[outside]).max() < 1e-6

    def test_region_locality(self, net, vocab):
        # Changing region B's prompt/module leaves cells outside its box
        # bit-unchanged.
        dog = make_module("S*", "dog", 9, net, vocab)
        cat = make_module("V*", "cat", 10, net, vocab)
        bird = make_module("V*", "bird", 11, net, vocab)
        left = BoundingBox(0.0, 0.0, 0.5, 1.0)
        right = BoundingBox(0.5, 0.0, 1.0, 1.0)
        layer = net.cross_attn[0]
        feat = feature_map(8, "locality")

        def run(second):
            layout = Layout(base_prompt="a photo", regions=[
                RegionSpec(module=dog, bbox=left, prompt="a S* dog"), second])
            return regional_cross_attention(feat, layout, layer, vocab).data

        out1 = run(RegionSpec(module=cat, bbox=right, prompt="a V* cat"))
        out2 = run(RegionSpec(module=bird, bbox=right, prompt="the V* bird"))
        r0, r1, c0, c1 = right.to_cells(8, 8)
        changed = np.zeros((8, 8), dtype=bool)
        changed[r0:r1, c0:c1] = True
        assert np.array_equal(out1[~changed], out2[~changed])
        assert not np.array_equal(out1[changed], out2[changed])


class TestOverlap:
    def overlapping_layout(self, net, vocab, w1, w2, base="a photo"):
        dog = make_module("S*", "dog", 12, net, vocab)
        cat = make_module("V*", "cat", 13, net, vocab)
        return Layout(base_prompt=base, regions=[
            RegionSpec(module=dog, bbox=FULL, prompt="a S* dog", weight=w1),
            RegionSpec(module=cat, bbox=FULL, prompt="a V* cat", weight=w2),
        ])

    def test_degenerate_weights_equal_single_region(self, net, vocab):
        layout = self.overlapping_layout(net, vocab, 1.0, 0.0)
        solo = Layout(base_prompt="a photo", regions=[layout.regions[0]])
        layer = net.cross_attn[1]
        feat = feature_map(8, "ov-degenerate")
        both = regional_cross_attention(feat, layout, layer, vocab).data
        alone = regional_cross_attention(feat, solo, layer, vocab).data
        assert np.array_equal(both, alone)

    def test_uniform_weights_blend_is_mean(self, net, vocab):
        layout = self.overlapping_layout(net, vocab, 1.0, 1.0)
        layer = net.cross_attn[2]
        feat = feature_map(8, "ov-mean")
        tokens = feat.reshape((64, 64))
        maps = []
        for spec in layout.canonical_regions():
            ctx = region_text_embedding(spec, layout, vocab)
            maps.append(layer.attention_map(
                tokens, ctx.tokens, spec.module.lora_pairs()[layer.name]).data)
        expected = Tensor((0.5 * maps[0] + 0.5 * maps[1]).astype(np.float32))
        expected_out = (expected @ Tensor(layer.w_out.data)).data.reshape(8, 8, 64)
        got = regional_cross_attention(feat, layout, layer, vocab).data
        assert np.abs(got - expected_out).max() < 1e-6

    def test_literal_form_halves_uniform_blend(self, net, vocab):
        layout = self.overlapping_layout(net, vocab, 1.0, 1.0)
        layer = net.cross_attn[0]
        feat = feature_map(8, "ov-literal")
        weighted = regional_cross_attention(feat, layout, layer, vocab,
                                            overlap_literal=False)
        literal = regional_cross_attention(feat, layout, layer, vocab,
                                           overlap_literal=True)
        # Pre-projection maps halve; compare after undoing the output proj
        # by running both through the same projection: linearity makes the
        # relationship exact on the outputs as well.
        assert np.abs(literal.data - 0.5 * weighted.data).max() < 2e-6

    def test_unnormalized_weights_renormalize(self, net, vocab):
        layout = self.overlapping_layout(net, vocab, 2.0, 6.0)
        layer = net.cross_attn[0]
        feat = feature_map(8, "ov-renorm")
        got = regional_cross_attention(feat, layout, layer, vocab).data
        tokens = feat.reshape((64, 64))
        maps = {}
        for spec in layout.canonical_regions():
            ctx = region_text_embedding(spec, layout, vocab)
            maps[spec.module.placeholder] = layer.attention_map(
                tokens, ctx.tokens, spec.module.lora_pairs()[layer.name]).data
        blend = 0.25 * maps["S*"] + 0.75 * maps["V*"]
        expected = (Tensor(blend.astype(np.float32)) @ Tensor(layer.w_out.data)) \
            .data.reshape(8, 8, 64)
        assert np.abs(got - expected).max() < 1e-6

    def test_zero_total_weight_errors(self, net, vocab):
        layout = self.overlapping_layout(net, vocab, 0.0, 0.0)
        layer = net.cross_attn[0]
        with pytest.raises(LayoutError, match="zero total weight"):
            regional_cross_attention(feature_map(8, "ov-zero"), layout, layer, vocab)


class TestComposeContracts:
    def test_permutation_invariance(self, net, vocab):
        dog = make_module("S*", "dog", 14, net, vocab)
        cat = make_module("V*", "cat", 15, net, vocab)
        r1 = RegionSpec(module=dog, bbox=BoundingBox(0.0, 0.0, 0.7, 1.0),
                        prompt="a S* dog")
        r2 = RegionSpec(module=cat, bbox=BoundingBox(0.3, 0.0, 1.0, 1.0),
                        prompt="a V* cat", weight=2.0)
        z = Tensor(RNG.child("perm-z").normal((4, 8, 8)))
        out_a = compose_and_denoise(
            z, 77, Layout(base_prompt="a photo", regions=[r1, r2]), net, vocab)
        out_b = compose_and_denoise(
            z, 77, Layout(base_prompt="a photo", regions=[r2, r1]), net, vocab)
        assert np.array_equal(out_a.data, out_b.data)

    def test_zero_gradient_steps_during_composition(self, net, vocab):
        counters.reset_counters()
        module = make_module("S*", "dog", 16, net, vocab)
        layout = Layout(base_prompt="a photo", regions=[
            RegionSpec(module=module, bbox=FULL, prompt="a S* dog")])
        z = Tensor(RNG.child("plug-z").normal((4, 8, 8)))
        compose_and_denoise(z, 10, layout, net, vocab)
        assert counters.GRAD_STEPS == 0

    def test_cross_flops_grow_with_region_area_self_constant(self, net, vocab):
        dog = make_module("S*", "dog", 17, net, vocab)
        cat = make_module("V*", "cat", 18, net, vocab)
        z = Tensor(RNG.child("flops-z").normal((4, 8, 8)))

        def flops_for(regions):
            counters.reset_counters()
            compose_and_denoise(z, 10, Layout(base_prompt="a photo",
                                              regions=regions), net, vocab)
            return dict(counters.ATTENTION_FLOPS)

        one = flops_for([RegionSpec(module=dog, bbox=BoundingBox(0, 0, 0.5, 1),
                                    prompt="a S* dog")])
        two = flops_for([RegionSpec(module=dog, bbox=BoundingBox(0, 0, 0.5, 1),
                                    prompt="a S* dog"),
                         RegionSpec(module=cat, bbox=BoundingBox(0.5, 0, 1, 1),
                                    prompt="a V* cat")])
        assert two["self"] == one["self"]
        assert two["cross"] > one["cross"]


class TestLayoutFiles:
    def test_roundtrip(self, net, vocab, tmp_path):
        dog = make_module("S*", "dog", 19, net, vocab)
        cat = make_module("V*", "cat", 20, net, vocab)
        save_module(dog, tmp_path / "dog.mbcm")
        save_module(cat, tmp_path / "cat.mbcm")
        layout = Layout(base_prompt="on the beach", regions=[
            RegionSpec(module=dog, bbox=BoundingBox(0.0, 0.0, 0.5, 1.0),
                       prompt="a S* dog"),
            RegionSpec(module=cat, bbox=BoundingBox(0.5, 0.0, 1.0, 1.0),
                       prompt="a V* cat", weight=2.0),
        ])
        save_layout(layout, tmp_path / "l.json",
                    {"S*": "dog.mbcm", "V*": "cat.mbcm"})
        loaded = load_layout(tmp_path / "l.json")
        assert loaded.base_prompt == "on the beach"
        assert [r.module.placeholder for r in loaded.regions] == ["S*", "V*"]
        assert loaded.regions[1].weight == 2.0
        assert np.array_equal(loaded.regions[0].module.embedding_final,
                              dog.embedding_final)

    def test_version_check(self, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"version": 9, "regions": []}))
        with pytest.raises(LayoutError, match="version 9"):
            load_layout(tmp_path / "bad.json")

    def test_missing_module_file(self, tmp_path):
        (tmp_path / "l.json").write_text(json.dumps({
            "version": 1, "base_prompt": "",
            "regions": [{"module": "missing.mbcm", "prompt": "a S* dog",
                         "bbox": [0, 0, 1, 1]}],
        }))
        with pytest.raises(FileNotFoundError):
            load_layout(tmp_path / "l.json")
