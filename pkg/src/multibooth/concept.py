"""Single-concept learning pieces.

QFormerLite turns (visual patches, class-noun embedding) into a
customized word embedding via learnable query tokens; adaptive concept
normalization (ACN) rescales that embedding onto the class noun's norm
so it lives in the same magnitude regime as ordinary words; the result
plus per-layer LoRA factors is packaged into a plug-and-play
ConceptModule with a validated binary format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .denoiser import AttentionLayer, LoraPair
from .encoders import VisualEmbedding
from .rng import Rng
from .tensor import (Tensor, add, concat, div, l2_norm, layer_norm, matmul,
                     mul, reshape, silu, slice_, tile_rows)
from .vocab import Vocabulary

MODULE_MAGIC = b"MBCM"
MODULE_VERSION = 1


class ModuleValidationError(ValueError):
    """A concept-module file violates one of its invariants."""


@dataclass
class QFormerConfig:
    queries: int = 16
    blocks: int = 2
    dim: int = 64
    visual_dim: int = 64
    heads: int = 4
    qk_dim: int = 32
    v_dim: int = 32
    mlp_hidden: int = 256


class QFormerLite:
    """Query-token multimodal encoder.

    Each block runs self-attention over [queries ‖ concept-name
    embedding], then cross-attention from the queries to the visual
    patches, then an MLP; pre-layer-norm residual throughout. The output
    keeps the query-token shape (K x d). Text and visual inputs are
    read-only; every QFormer parameter is trainable.
    """

    def __init__(self, config: QFormerConfig, seed: int = 0, dtype=np.float32,
                 rng: Rng | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = (rng or Rng(seed)).child("qformer-init")
        c = config
        self.params: dict[str, Tensor] = {}

        def param(name, arr):
            t = Tensor(arr.astype(self.dtype), requires_grad=True)
            self.params[name] = t
            return t

        def gauss(key, rows, cols):
            return rng.child(key).normal((rows, cols), np.float64) / np.sqrt(rows)

        param("query_tokens", 0.2 * rng.child("query_tokens").normal(
            (c.queries, c.dim), np.float64))
        self.self_attn: list[AttentionLayer] = []
        self.cross_attn: list[AttentionLayer] = []
        for i in range(c.blocks):
            for suffix in ("ln1", "ln2", "ln3"):
                param(f"block{i}.{suffix}.g", np.ones(c.dim))
                param(f"block{i}.{suffix}.b", np.zeros(c.dim))
            sa = AttentionLayer(f"qf.block{i}.self", c.dim, c.dim, c.qk_dim,
                                c.v_dim, c.heads, "self",
                                rng.child(f"block{i}.self"), self.dtype)
            ca = AttentionLayer(f"qf.block{i}.cross", c.dim, c.visual_dim, c.qk_dim,
                                c.v_dim, c.heads, "cross",
                                rng.child(f"block{i}.cross"), self.dtype)
            self.self_attn.append(sa)
            self.cross_attn.append(ca)
            self.params.update({k.removeprefix("qf."): v
                                for k, v in sa.named_params().items()})
            self.params.update({k.removeprefix("qf."): v
                                for k, v in ca.named_params().items()})
            param(f"block{i}.mlp.w1", gauss(f"block{i}.mlp.w1", c.dim, c.mlp_hidden))
            param(f"block{i}.mlp.b1", np.zeros(c.mlp_hidden))
            param(f"block{i}.mlp.w2", gauss(f"block{i}.mlp.w2", c.mlp_hidden, c.dim))
            param(f"block{i}.mlp.b2", np.zeros(c.dim))

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, visual: np.ndarray, text_row: np.ndarray) -> Tensor:
        """Output tokens, same shape as the query tokens (K x d)."""
        c = self.config
        visual = np.asarray(visual, dtype=self.dtype)
        if visual.ndim != 2 or visual.shape[1] != c.visual_dim:
            raise ValueError(f"visual embedding must be (P, {c.visual_dim}), "
                             f"got {visual.shape}")
        vis = Tensor(visual)
        text = Tensor(np.asarray(text_row, dtype=self.dtype).reshape(1, c.dim))
        q = self.params["query_tokens"]
        p = self.params
        for i in range(c.blocks):
            joint = concat([q, text], axis=0)
            h1 = layer_norm(joint, p[f"block{i}.ln1.g"], p[f"block{i}.ln1.b"])
            joint = add(joint, self.self_attn[i].forward(h1, h1))
            q = slice_(joint, (slice(0, c.queries),))
            h2 = layer_norm(q, p[f"block{i}.ln2.g"], p[f"block{i}.ln2.b"])
            q = add(q, self.cross_attn[i].forward(h2, vis))
            h3 = layer_norm(q, p[f"block{i}.ln3.g"], p[f"block{i}.ln3.b"])
            n = q.shape[0]
            h = add(matmul(h3, p[f"block{i}.mlp.w1"]),
                    tile_rows(p[f"block{i}.mlp.b1"], n))
            h = add(matmul(silu(h), p[f"block{i}.mlp.w2"]),
                    tile_rows(p[f"block{i}.mlp.b2"], n))
            q = add(q, h)
        return q


def extract_embedding(qf: QFormerLite, visual: VisualEmbedding, class_noun: str,
                      vocab: Vocabulary) -> Tensor:
    """Customized embedding: mean of the QFormer's output tokens."""
    text_row = vocab.embedding(class_noun)  # raises on unknown word
    out = qf.forward(visual.patches, text_row)
    return out.mean(axis=0)


def acn(v: Tensor, class_noun: str, vocab: Vocabulary) -> Tensor:
    """Adaptive concept normalization: rescale v onto the class noun's norm.

    Direction is preserved; the result's L2 norm equals the noun
    embedding's norm up to float rounding. Differentiable in v.
    """
    if not isinstance(v, Tensor):
        v = Tensor(np.asarray(v))
    noun_norm = vocab.norm(class_noun)
    v_norm = l2_norm(v)
    if v_norm.item() == 0.0:
        raise ValueError("zero-norm embedding: direction undefined under ACN")
    factor = div(Tensor(np.asarray(noun_norm, dtype=v.dtype)), v_norm)
    return mul(v, factor)


# -- the plug-and-play artifact ------------------------------------------------


@dataclass
class ConceptModule:
    """One learned concept: customized embedding plus LoRA factors.

    `embedding_raw` is the pre-ACN embedding at the end of training,
    `embedding_final` its ACN-normalized form (what prompts bind to).
    `lora` maps adapted layer name -> {"k"|"v" -> {"a","b"}} arrays.
    Immutable after build; safe to share across threads.
    """

    placeholder: str
    class_noun: str
    embedding_raw: np.ndarray
    embedding_final: np.ndarray
    lora: dict[str, dict[str, dict[str, np.ndarray]]]
    rank: int
    metadata: dict = field(default_factory=dict)

    def param_count(self) -> int:
        """Learnable parameters stored: d + sum of all LoRA factor sizes."""
        total = self.embedding_raw.size
        for layer in self.lora.values():
            for pair in layer.values():
                total += pair["a"].size + pair["b"].size
        return total

    def lora_pairs(self, dtype=np.float32) -> dict[str, dict[str, LoraPair]]:
        out = {}
        for name, layer in self.lora.items():
            out[name] = {pk: LoraPair(a=Tensor(pv["a"].astype(dtype)),
                                      b=Tensor(pv["b"].astype(dtype)))
                         for pk, pv in layer.items()}
        return out

    def validate(self) -> None:
        """Check the stored invariants; raise naming the broken one."""
        d = self.embedding_raw.shape[0]
        if self.embedding_final.shape != (d,):
            raise ModuleValidationError(
                "embedding shape invariant: raw and final embeddings differ in shape"
            )
        expected_norm = self.metadata.get("class_noun_norm")
        if expected_norm is not None:
            got = float(np.linalg.norm(self.embedding_final.astype(np.float64)))
            if abs(got - expected_norm) > 1e-6:
                raise ModuleValidationError(
                    f"ACN norm invariant: |final embedding| = {got:.8f} but the "
                    f"class noun {self.class_noun!r} has norm {expected_norm:.8f}"
                )
        raw_n = np.linalg.norm(self.embedding_raw.astype(np.float64))
        fin_n = np.linalg.norm(self.embedding_final.astype(np.float64))
        if raw_n > 0 and fin_n > 0:
            cos = float(self.embedding_raw.astype(np.float64)
                        @ self.embedding_final.astype(np.float64) / (raw_n * fin_n))
            if abs(cos - 1.0) > 1e-6:
                raise ModuleValidationError(
                    "ACN direction invariant: final embedding is not parallel to raw"
                )
        for name, layer in self.lora.items():
            for pk, pv in layer.items():
                a, b = pv["a"], pv["b"]
                if a.ndim != 2 or b.ndim != 2 or a.shape[0] != self.rank \
                        or b.shape[1] != self.rank:
                    raise ModuleValidationError(
                        f"LoRA shape invariant: {name}/{pk} has a {a.shape}, "
                        f"b {b.shape}, rank {self.rank}"
                    )
                if self.rank > min(a.shape[1], b.shape[0]):
                    raise ModuleValidationError(
                        f"LoRA rank invariant: rank {self.rank} exceeds "
                        f"min{(a.shape[1], b.shape[0])} at {name}/{pk}"
                    )


def build_module(placeholder: str, class_noun: str, vocab: Vocabulary,
                 qf: QFormerLite, visuals: list[VisualEmbedding],
                 lora_factors: dict[str, dict[str, LoraPair]],
                 expected_layers: list[str], rank: int,
                 metadata: dict | None = None) -> ConceptModule:
    """Snapshot the trained state into a frozen, validated module.

    The per-concept embedding is the mean of the extracted embedding
    over the concept's training images; base weights are excluded.
    """
    missing = [name for name in expected_layers if name not in lora_factors]
    if missing:
        raise ValueError(f"missing LoRA factors for adapted layers: {missing}")
    vs = [extract_embedding(qf, vi, class_noun, vocab).data for vi in visuals]
    raw = np.mean(np.stack(vs), axis=0).astype(np.float32)
    final = acn(Tensor(raw), class_noun, vocab).data.astype(np.float32)
    lora = {
        name: {pk: {"a": pair.a.data.astype(np.float32),
                    "b": pair.b.data.astype(np.float32)}
               for pk, pair in layer.items()}
        for name, layer in lora_factors.items()
    }
    meta = dict(metadata or {})
    meta["class_noun_norm"] = vocab.norm(class_noun)
    module = ConceptModule(
        placeholder=placeholder,
        class_noun=class_noun,
        embedding_raw=raw,
        embedding_final=final,
        lora=lora,
        rank=int(rank),
        metadata=meta,
    )
    module.validate()
    return module


def save_module(module: ConceptModule, path) -> None:
    meta = {
        "placeholder": module.placeholder,
        "class_noun": module.class_noun,
        "rank": module.rank,
        "layers": {name: sorted(layer) for name, layer in module.lora.items()},
        **{f"extra.{k}": v for k, v in module.metadata.items()},
    }
    tensors = {
        "embedding_raw": module.embedding_raw,
        "embedding_final": module.embedding_final,
    }
    for name, layer in module.lora.items():
        for pk, pv in layer.items():
            tensors[f"lora/{name}/{pk}/a"] = pv["a"]
            tensors[f"lora/{name}/{pk}/b"] = pv["b"]
    write_container(path, MODULE_MAGIC, MODULE_VERSION, meta, tensors)


def load_module(path) -> ConceptModule:
    """Load and validate; corrupt or invariant-breaking files never yield
    a partial module."""
    _, meta, tensors = read_container(path, MODULE_MAGIC, MODULE_VERSION)
    lora: dict[str, dict[str, dict[str, np.ndarray]]] = {}
    for name, parts in meta["layers"].items():
        lora[name] = {}
        for pk in parts:
            try:
                lora[name][pk] = {"a": tensors[f"lora/{name}/{pk}/a"],
                                  "b": tensors[f"lora/{name}/{pk}/b"]}
            except KeyError as exc:
                raise ModuleValidationError(
                    f"module file lists layer {name}/{pk} but lacks tensor {exc}"
                ) from exc
    module = ConceptModule(
        placeholder=meta["placeholder"],
        class_noun=meta["class_noun"],
        embedding_raw=tensors["embedding_raw"],
        embedding_final=tensors["embedding_final"],
        lora=lora,
        rank=int(meta["rank"]),
        metadata={k.removeprefix("extra."): v for k, v in meta.items()
                  if k.startswith("extra.")},
    )
    module.validate()
    return module
