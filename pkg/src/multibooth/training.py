"""Single-concept training and base-model pretraining.

One training step: sample an image, template, timestep, and noise; run
the QFormer to get the customized embedding; ACN it into the prompt;
predict the noise with the concept's LoRA active; minimize squared
reconstruction error plus a norm penalty on the pre-ACN embedding. Only
the QFormer and the LoRA factors ever receive updates — the base net,
vocabulary, and encoders are frozen throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .concept import (ConceptModule, QFormerConfig, QFormerLite, acn,
                      build_module, extract_embedding)
from .dataset import SyntheticConcept
from .denoiser import (DenoiserConfig, DenoiserNet, LoraPair, NoiseSchedule,
                       add_noise, make_schedule, predict_noise)
from .encoders import ImageEncoder, LatentCoder
from .optim import Adam
from .rng import Rng
from .tensor import Tensor, add, mul, scale, sub, tsum
from .vocab import TEMPLATES, Vocabulary


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""

    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step}: loss = {value}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 900
    lr: float = 8e-5
    lambda_reg: float = 0.01
    rank: int = 16
    seed: int = 0
    template_set: str = "clip-style-v1"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")


class TrainState:
    """Everything one concept's training run needs, bundled."""

    def __init__(self, concept: SyntheticConcept, cfg: TrainConfig,
                 base: DenoiserNet, vocab: Vocabulary,
                 image_encoder: ImageEncoder, latent_coder: LatentCoder,
                 sched: NoiseSchedule, placeholder: str = "S*",
                 qformer_config: QFormerConfig | None = None):
        if not 1 <= concept.num_images <= 5:
            raise ValueError("concept must have 1..5 images")
        if cfg.template_set != "clip-style-v1":
            raise ValueError(f"unknown template set {cfg.template_set!r}")
        self.concept = concept
        self.cfg = cfg
        self.base = base
        self.vocab = vocab
        self.image_encoder = image_encoder
        self.latent_coder = latent_coder
        self.sched = sched
        self.placeholder = placeholder
        self.rng = Rng(cfg.seed).child(f"train/{concept.concept_id}")

        self.qf = QFormerLite(qformer_config or QFormerConfig(dim=vocab.dim),
                              rng=self.rng.child("qformer"), dtype=base.dtype)
        self.lora: dict[str, dict[str, LoraPair]] = {}
        r = cfg.rank
        for name, dims in base.lora_dims().items():
            layer = {}
            for part, (in_dim, out_dim) in dims.items():
                # A ~ N(0, 1/r), B = 0: the delta starts exactly at zero.
                a = self.rng.child(f"lora/{name}/{part}").normal(
                    (r, in_dim), np.float64) / math.sqrt(r)
                layer[part] = LoraPair(
                    a=Tensor(a.astype(base.dtype), requires_grad=True),
                    b=Tensor(np.zeros((out_dim, r), dtype=base.dtype),
                             requires_grad=True),
                )
            self.lora[name] = layer
        self.optimizer = Adam(self.trainable_params(), lr=cfg.lr)
        # Visual features are frozen; compute once per image.
        self.visuals = [image_encoder.encode(img) for img in concept.images]

    def trainable_params(self):
        params = list(self.qf.parameters())
        for layer in self.lora.values():
            for pair in layer.values():
                params.extend([pair.a, pair.b])
        return params

    def trainable_param_count(self) -> int:
        return sum(p.size for p in self.trainable_params())


def concept_loss(state: TrainState, image_index: int, t: int, eps: np.ndarray,
                 template: str) -> dict:
    """The full training objective for one (image, t, eps, template) draw.

    Returns tensors so callers can backprop: reconstruction term, norm
    penalty on the pre-ACN embedding, and their sum.
    """
    if "{}" not in template:
        raise ValueError(f"template {template!r} has no subject slot")
    concept = state.concept
    v = extract_embedding(state.qf, state.visuals[image_index],
                          concept.class_noun, state.vocab)
    v_hat = acn(v, concept.class_noun, state.vocab)
    prompt_text = template.format(f"{state.placeholder} {concept.class_noun}")
    prompt = state.vocab.encode(prompt_text, {state.placeholder: v_hat})

    z = Tensor(state.latent_coder.encode(concept.images[image_index]))
    eps_t = Tensor(np.asarray(eps, dtype=state.base.dtype))
    z_t = add_noise(z, eps_t, t, state.sched)
    eps_hat = predict_noise(state.base, z_t, t, prompt, state.lora)

    diff = sub(eps_hat, eps_t)
    rec = tsum(mul(diff, diff))
    if state.cfg.lambda_reg > 0:
        reg = scale(tsum(mul(v, v)), state.cfg.lambda_reg)
        total = add(rec, reg)
    else:
        reg = None
        total = rec
    return {
        "total": total,
        "rec": rec,
        "reg": reg,
        "v_norm": float(np.linalg.norm(v.data.astype(np.float64))),
    }


def training_step(state: TrainState, step: int) -> dict:
    """Sample a batch of one, take one Adam step, return the log row."""
    rng = state.rng.child(f"step{step}")
    image_index = rng.integer(0, state.concept.num_images)
    template = rng.choice(TEMPLATES)
    t = rng.integer(0, state.sched.timesteps)
    eps = rng.normal((state.base.config.latent_channels,
                      state.base.config.latent_size,
                      state.base.config.latent_size), state.base.dtype)

    parts = concept_loss(state, image_index, t, eps, template)
    total = parts["total"]
    value = total.item()
    if not np.isfinite(value):
        raise TrainingDiverged(step, value)
    state.optimizer.zero_grad()
    total.backward()
    # Frozen components must stay frozen: the base net never sees a gradient.
    for p in state.base.parameters():
        assert p.grad is None
    state.optimizer.step()
    return {
        "step": step,
        "total": value,
        "rec": parts["rec"].item(),
        "reg": parts["reg"].item() if parts["reg"] is not None else 0.0,
        "v_norm": parts["v_norm"],
        "t": t,
        "image": image_index,
    }


def train_concept(concept: SyntheticConcept, cfg: TrainConfig, base: DenoiserNet,
                  vocab: Vocabulary, image_encoder: ImageEncoder,
                  latent_coder: LatentCoder, sched: NoiseSchedule | None = None,
                  placeholder: str = "S*",
                  qformer_config: QFormerConfig | None = None,
                  ) -> tuple[ConceptModule, list[dict]]:
    """Train one concept end to end and package the module.

    Deterministic given (concept, cfg.seed): two runs produce
    byte-identical modules. Training never touches another concept's
    state, so runs compose in any order.
    """
    sched = sched or make_schedule(base.config.timesteps)
    state = TrainState(concept, cfg, base, vocab, image_encoder, latent_coder,
                       sched, placeholder, qformer_config)
    log = [training_step(state, i) for i in range(cfg.steps)]
    module = build_module(
        placeholder=placeholder,
        class_noun=concept.class_noun,
        vocab=vocab,
        qf=state.qf,
        visuals=state.visuals,
        lora_factors=state.lora,
        expected_layers=base.cross_layer_names(),
        rank=cfg.rank,
        metadata={
            "concept_id": concept.concept_id,
            "seed": cfg.seed,
            "steps": cfg.steps,
            "lr": cfg.lr,
            "lambda": cfg.lambda_reg,
            "vocab_seed": vocab.seed,
            "template_set": cfg.template_set,
        },
    )
    return module, log


def reconstruction_eval(module: ConceptModule | None, concept: SyntheticConcept,
                        base: DenoiserNet, vocab: Vocabulary,
                        image_encoder: ImageEncoder, latent_coder: LatentCoder,
                        sched: NoiseSchedule, num_pairs: int = 32,
                        eval_seed: int = 20_000_101) -> float:
    """Average reconstruction loss over fixed (t, eps) pairs; lower is better.

    With a module, the prompt binds its placeholder to the final
    embedding and its LoRA is active; with module=None this scores the
    frozen base on the plain class-noun prompt. The pairs depend only on
    eval_seed, so scores are comparable across modules.
    """
    rng = Rng(eval_seed).child("recon-eval")
    shape = (base.config.latent_channels, base.config.latent_size,
             base.config.latent_size)
    if module is not None:
        prompt = vocab.encode(
            f"a photo of a {module.placeholder} {module.class_noun}",
            {module.placeholder: module.embedding_final})
        lora = module.lora_pairs(base.dtype)
    else:
        prompt = vocab.encode(f"a photo of a {concept.class_noun}")
        lora = None
    total = 0.0
    for j in range(num_pairs):
        t = rng.integer(0, sched.timesteps)
        eps = rng.normal(shape, base.dtype)
        image = concept.images[j % concept.num_images]
        z_t = add_noise(Tensor(latent_coder.encode(image)), Tensor(eps), t, sched)
        eps_hat = predict_noise(base, z_t, t, prompt, lora)
        total += float(((eps_hat.data - eps) ** 2).sum())
    return total / num_pairs


def pretrain_base(concepts: list[SyntheticConcept], config: DenoiserConfig,
                  steps: int, lr: float, seed: int, vocab: Vocabulary,
                  latent_coder: LatentCoder, sched: NoiseSchedule | None = None,
                  uncond_prob: float = 0.1, batch_size: int = 8,
                  augment_poses: bool = True) -> tuple[DenoiserNet, list[dict]]:
    """Train the base denoiser on the synthetic distribution.

    Captions name the palette, shape family, and class noun ("a photo of
    a red circle dog"), so the cross-attention pathway carries real
    appearance information; a fraction of draws use the all-pad prompt
    so guidance has an in-distribution unconditional branch. Gradients
    average over a small batch (the caption-dependent signal drowns in
    single-draw noise otherwise), and by default every draw renders a
    fresh pose of its concept: with a fixed small image set the net
    memorizes the images and stops consulting the prompt at all.
    """
    from .dataset import nearest_color_word, render_concept_image

    sched = sched or make_schedule(config.timesteps)
    net = DenoiserNet(config, seed=seed)
    opt = Adam(net.parameters(), lr=lr)
    rng = Rng(seed).child("pretrain")
    shape = (config.latent_channels, config.latent_size, config.latent_size)
    log = []
    for step in range(steps):
        batch_loss = None
        t_last = 0
        for item in range(batch_size):
            srng = rng.child(f"step{step}/{item}")
            concept = concepts[srng.integer(0, len(concepts))]
            if augment_poses:
                image = render_concept_image(concept.params, srng.child("pose"))
            else:
                image = concept.images[srng.integer(0, concept.num_images)]
            if srng.uniform(0.0, 1.0) < uncond_prob:
                prompt = vocab.pad_prompt()
            else:
                template = srng.choice(TEMPLATES)
                color = nearest_color_word(concept.params.primary)
                subject = f"{color} {concept.params.shape} {concept.class_noun}"
                prompt = vocab.encode(template.format(subject))
            t = t_last = srng.integer(0, sched.timesteps)
            eps = srng.normal(shape, net.dtype)
            z_t = add_noise(Tensor(latent_coder.encode(image)), Tensor(eps), t, sched)
            eps_hat = net.forward(z_t, t, prompt=prompt)
            diff = sub(eps_hat, Tensor(eps))
            item_loss = tsum(mul(diff, diff))
            batch_loss = item_loss if batch_loss is None else add(batch_loss, item_loss)
        loss = scale(batch_loss, 1.0 / batch_size)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(step, value)
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append({"step": step, "loss": value, "t": t_last})
    return net, log
