"""Tiny latent noise-prediction network with LoRA-ready cross-attention.

The net runs on spatial tokens at two resolutions: a 3x3 conv stem,
transformer blocks of {self-attention, cross-attention to the prompt,
MLP}, an average-pool / nearest-upsample pair between resolutions, and
a 3x3 output conv predicting the noise. Cross-attention key/value
projections optionally carry a per-concept low-rank delta; the base
weights stay frozen during concept training.

Concurrency: a frozen net is safe for unrestricted concurrent reads.
LoRA factors are passed by value into each forward call and never
installed as shared state.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import counters
from .container import read_container, write_container
from .rng import Rng
from .tensor import (DimensionError, Tensor, add, assign_slice, concat,
                     layer_norm, matmul, mul, reshape, scale, silu, slice_,
                     tile_rows, transpose, zeros)

CHECKPOINT_MAGIC = b"MBNT"
CHECKPOINT_VERSION = 1


# -- noise schedule -----------------------------------------------------------


@dataclass
class NoiseSchedule:
    """Variance-preserving forward-process coefficients."""

    timesteps: int
    alphas: np.ndarray  # signal coefficient per step, strictly decreasing
    sigmas: np.ndarray  # noise coefficient per step, strictly increasing


def make_schedule(timesteps: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 2e-2) -> NoiseSchedule:
    if timesteps < 2:
        raise ValueError(f"schedule needs at least 2 timesteps, got {timesteps}")
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(
        timesteps=timesteps,
        alphas=np.sqrt(alpha_bar),
        sigmas=np.sqrt(1.0 - alpha_bar),
    )


def add_noise(z: Tensor, eps: Tensor, t: int, sched: NoiseSchedule) -> Tensor:
    """Forward process: alpha_t * z + sigma_t * eps."""
    if z.shape != eps.shape:
        raise DimensionError(f"add_noise: z {z.shape} vs eps {eps.shape}")
    if not 0 <= t < sched.timesteps:
        raise ValueError(f"timestep {t} outside [0, {sched.timesteps})")
    return add(scale(z, float(sched.alphas[t])), scale(eps, float(sched.sigmas[t])))


# -- LoRA ---------------------------------------------------------------------


@dataclass
class LoraPair:
    """Low-rank delta for one projection: rows of `a` span the rank.

    Shapes follow the factor convention a: (r, in_dim), b: (out_dim, r),
    with r <= min(in_dim, out_dim) enforced at construction.
    """

    a: Tensor
    b: Tensor

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise DimensionError("LoRA factors must be matrices")
        r = self.a.shape[0]
        if self.b.shape[1] != r:
            raise DimensionError(
                f"LoRA factor ranks disagree: a {self.a.shape}, b {self.b.shape}"
            )
        in_dim, out_dim = self.a.shape[1], self.b.shape[0]
        if r > min(in_dim, out_dim):
            raise DimensionError(
                f"LoRA rank {r} exceeds min(in={in_dim}, out={out_dim})"
            )

    @property
    def rank(self) -> int:
        return self.a.shape[0]


def lora_project(x: Tensor, w: Tensor, pair: LoraPair | None = None) -> Tensor:
    """x @ w plus the low-rank delta x @ a^T @ b^T when a pair is given.

    The base weight `w` is (in_dim, out_dim) and stays frozen; gradients
    reach only the factors.
    """
    base = matmul(x, w)
    if pair is None:
        return base
    if pair.a.shape[1] != w.shape[0] or pair.b.shape[0] != w.shape[1]:
        raise DimensionError(
            f"LoRA factors a {pair.a.shape} / b {pair.b.shape} do not fit "
            f"projection {w.shape}"
        )
    delta = matmul(matmul(x, transpose(pair.a)), transpose(pair.b))
    return add(base, delta)


# -- attention ----------------------------------------------------------------


def attention(q: Tensor, k: Tensor, v: Tensor, d_prime: int,
              kind: str = "cross") -> Tensor:
    """softmax(q k^T / sqrt(d_prime)) v, with FLOP accounting."""
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"attention: K rows {k.shape} != V rows {v.shape}")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"attention: Q cols {q.shape} != K cols {k.shape}")
    counters.count_attention(kind, q.shape[0], k.shape[0], q.shape[1], v.shape[1])
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d_prime))
    return matmul(scores.softmax(axis=-1), v)


class AttentionLayer:
    """Multi-head attention with frozen base projections.

    Used for both self-attention (ctx == tokens) and cross-attention to
    the prompt; only the latter ever receives LoRA pairs.
    """

    def __init__(self, name: str, d_model: int, ctx_dim: int, qk_dim: int,
                 v_dim: int, heads: int, kind: str, rng: Rng, dtype=np.float32):
        if qk_dim % heads or v_dim % heads:
            raise DimensionError("head count must divide qk_dim and v_dim")
        self.name = name
        self.heads = heads
        self.qk_dim = qk_dim
        self.v_dim = v_dim
        self.kind = kind
        self.ctx_dim = ctx_dim

        def init(key, rows, cols):
            w = rng.child(key).normal((rows, cols), np.float64) / np.sqrt(rows)
            return Tensor(w.astype(dtype), requires_grad=True)

        self.w_q = init("w_q", d_model, qk_dim)
        self.w_k = init("w_k", ctx_dim, qk_dim)
        self.w_v = init("w_v", ctx_dim, v_dim)
        self.w_out = init("w_out", v_dim, d_model)

    def named_params(self) -> dict[str, Tensor]:
        return {f"{self.name}.w_q": self.w_q, f"{self.name}.w_k": self.w_k,
                f"{self.name}.w_v": self.w_v, f"{self.name}.w_out": self.w_out}

    def attention_map(self, tokens: Tensor, ctx: Tensor,
                      lora: dict[str, LoraPair] | None = None) -> Tensor:
        """Per-head attention, concatenated but not yet output-projected."""
        if ctx.shape[1] != self.ctx_dim:
            raise DimensionError(
                f"{self.name}: context dim {ctx.shape[1]} != expected {self.ctx_dim}"
            )
        q = matmul(tokens, self.w_q)
        k = lora_project(ctx, self.w_k, lora.get("k") if lora else None)
        v = lora_project(ctx, self.w_v, lora.get("v") if lora else None)
        dq, dv = self.qk_dim // self.heads, self.v_dim // self.heads
        outs = []
        for h in range(self.heads):
            qh = slice_(q, (slice(None), slice(h * dq, (h + 1) * dq)))
            kh = slice_(k, (slice(None), slice(h * dq, (h + 1) * dq)))
            vh = slice_(v, (slice(None), slice(h * dv, (h + 1) * dv)))
            outs.append(attention(qh, kh, vh, dq, self.kind))
        return concat(outs, axis=1) if len(outs) > 1 else outs[0]

    def forward(self, tokens: Tensor, ctx: Tensor,
                lora: dict[str, LoraPair] | None = None) -> Tensor:
        return matmul(self.attention_map(tokens, ctx, lora), self.w_out)


# -- spatial helpers ----------------------------------------------------------


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 same-padding conv on (h, w, c_in) via nine shifted matmuls.

    Weight is stored stacked as (9 * c_in, c_out), offsets in row-major
    (dy, dx) order.
    """
    h, wd, c_in = x.shape
    c_out = w.shape[1]
    padded = assign_slice(zeros((h + 2, wd + 2, c_in), dtype=x.dtype),
                          (slice(1, h + 1), slice(1, wd + 1)), x)
    acc = None
    for i in range(9):
        dy, dx = divmod(i, 3)
        patch = slice_(padded, (slice(dy, dy + h), slice(dx, dx + wd)))
        flat = reshape(patch, (h * wd, c_in))
        w_i = slice_(w, (slice(i * c_in, (i + 1) * c_in),))
        term = matmul(flat, w_i)
        acc = term if acc is None else add(acc, term)
    acc = add(acc, tile_rows(b, h * wd))
    return reshape(acc, (h, wd, c_out))


def avg_pool2(grid: Tensor) -> Tensor:
    """2x2 average pooling on (h, w, c)."""
    parts = [slice_(grid, (slice(dy, None, 2), slice(dx, None, 2)))
             for dy in (0, 1) for dx in (0, 1)]
    return scale(add(add(parts[0], parts[1]), add(parts[2], parts[3])), 0.25)


def upsample2(grid: Tensor) -> Tensor:
    """2x nearest-neighbor upsampling on (h, w, c)."""
    h, w, c = grid.shape
    out = zeros((2 * h, 2 * w, c), dtype=grid.dtype)
    for dy in (0, 1):
        for dx in (0, 1):
            out = assign_slice(out, (slice(dy, None, 2), slice(dx, None, 2)), grid)
    return out


def sinusoidal_embedding(t: int, dim: int, dtype=np.float32) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(dtype)


# -- the denoiser net ---------------------------------------------------------


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    latent_size: int = 8
    d_model: int = 64
    heads: int = 4
    qk_dim: int = 32
    v_dim: int = 32
    mlp_hidden: int = 512
    time_dim: int = 32
    text_dim: int = 64
    timesteps: int = 1000
    # Token-grid edge length per block; non-increasing, at most one halving.
    block_resolutions: tuple[int, ...] = (8, 8, 4, 4)

    def __post_init__(self):
        self.block_resolutions = tuple(self.block_resolutions)
        sizes = {self.latent_size, self.latent_size // 2}
        for r in self.block_resolutions:
            if r not in sizes:
                raise ValueError(f"block resolution {r} not in {sorted(sizes)}")
        if list(self.block_resolutions) != sorted(self.block_resolutions, reverse=True):
            raise ValueError("block resolutions must be non-increasing")


class DenoiserNet:
    """Noise-prediction net; output shape always equals the input latent."""

    def __init__(self, config: DenoiserConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        rng = Rng(seed).child("denoiser-init")
        c = config
        self.params: dict[str, Tensor] = {}

        def param(name, arr):
            t = Tensor(arr.astype(self.dtype), requires_grad=True)
            self.params[name] = t
            return t

        def gauss(key, rows, cols, scale_in=None):
            w = rng.child(key).normal((rows, cols), np.float64)
            return w / np.sqrt(scale_in if scale_in is not None else rows)

        param("stem.w", gauss("stem.w", 9 * c.latent_channels, c.d_model))
        param("stem.b", np.zeros(c.d_model))
        # Zero-init output projection: the net starts as the zero map, which
        # keeps early training stable.
        param("out.w", np.zeros((9 * c.d_model, c.latent_channels)))
        param("out.b", np.zeros(c.latent_channels))
        param("time.w1", gauss("time.w1", c.time_dim, c.d_model))
        param("time.b1", np.zeros(c.d_model))
        param("time.w2", gauss("time.w2", c.d_model, c.d_model))
        param("time.b2", np.zeros(c.d_model))

        self.self_attn: list[AttentionLayer] = []
        self.cross_attn: list[AttentionLayer] = []
        for i in range(len(c.block_resolutions)):
            for suffix in ("ln1", "ln2", "ln3"):
                param(f"block{i}.{suffix}.g", np.ones(c.d_model))
                param(f"block{i}.{suffix}.b", np.zeros(c.d_model))
            # Timestep modulation head: per sub-layer scale/shift on the
            # normalized activations plus a gate on the residual branch.
            # Weights start at zero; biases start at (scale=1, shift=0,
            # gate=1) so the initial net is time-neutral.
            param(f"block{i}.ada.w", np.zeros((c.d_model, 9 * c.d_model)))
            ada_bias = np.zeros(9 * c.d_model)
            for j in range(3):
                ada_bias[(3 * j) * c.d_model:(3 * j + 1) * c.d_model] = 1.0  # scale
                ada_bias[(3 * j + 2) * c.d_model:(3 * j + 3) * c.d_model] = 1.0  # gate
            param(f"block{i}.ada.b", ada_bias)
            sa = AttentionLayer(f"block{i}.self", c.d_model, c.d_model, c.qk_dim,
                                c.v_dim, c.heads, "self",
                                rng.child(f"block{i}.self"), self.dtype)
            ca = AttentionLayer(f"block{i}.cross", c.d_model, c.text_dim, c.qk_dim,
                                c.v_dim, c.heads, "cross",
                                rng.child(f"block{i}.cross"), self.dtype)
            self.self_attn.append(sa)
            self.cross_attn.append(ca)
            self.params.update(sa.named_params())
            self.params.update(ca.named_params())
            param(f"block{i}.mlp.w1", gauss(f"block{i}.mlp.w1", c.d_model, c.mlp_hidden))
            param(f"block{i}.mlp.b1", np.zeros(c.mlp_hidden))
            param(f"block{i}.mlp.w2", gauss(f"block{i}.mlp.w2", c.mlp_hidden, c.d_model))
            param(f"block{i}.mlp.b2", np.zeros(c.d_model))

    # -- parameter access ----------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def freeze(self) -> "DenoiserNet":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def weights_digest(self) -> str:
        """SHA-256 over all parameter bytes, in sorted name order."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def cross_layer_names(self) -> list[str]:
        return [layer.name for layer in self.cross_attn]

    def lora_dims(self) -> dict[str, dict[str, tuple[int, int]]]:
        """Per cross layer: projection (in_dim, out_dim) for the K and V maps."""
        c = self.config
        return {name: {"k": (c.text_dim, c.qk_dim), "v": (c.text_dim, c.v_dim)}
                for name in self.cross_layer_names()}

    # -- forward -------------------------------------------------------------

    def _time_vec(self, t: int) -> Tensor:
        emb = Tensor(sinusoidal_embedding(t, self.config.time_dim, self.dtype)
                     .reshape(1, self.config.time_dim))
        h = silu(add(matmul(emb, self.params["time.w1"]),
                     reshape(self.params["time.b1"], (1, -1))))
        return add(matmul(h, self.params["time.w2"]),
                   reshape(self.params["time.b2"], (1, -1)))

    def _mlp(self, i: int, x: Tensor) -> Tensor:
        n = x.shape[0]
        h = add(matmul(x, self.params[f"block{i}.mlp.w1"]),
                tile_rows(self.params[f"block{i}.mlp.b1"], n))
        return add(matmul(silu(h), self.params[f"block{i}.mlp.w2"]),
                   tile_rows(self.params[f"block{i}.mlp.b2"], n))

    def _modulation(self, i: int, tvec: Tensor, n: int):
        """Nine (n, d) time-modulation maps: (scale, shift, gate) x 3 sub-layers."""
        d = self.config.d_model
        ada = add(matmul(tvec, self.params[f"block{i}.ada.w"]),
                  reshape(self.params[f"block{i}.ada.b"], (1, -1)))
        return [tile_rows(slice_(ada, (slice(None), slice(j * d, (j + 1) * d))), n)
                for j in range(9)]

    def _block(self, i: int, tokens: Tensor, prompt_tokens, lora, cross_fn, res,
               tvec: Tensor):
        p = self.params
        n = tokens.shape[0]
        mods = self._modulation(i, tvec, n)

        def modulated(x, k, suffix):
            normed = layer_norm(x, p[f"block{i}.{suffix}.g"], p[f"block{i}.{suffix}.b"])
            return add(mul(normed, mods[3 * k]), mods[3 * k + 1])

        h1 = modulated(tokens, 0, "ln1")
        x = add(tokens, mul(mods[2], self.self_attn[i].forward(h1, h1)))
        h2 = modulated(x, 1, "ln2")
        layer = self.cross_attn[i]
        if cross_fn is not None:
            cross_out = cross_fn(layer.name, layer, h2, res)
        else:
            cross_out = layer.forward(h2, prompt_tokens,
                                      lora.get(layer.name) if lora else None)
        x = add(x, mul(mods[5], cross_out))
        h3 = modulated(x, 2, "ln3")
        return add(x, mul(mods[8], self._mlp(i, h3)))

    def forward(self, z: Tensor, t: int, prompt=None,
                lora: dict[str, dict[str, LoraPair]] | None = None,
                cross_fn=None) -> Tensor:
        c = self.config
        if z.shape != (c.latent_channels, c.latent_size, c.latent_size):
            raise DimensionError(
                f"latent shape {z.shape} != "
                f"({c.latent_channels}, {c.latent_size}, {c.latent_size})"
            )
        if not 0 <= int(t) < c.timesteps:
            raise ValueError(f"timestep {t} outside [0, {c.timesteps})")
        if (prompt is None) == (cross_fn is None):
            raise ValueError("provide exactly one of prompt or cross_fn")
        prompt_tokens = None
        if prompt is not None:
            prompt_tokens = prompt.tokens if hasattr(prompt, "tokens") else prompt
            if prompt_tokens.shape[1] != c.text_dim:
                raise DimensionError(
                    f"prompt dim {prompt_tokens.shape[1]} != text dim {c.text_dim}"
                )

        x = transpose(z, (1, 2, 0))
        x = conv3x3(x, self.params["stem.w"], self.params["stem.b"])
        res = c.latent_size
        tokens = reshape(x, (res * res, c.d_model))
        tvec = self._time_vec(int(t))
        tokens = add(tokens, tile_rows(tvec, res * res))

        for i, block_res in enumerate(c.block_resolutions):
            if block_res != res:
                grid = reshape(tokens, (res, res, c.d_model))
                grid = avg_pool2(grid)
                res //= 2
                tokens = reshape(grid, (res * res, c.d_model))
                tokens = add(tokens, tile_rows(tvec, res * res))
            tokens = self._block(i, tokens, prompt_tokens, lora, cross_fn, res, tvec)

        while res != c.latent_size:
            grid = reshape(tokens, (res, res, c.d_model))
            grid = upsample2(grid)
            res *= 2
            tokens = reshape(grid, (res * res, c.d_model))

        x = reshape(tokens, (c.latent_size, c.latent_size, c.d_model))
        out = conv3x3(x, self.params["out.w"], self.params["out.b"])
        return transpose(out, (2, 0, 1))


def predict_noise(net: DenoiserNet, z_t: Tensor, t: int, prompt,
                  lora: dict[str, dict[str, LoraPair]] | None = None) -> Tensor:
    """Run the denoiser on one latent; deterministic given inputs and weights."""
    return net.forward(z_t, t, prompt=prompt, lora=lora)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(net: DenoiserNet, path, extra_meta: dict | None = None) -> None:
    meta = {"config": asdict(net.config), "seed": net.seed}
    meta["config"]["block_resolutions"] = list(net.config.block_resolutions)
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta,
                    {k: v.data for k, v in net.params.items()})


def load_checkpoint(path, dtype=np.float32) -> tuple[DenoiserNet, dict]:
    """Load a frozen base net from disk."""
    _, meta, tensors = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    cfg_dict = dict(meta["config"])
    cfg_dict["block_resolutions"] = tuple(cfg_dict["block_resolutions"])
    net = DenoiserNet(DenoiserConfig(**cfg_dict), seed=meta["seed"], dtype=dtype)
    missing = set(net.params) - set(tensors)
    extra = set(tensors) - set(net.params)
    if missing or extra:
        raise ValueError(f"checkpoint tensors mismatch: missing {sorted(missing)}, "
                         f"unexpected {sorted(extra)}")
    for name, arr in tensors.items():
        if net.params[name].shape != arr.shape:
            raise ValueError(f"checkpoint tensor {name!r} has shape {arr.shape}, "
                             f"expected {net.params[name].shape}")
        net.params[name].data = arr.astype(dtype)
    net.freeze()
    return net, meta


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
