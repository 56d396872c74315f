"""Rebuild the shipped frozen base checkpoint from scratch.

The checkpoint is fully determined by the constants below, so this
reproduces checkpoints/base_v1.mbnt byte for byte on the same platform
and numpy version. Takes ~15 minutes on a laptop CPU.

Run: python3 scripts/make_base_checkpoint.py [out_path]
"""

import sys
import time
from pathlib import Path

import numpy as np

from multibooth import DenoiserConfig, Vocabulary, generate_dataset
from multibooth.denoiser import file_digest, save_checkpoint
from multibooth.encoders import LatentCoder
from multibooth.training import pretrain_base

PRETRAIN_DATA_SEED = 100
PRETRAIN_SEED = 0
PRETRAIN_STEPS = 6000
PRETRAIN_LR = 1e-3
PRETRAIN_BATCH = 8
VOCAB_SEED = 0

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("checkpoints/base_v1.mbnt")

vocab = Vocabulary(seed=VOCAB_SEED)
concepts = generate_dataset(seed=PRETRAIN_DATA_SEED, num_concepts=16,
                            images_per_concept=5)
start = time.perf_counter()
net, log = pretrain_base(concepts, DenoiserConfig(), steps=PRETRAIN_STEPS,
                         lr=PRETRAIN_LR, seed=PRETRAIN_SEED, vocab=vocab,
                         latent_coder=LatentCoder(), batch_size=PRETRAIN_BATCH)
print(f"pretrained {PRETRAIN_STEPS} steps (batch {PRETRAIN_BATCH}) "
      f"in {time.perf_counter() - start:.0f}s; "
      f"final-500 mean loss {np.mean([r['loss'] for r in log[-500:]]):.1f}")

net.freeze()
out.parent.mkdir(parents=True, exist_ok=True)
save_checkpoint(net, out, extra_meta={
    "vocab_seed": VOCAB_SEED,
    "pretrain_steps": PRETRAIN_STEPS,
    "pretrain_lr": PRETRAIN_LR,
    "pretrain_batch": PRETRAIN_BATCH,
    "pretrain_data_seed": PRETRAIN_DATA_SEED,
})
print(f"wrote {out}")
print(f"sha256 {file_digest(out)}")
