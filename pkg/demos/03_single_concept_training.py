"""Single-concept learning: QFormer embedding, normalization, LoRA.

Trains one concept against the shipped base checkpoint (shortened run
for demo purposes; use the CLI with default steps for real modules) and
prints the word-norm table that shows why the normalization step
matters.

Run: python3 demos/03_single_concept_training.py
"""

import time
from pathlib import Path

import numpy as np

from multibooth import (ImageEncoder, LatentCoder, TrainConfig, Vocabulary,
                        generate_dataset, load_checkpoint, make_schedule,
                        save_module, train_concept)
from multibooth.training import reconstruction_eval

BASE = Path("checkpoints/base_v1.mbnt")
if not BASE.exists():
    raise SystemExit(f"missing {BASE}; build it with scripts/make_base_checkpoint.py "
                     "or fetch the repo checkpoint")

net, meta = load_checkpoint(BASE)
vocab = Vocabulary(seed=int(meta["vocab_seed"]))
enc, lc = ImageEncoder(), LatentCoder()

concept = generate_dataset(seed=7, num_concepts=1, images_per_concept=4)[0]
print(f"training {concept.concept_id}: shape={concept.params.shape}, "
      f"noun={concept.class_noun}")

cfg = TrainConfig(steps=250, seed=1)  # default is 900; shortened for the demo
t0 = time.perf_counter()
module, log = train_concept(concept, cfg, net, vocab, enc, lc, placeholder="S*")
print(f"trained in {time.perf_counter() - t0:.1f}s; "
      f"loss first {log[0]['total']:.1f} -> last-20 mean "
      f"{np.mean([r['total'] for r in log[-20:]]):.1f}")

# The pre-normalization embedding norm drifts upward during training (the
# penalty term keeps it bounded); the final embedding is rescaled onto the
# class noun's norm so it looks like an ordinary word to the text encoder.
raw = float(np.linalg.norm(module.embedding_raw.astype(np.float64)))
fin = float(np.linalg.norm(module.embedding_final.astype(np.float64)))
print(f"\n|v| pre-normalization  = {raw:.3f}")
print(f"|v| after normalization = {fin:.3f} (class noun "
      f"{module.class_noun!r} has {vocab.norm(module.class_noun):.3f})")

words = f"a S* {module.class_noun} on the beach".split()
norms = [fin if w == "S*" else vocab.norm(w) for w in words]
print("\nword-norm table for a composed prompt:")
print("  " + "  ".join(f"{w:>7}" for w in words))
print("  " + "  ".join(f"{n:7.2f}" for n in norms))

out = Path("demo_out/dog.mbcm")
out.parent.mkdir(parents=True, exist_ok=True)
save_module(module, out)
print(f"\nmodule saved to {out} "
      f"({module.param_count()} stored parameters, "
      f"{out.stat().st_size / 1024:.0f} KiB vs base {BASE.stat().st_size / 1024:.0f} KiB)")

sched = make_schedule(net.config.timesteps)
own = reconstruction_eval(module, concept, net, vocab, enc, lc, sched)
base = reconstruction_eval(None, concept, net, vocab, enc, lc, sched)
print(f"reconstruction on fixed pairs: module {own:.1f} vs frozen base {base:.1f}")
