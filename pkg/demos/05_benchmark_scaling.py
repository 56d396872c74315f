"""Inference cost vs number of concepts.

Regions only add cross-attention work over their own cells; everything
else (self-attention, MLPs, convs) is independent of the concept count,
so wall time grows sub-linearly.

Run: python3 demos/05_benchmark_scaling.py
"""

from pathlib import Path

from multibooth import (ImageEncoder, LatentCoder, TrainConfig, Vocabulary,
                        bench, generate_dataset, load_checkpoint, train_concept)

BASE = Path("checkpoints/base_v1.mbnt")
if not BASE.exists():
    raise SystemExit(f"missing {BASE}")

net, meta = load_checkpoint(BASE)
vocab = Vocabulary(seed=int(meta["vocab_seed"]))
enc, lc = ImageEncoder(), LatentCoder()

# Four quick modules (steps kept tiny: timing does not depend on quality).
data = generate_dataset(seed=7, num_concepts=4, images_per_concept=2)
modules = []
for i, concept in enumerate(data):
    module, _ = train_concept(concept, TrainConfig(steps=5, seed=i), net, vocab,
                              enc, lc, placeholder=f"C{i}*")
    modules.append(module)

timing, flops = bench(modules, net, vocab, lc, concept_counts=(1, 2, 3, 4),
                      steps=8)
print(f"{'concepts':>8} {'seconds':>9} {'self-attn FLOPs':>16} "
      f"{'cross-attn FLOPs':>17} {'region cells':>13}")
for t_row, f_row in zip(timing, flops):
    print(f"{t_row['concepts']:>8} {t_row['seconds']:>9.3f} "
          f"{f_row['self_attention']:>16,} {f_row['cross_attention']:>17,} "
          f"{f_row['region_cells']:>13}")

t2 = next(r["seconds"] for r in timing if r["concepts"] == 2)
t4 = next(r["seconds"] for r in timing if r["concepts"] == 4)
print(f"\ntime(4 concepts) / time(2 concepts) = {t4 / t2:.2f} (sub-linear)")
