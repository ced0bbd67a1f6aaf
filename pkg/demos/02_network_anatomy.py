"""Anatomy of the segmentation network: encoder ladder, correlated
representations, attention gates and deep supervision.

Run:  python demos/02_network_anatomy.py
"""

import numpy as np

from corrseg import autograd as ag
from corrseg.autograd import Tensor, no_grad
from corrseg.blocks import CorrSegNet, NetworkConfig
from corrseg.fusion import channel_attention

cfg = NetworkConfig.desk_preset(seed=0)
net = CorrSegNet(cfg)
print(f"desk preset: levels={cfg.levels}, filters={cfg.filter_sequence}, "
      f"{net.parameter_count():,} parameters")

paper = NetworkConfig.paper_preset()
print(f"paper preset would use filters {paper.filter_sequence} "
      f"({CorrSegNet(paper).parameter_count():,} parameters)")

rng = np.random.default_rng(1)
inputs = [Tensor(rng.normal(size=(1, 1, 16, 16, 16)).astype(np.float32))
          for _ in range(4)]

with no_grad():
    # per-modality encoder pyramids
    feats = [enc(x) for enc, x in zip(net.encoders, inputs)]
    print("\nencoder feature shapes (modality 0):")
    for level, f in enumerate(feats[0]):
        print(f"  level {level}: {f.shape}")

    # the correlated representations at the bottleneck
    bottom = cfg.levels - 1
    reps = net.cms[bottom]([feats[m][bottom] for m in range(4)])
    print(f"\n{len(reps)} correlated representations at the bottleneck, "
          f"each {reps[0].shape}")

    # channel-attention gates are probabilities
    blk = net.fusions[bottom]
    stacked = ag.concat(reps, axis=1)
    gated = channel_attention(stacked, blk.channels, blk.w1, blk.w2)
    gates = gated.data / np.where(np.abs(stacked.data) < 1e-9, 1.0,
                                  stacked.data)
    finite = gates[np.abs(stacked.data) >= 1e-9]
    print(f"channel attention gates lie in "
          f"({finite.min():.3f}, {finite.max():.3f})")

    result = net.forward(inputs)

print(f"\nfinal probabilities: {result.probs.shape}, "
      f"channel sums ~ {result.probs.data.sum(axis=1).mean():.6f}")
print(f"deep supervision heads: "
      f"{[tuple(h.shape) for h in result.head_logits]}")
print(f"reconstructions: {[tuple(r.shape) for r in result.reconstructions]}")
