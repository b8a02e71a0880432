"""
Inside the channel graph, and loading image-MAE weights
=======================================================

Looks at the per-section adjacency the compensation module builds, checks
that relabelling channels only relabels the output, and ingests a
checkpoint laid out like a visual masked autoencoder.
"""

# %%
import sys
from pathlib import Path

import numpy as np
import torch

from vimts import BackboneConfig, ChannelGraph, ImtsSample, ModelConfig, SectionGrid, VIMTS
from vimts import load_pretrained_checkpoint, predict_batch

torch.manual_seed(0)

# %%
# Each (sample, section) gets its own adjacency. Rows are a softmax, so
# every channel distributes one unit of attention over the others.
graph = ChannelGraph(n_channels=4, dim=6, vertex_dim=3, hops=2)
H = torch.randn(2, 4, 6)  # two sections, four channels
with torch.no_grad():
    A = graph.adjacency(*graph.hybrid_embeddings(H))
print(np.round(A.numpy(), 3))
print("row sums", A.sum(-1))

# %%
# With ordered reductions the graph does not care how channels are
# numbered: permuting inputs and static embeddings permutes the output
# exactly.
graph.ordered = True
perm = torch.tensor([2, 0, 3, 1])
twin = ChannelGraph(4, 6, 3, 2, ordered=True)
twin.load_state_dict(graph.state_dict())
with torch.no_grad():
    for k in range(2):
        twin.static[k].copy_(graph.static[k][perm])
    print("bitwise equal:", torch.equal(graph(H)[:, perm], twin(H[:, perm])))

# %%
# Image-MAE ingestion. The test helpers can write a small file with the
# real key names; a downloaded ``mae_pretrain_vit_base_full.pth`` works the
# same way with ``BackboneConfig.mae_base()``.
sys.path.insert(0, str(Path.cwd() / "tests"))
import mae_files  # noqa: E402

state = mae_files.mae_state(d_enc=16, d_dec=8, enc_depth=2, dec_depth=1, img=32)
mae_files.write_torch_checkpoint("tiny_mae.pth", state)
bb = BackboneConfig(d_enc=16, d_dec=8, enc_depth=2, dec_depth=1, enc_heads=4, dec_heads=2, max_sections=16)
model = VIMTS(ModelConfig(n_channels=2, grid=SectionGrid(1 / 9, 6, 3), backbone=bb))
manifest = load_pretrained_checkpoint(model, "tiny_mae.pth")
print("coverage", manifest.coverage())
print("skipped image-only keys", manifest.excluded)

# %%
s = ImtsSample("demo", [0.1, 0.3, 0.5], [[1.0, 0.5], [0.2, 0.0], [0.0, -1.0]], [[1, 1], [1, 0], [0, 1]])
print(predict_batch(model, s, [(0, 0.7), (1, 0.95)]))
