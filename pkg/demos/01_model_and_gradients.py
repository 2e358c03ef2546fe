"""
The victim model and what it shares
===================================

A tiny encoder classifier, one client batch, and the per-layer gradients the
client sends to the server.
"""

import numpy as np
import torch

from textleak import EncoderClassifier, ModelConfig, TokenBatch
from textleak.fedsim import client_step

# 2 layers, width 16, 64-token vocabulary; dropout is off for now
config = ModelConfig()
model = EncoderClassifier(config, seed=0)
print(f"{sum(p.numel() for p in model.parameters())} parameters")

# a batch is framed as [CLS] words [SEP] [PAD]...
batch = TokenBatch.from_rows([[12, 20, 31, 44], [9, 17]], labels=[1, 0], special=config.special)
print(batch.token_ids)

# the input embedding is token row plus position row, and it maps back exactly
E = model.embed(batch.token_ids)
assert np.array_equal(model.tokenize_embedding(E), batch.token_ids)

# one FedSGD client step: the shared update is a list of per-layer gradients
g, _ = client_step(batch, model)
for name, t in list(g.items())[:4]:
    print(f"{name:32s} {tuple(t.shape)}  norm {float(torch.linalg.vector_norm(t)):.4f}")
print(f"... {len(g.active_names)} layers, {g.numel()} numbers in total")

# the embedding-table gradient is nonzero only in the rows of tokens that occur,
# which is why freezing the embeddings is the practical setting
rows = torch.nonzero(g.restrict(["embeddings.token"]).active()[0].abs().sum(1)).reshape(-1)
print("tokens with nonzero embedding gradient:", rows.tolist())
