# %% [markdown]
# # The inference engine
# Layers are plain numpy functions. Storage is float32; every kernel works in
# float64 internally and rounds once on the way out.

# %%
import numpy as np

from unit_atlas import engine
from unit_atlas.engine import AblationMask, forward, forward_batch
from unit_atlas.train import build_model

rng = np.random.default_rng(0)
x = rng.normal(size=(2, 6, 6)).astype(np.float32)

# %%
# a 1x1 kernel of value 2 doubles every pixel
engine.conv2d(np.ones((1, 3, 3)), np.full((1, 1, 1, 1), 2.0), np.zeros(1))

# %%
# 3x3 kernels, stride 2, one pixel of zero padding
k = rng.normal(size=(4, 2, 3, 3))
y = engine.conv2d(x, k, np.zeros(4), stride=2, padding=1)
y.shape, y.dtype

# %%
engine.maxpool2d(np.arange(16.0).reshape(1, 4, 4), window=2)

# %%
engine.softmax(np.array([1000.0, 1000.0, 0.0]))   # no overflow, ties split evenly

# %% [markdown]
# ## A whole network
# `build_model` wires the default architecture and initialises it from a seed.
# The graph knows every layer's output shape and where each unit can be
# switched off.

# %%
model = build_model("default", (3, 16, 16), n_classes=4, seed=0)
for lid, shape in model.shapes.items():
    print(f"{lid:8s} {shape}")
model.capture_points

# %%
image = rng.uniform(size=(3, 16, 16)).astype(np.float32)
logits, taps = forward(model, image, taps={"relu2"})
logits, taps["relu2"].shape

# %% [markdown]
# ## Ablation
# A mask names units by (layer, index). Masked units output zero right after
# their nonlinearity, so everything upstream is untouched.

# %%
mask = AblationMask([("conv2", 3), ("conv2", 7), ("fc1", 0)])
ablated, taps = forward(model, image, mask, taps={"relu2", "relu1"})
taps["relu2"][[3, 7]].max(), np.abs(ablated - logits).max()

# %%
# batches are cut into fixed chunks, so the worker count never changes a bit
batch = rng.uniform(size=(100, 3, 16, 16)).astype(np.float32)
a, _ = forward_batch(model, batch, mask, workers=1)
b, _ = forward_batch(model, batch, mask, workers=4)
a.tobytes() == b.tobytes()
