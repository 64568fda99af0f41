# %% [markdown]
# # Selectivity and magnitude
# For one target class every unit gets two numbers: how much more it fires
# for the target than for the other classes (selectivity), and how strongly
# it fires overall (magnitude). Each layer is then cut into a 4x4 grid with
# the same number of units in every cell.

# %%
import numpy as np

from unit_atlas.atlas import build_atlas, capture_activations
from unit_atlas.synth import generate_dataset
from unit_atlas.train import TrainConfig, train_model

train = generate_dataset(4, 40, (3, 16, 16), 1.0, seed=0)
model, _ = train_model("default", train, TrainConfig(epochs=8, seed=0))
ds = generate_dataset(4, 40, (3, 16, 16), 1.0, seed=1000)

# %%
# one scalar per (image, unit); conv maps are averaged over space
acts = capture_activations(model, ds)
acts.values.shape, acts.layers()

# %%
atlas = build_atlas(acts, target=2)
atlas.layers, atlas.skipped

# %%
# cell sizes: 32 conv2 units over 16 cells gives exactly 2 each
{k: len(v) for k, v in atlas.cells.items() if k[0] == "conv2"}

# %%
# strip 3 holds the most target-selective units, band 3 the strongest
stats = {s.unit: s for s in atlas.stats}
for strip in (0, 3):
    units = [u for u, (s, b) in atlas.assignment.items() if u.layer == "fc1" and s == strip]
    sel = [stats[u].selectivity for u in units]
    print(f"fc1 strip {strip}: selectivity {min(sel):+.3f} .. {max(sel):+.3f}")

# %% [markdown]
# The second axis can also be the plain mean over all images
# (`magnitude_mode="global_mean"`); with many classes that is almost the same
# as the off-target mean, which is why the rotated version is the default.

# %%
alt = build_atlas(acts, 2, magnitude_mode="global_mean")
same = sum(atlas.assignment[u] == alt.assignment[u] for u in atlas.assignment)
same, len(atlas.assignment)
