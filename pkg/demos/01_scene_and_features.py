"""Build a synthetic scene, derive NDVI, and look at patch vectors."""
import numpy as np

from sslseg.features import add_ndvi, build_dataset, normalize_channels
from sslseg.synth import SyntheticSceneSpec, synth_generate

stack, mask = synth_generate(SyntheticSceneSpec(width=96, height=96, seed=1))
print(stack.band_names, stack.data.shape)
print("pixels per class:", np.bincount(mask.labels.ravel())[1:])

stack = add_ndvi(stack)  # nir, red, green, ndsm, ndvi
ndvi = stack.band("ndvi")
for k, name in ((1, "building"), (2, "vegetation"), (3, "ground")):
    sel = mask.labels == k
    print(f"{name:<11} ndvi {ndvi[sel].mean():+.3f}  ndsm {stack.band('ndsm')[sel].mean():.3f}")

normed, stats = normalize_channels(stack)
print("band means before scaling:", np.round(stats.mean, 3))

# 15x15 window over 5 bands, mirrored at the borders: 1125 features per pixel
ds = build_dataset(normed, mask, seed=1)
print("features:", ds.n_features)
print("labeled / unlabeled / test:", len(ds.labeled_idx), len(ds.unlabeled_idx), len(ds.test_idx))
