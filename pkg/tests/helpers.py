import numpy as np

from qrlab.datagen import SceneParams, dataset
from qrlab.decoder import FeatureMap, ModelConfig, init_params
from qrlab.matching import TargetBatch


def tiny(images=3, dim=8, queries=5, stages=6, grid=6, seed=0, **kw):
    sp = SceneParams(grid=grid)
    cfg = ModelConfig(num_stages=stages, num_queries=queries, dim=dim, in_channels=sp.channels, **kw)
    samples = list(dataset("train", images, seed, sp))
    x = FeatureMap.from_grids(np.stack([s.features for s in samples]), sp.num_classes)
    return cfg, init_params(cfg, seed), x, TargetBatch.from_list([s.gt for s in samples])
