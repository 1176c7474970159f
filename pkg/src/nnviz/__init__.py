"""nnviz: train small CNNs and render what they look at.

Subpackages: tensor (tape autodiff), model (architectures, training,
checkpoints), datasets (synthetic shapes, IDX, MIL bags), saliency
(CAM, Grad-CAM, guided backprop, occlusion, grids), impressions
(gradient-ascent class synthesis), mil (attention pooling), render
(heatmap post-processing and image IO), service (HTTP API), cli.
"""

__version__ = "0.1.0"
