"""Cloud removal for RGB-NIR satellite tiles with a multispectral conditional GAN.

Subpackages: ``raster_io`` (I/O, tiling, normalization), ``cloudsim``
(synthetic clouds and training groups), ``embed`` (t-SNE de-biasing),
``mcgan`` (networks, training, inference), ``evalsuite`` (metrics, panels)
and ``cli``.
"""

__version__ = "0.1.0"
