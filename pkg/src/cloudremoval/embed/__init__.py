"""Feature embedding and grid-uniform sampling for de-biasing a tile corpus."""

from .features import (
    AlexNetExtractor,
    FeatureVector,
    HistogramExtractor,
    extract_features,
    make_extractor,
    read_feature_cache,
    write_feature_cache,
)
from .sampling import (
    EmbeddingPoint,
    GridHistogram,
    grid_histogram,
    read_selection,
    render_heatmap,
    uniform_sample,
    write_selection,
)
from .tsne import (
    PerplexityError,
    TsneConfig,
    TsneResult,
    kl_divergence,
    kl_gradient,
    pairwise_affinities,
    tsne_embed,
)

__all__ = [
    "AlexNetExtractor", "EmbeddingPoint", "FeatureVector", "GridHistogram",
    "HistogramExtractor", "PerplexityError", "TsneConfig", "TsneResult",
    "extract_features", "grid_histogram", "kl_divergence", "kl_gradient",
    "make_extractor", "pairwise_affinities", "read_feature_cache", "read_selection",
    "render_heatmap", "tsne_embed", "uniform_sample", "write_feature_cache",
    "write_selection",
]
