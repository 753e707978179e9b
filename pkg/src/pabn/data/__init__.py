from .episodes import (
    BENCHMARK_SPLITS,
    DatasetError,
    DatasetIndex,
    Episode,
    EpisodePlan,
    EpisodeSpec,
    SplitConfig,
    check_supports,
    draw_episode,
    load_dataset,
    materialize,
    sample_episode,
    split_class_names,
    split_classes,
)
from .ppm import ImageFormatError, decode_and_resize, read_ppm, read_ppm_header, resize_bilinear, write_ppm
from .synthetic import SyntheticSpec, class_attributes, fine_grained_stats, generate_synthetic, manifest_digest

__all__ = [
    "BENCHMARK_SPLITS",
    "DatasetError",
    "DatasetIndex",
    "Episode",
    "EpisodePlan",
    "EpisodeSpec",
    "ImageFormatError",
    "SplitConfig",
    "SyntheticSpec",
    "check_supports",
    "class_attributes",
    "decode_and_resize",
    "draw_episode",
    "fine_grained_stats",
    "generate_synthetic",
    "load_dataset",
    "manifest_digest",
    "materialize",
    "read_ppm",
    "read_ppm_header",
    "resize_bilinear",
    "sample_episode",
    "split_class_names",
    "split_classes",
    "write_ppm",
]
