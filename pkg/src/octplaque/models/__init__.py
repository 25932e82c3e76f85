from .backbones import (
    BackboneConfig,
    Family,
    SinglePathClassifier,
    build_single_path,
    count_parameters,
    replace_head,
    stage_widths,
)
from .pretrain import proxy_arrays, proxy_pretrain
from .fusion import FusionConfig, TwoPathClassifier, build_two_path, init_fusion_compression
from .weights import (
    FreezeSpec,
    WeightLoadError,
    WeightStore,
    apply_freeze,
    frozen_parameter_names,
    load_weights,
)

__all__ = [
    "BackboneConfig",
    "Family",
    "FreezeSpec",
    "FusionConfig",
    "SinglePathClassifier",
    "TwoPathClassifier",
    "WeightLoadError",
    "WeightStore",
    "apply_freeze",
    "build_single_path",
    "build_two_path",
    "count_parameters",
    "frozen_parameter_names",
    "init_fusion_compression",
    "load_weights",
    "proxy_arrays",
    "proxy_pretrain",
    "replace_head",
    "stage_widths",
]
