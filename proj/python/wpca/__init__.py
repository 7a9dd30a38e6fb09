"""Training-free transformer architecture scoring and search."""

from wpca._core import (
    Batch,
    CodecError,
    ConfigError,
    InputError,
    ParamBreakdown,
    ProxyScore,
    ShapeError,
    SpaceSpec,
    __version__,
    decode_json,
    feasible,
    format_genome,
    genome_params,
    kendall_tau,
    param_breakdown,
    parse_genome,
    pca_dim,
    proxies,
    random_batch,
    score,
    search,
    spearman_rho,
)

__all__ = [
    "Batch",
    "CodecError",
    "ConfigError",
    "InputError",
    "ParamBreakdown",
    "ProxyScore",
    "ShapeError",
    "SpaceSpec",
    "__version__",
    "decode_json",
    "feasible",
    "format_genome",
    "genome_params",
    "kendall_tau",
    "param_breakdown",
    "parse_genome",
    "pca_dim",
    "proxies",
    "random_batch",
    "score",
    "search",
    "spearman_rho",
]
