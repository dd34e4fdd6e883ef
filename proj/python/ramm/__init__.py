from ._ramm import (
    ConfigError,
    FormatError,
    InvalidR,
    Index,
    SWEEP_R,
    contains_answer,
    gen_synthetic,
    harvest,
    itc_loss,
    load_index,
    load_tensor,
    make_index,
    retrieve,
    save_tensor,
    select_inference,
    select_training,
    valid_r,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "InvalidR",
    "Index",
    "SWEEP_R",
    "contains_answer",
    "gen_synthetic",
    "harvest",
    "itc_loss",
    "load_index",
    "load_tensor",
    "make_index",
    "retrieve",
    "save_tensor",
    "select_inference",
    "select_training",
    "valid_r",
]
