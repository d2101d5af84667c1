"""Python bindings for the kbprobe toolkit.

Dumps come back as lists of dicts whose state vectors are float32 numpy
arrays; write_dump accepts the same shape, so an extractor can emit dumps
without touching the binary layout.
"""

from ._core import (
    Error,
    Estimator,
    build_mc,
    c3_calibrate,
    compute_metrics,
    contains_answer,
    parse_candidates,
    pool_states,
    predict,
    read_dump,
    render_prompt,
    train,
    write_dump,
)

__all__ = [
    "Error",
    "Estimator",
    "build_mc",
    "c3_calibrate",
    "compute_metrics",
    "contains_answer",
    "parse_candidates",
    "pool_states",
    "predict",
    "read_dump",
    "render_prompt",
    "train",
    "write_dump",
]
