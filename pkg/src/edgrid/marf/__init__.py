"""The pattern-recognition workload: audio in, ranked subjects out."""

from .audio import (  # noqa: F401
    AllSilence,
    FrameTooShort,
    Sample,
    SampleFormat,
    SineSpec,
    UnsupportedFormat,
    hamming_window,
    load_sample,
    normalize,
    remove_noise,
    remove_silence,
)
from .classify import (  # noqa: F401
    Cluster,
    DimensionMismatch,
    EmptyTrainingSet,
    ResultSet,
    TrainingSet,
    classify,
    interpret_as_binary,
    train,
)
from .features import SampleTooShort, lpc_features  # noqa: F401
from .kernels import active_backend, warm_up  # noqa: F401
from .plan import BadParams, build_marf_geer, default_procedure_pool, run_pipeline_local  # noqa: F401
