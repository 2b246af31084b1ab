"""Conformal prediction hardened against rotation-group shifts.

The package pairs split/Mondrian/weighted conformal calibration with a pose
canonicalizer so that coverage survives geometric shifts of the data:

- :mod:`geocp.groups` -- cyclic rotation groups and their image action
- :mod:`geocp.data` -- synthetic glyph corpus, shift families, dataset files
- :mod:`geocp.circular` -- von Mises densities and grid mixture sampling
- :mod:`geocp.models` -- small classifiers and the orbit-softmax canonicalizer
- :mod:`geocp.conformal` -- scores, quantiles, prediction sets, metrics
- :mod:`geocp.diagnostics` -- group maps, distances, geometric weights
- :mod:`geocp.experiments` -- reproducible study runners behind the CLI
"""

__version__ = "0.1.0"

from .circular import bessel_i0, sample_von_mises_mixture, von_mises_pdf
from .conformal import (
    CalibrationResult,
    Metrics,
    Partitioner,
    ScoreFunction,
    WeightVector,
    calibrate,
    conformal_quantile,
    evaluate,
    kernel_weights,
    mondrian_calibrate,
    predict_set,
    set_matrix,
    weighted_quantile,
)
from .data import (
    Dataset,
    LabeledSample,
    ShiftSpec,
    apply_shift,
    generate_glyphs,
    load_dataset,
    save_dataset,
)
from .diagnostics import (
    GroupMap,
    WeightConfig,
    build_group_map,
    distribution_distance,
    emit_group_map_plot,
    geometric_weights,
    true_group_map,
)
from .errors import ConfigError, FormatError, GeocpError, TrainingError
from .groups import C4, C8, C360, CyclicGroup, GridImage, GroupElement, act, compose, inverse
from .models import (
    Canonicalizer,
    Classifier,
    GroupDistribution,
    LogitTable,
    TrainConfig,
    canonicalize,
    canonicalize_batch,
    export_logits,
    group_posterior,
    ingest_logits,
    train_canonicalizer,
    train_classifier,
)
