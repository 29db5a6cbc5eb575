# SPDX-License-Identifier: Apache-2.0
"""Python interface to the moelab native core.

Structured results come back as plain dicts and lists.
"""
import json
import os

from . import _core
from ._core import (  # noqa: F401
    AnalysisScopeError,
    ConfigError,
    DegenerateParameterError,
    DegenerateTestError,
    DimensionError,
    DivergenceError,
    InputError,
    IoError,
    MoelabError,
    SampleSizeError,
    StatisticsError,
    UndefinedCorrelationError,
    UndefinedMetricError,
    activation_mso,
    correlation_p_value,
    fisher_ci,
    orthogonality_loss,
    paired_t_test,
    pearson,
    regularized_incomplete_beta,
    student_t_cdf,
    weight_mso,
)

__version__ = _core.__version__


def default_model_config():
    return json.loads(_core.default_model_config_json())


def full_scale_model_config():
    return json.loads(_core.full_scale_model_config_json())


def default_train_config():
    return json.loads(_core.default_train_config_json())


def parameter_count(config=None):
    return _core.parameter_count(json.dumps(config if config is not None else default_model_config()))


def gap_oracle(d_model=32, d_ffn=32, trials=10000, seed=0):
    return json.loads(_core.gap_oracle_json(d_model, d_ffn, trials, seed))


def corpus_info(path, val_split=0.1):
    return json.loads(_core.corpus_info_json(os.fspath(path), val_split))


def train(corpus, model=None, train=None, val_split=0.1, output_dir=None):
    """Run one training job; `model` and `train` override the default configs key by key."""
    mc = default_model_config()
    mc.update(model or {})
    tc = default_train_config()
    tc.update(train or {})
    out = os.fspath(output_dir) if output_dir is not None else None
    return json.loads(_core.train_json(json.dumps(mc), json.dumps(tc), os.fspath(corpus), val_split, out))


def analyze_sweep(sweep_dir, partial=False, output_dir=None):
    out = os.fspath(output_dir) if output_dir is not None else None
    return json.loads(_core.analyze_sweep_json(os.fspath(sweep_dir), partial, out))
