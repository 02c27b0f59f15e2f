"""The four-stage recognition pipeline, packaged as grid procedures.

Each stage is a pure function from a parameter list to a value, registered
under its procedure name in worker pools. The stage plan embeds everything
a stage needs (source spec, thresholds, training set), so re-running the
same plan reproduces the same demand signatures and hits the warehouse.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np

from ..model import Geer, StagePlan, Value
from . import audio
from .audio import Sample, SampleFormat, SineSpec
from .classify import ResultSet, TrainingSet, classify, train  # noqa: F401 (train re-exported)
from .features import DEFAULT_POLES, DEFAULT_WINDOW_LEN, lpc_features

STAGE_NAMES = ("sample_loading", "preprocessing", "feature_extraction", "classification")
CLASSIFICATION_STAGE = "classification"

PROGRAM_ID = "speaker-id"


class BadParams(ValueError):
    """Pipeline parameters that cannot form a valid plan."""


# -- value conversions -------------------------------------------------------


def source_to_value(source: Union[str, SineSpec, Sample]) -> Value:
    if isinstance(source, str):
        return Value.of_list([Value.of_text("wav"), Value.of_text(source)])
    if isinstance(source, SineSpec):
        return Value.of_list([
            Value.of_text("sine"), Value.of_float(source.freq), Value.of_int(source.rate),
            Value.of_int(source.n), Value.of_float(source.noise_amplitude),
            Value.of_int(source.seed)])
    if isinstance(source, Sample):
        return Value.of_list([Value.of_text("raw"), Value.of_vector(source.data),
                              Value.of_int(source.sample_rate)])
    raise BadParams("unsupported source: %r" % (source,))


def value_to_source(value: Value) -> Union[str, SineSpec, Sample]:
    items = value.payload
    tag = items[0].payload
    if tag == "wav":
        return items[1].payload
    if tag == "sine":
        return SineSpec(freq=items[1].payload, rate=items[2].payload, n=items[3].payload,
                        noise_amplitude=items[4].payload, seed=items[5].payload)
    if tag == "raw":
        return Sample(data=np.array(items[1].payload, dtype=np.float64),
                      sample_rate=items[2].payload, format=SampleFormat.RAW_F64)
    raise BadParams("unknown source tag: %r" % tag)


def sample_to_value(sample: Sample) -> Value:
    return Value.of_list([Value.of_vector(sample.data), Value.of_int(sample.sample_rate)])


def value_to_sample(value: Value) -> Sample:
    data, rate = value.payload
    return Sample(data=np.array(data.payload, dtype=np.float64),
                  sample_rate=rate.payload, format=SampleFormat.RAW_F64)


def training_set_to_value(ts: TrainingSet) -> Value:
    rows = []
    for subject_id in sorted(ts.clusters):
        cluster = ts.clusters[subject_id]
        rows.append(Value.of_list([Value.of_int(subject_id), Value.of_vector(cluster.mean),
                                   Value.of_int(cluster.count)]))
    return Value.of_list(rows)


def value_to_training_set(value: Value) -> TrainingSet:
    from .classify import Cluster
    clusters = {}
    for row in value.payload:
        subject_id, mean, count = row.payload
        clusters[subject_id.payload] = Cluster(
            mean=np.array(mean.payload, dtype=np.float64), count=count.payload)
    return TrainingSet(clusters=clusters)


def result_set_to_value(rs: ResultSet) -> Value:
    return Value.of_list([
        Value.of_list([Value.of_int(sid), Value.of_float(dist)]) for sid, dist in rs.ranked])


def value_to_result_set(value: Value) -> ResultSet:
    return ResultSet(ranked=tuple(
        (row.payload[0].payload, row.payload[1].payload) for row in value.payload))


# -- stage procedures ---------------------------------------------------------


def stage_load(params: Sequence[Value]) -> Value:
    sample = audio.load_sample(value_to_source(params[0]))
    return sample_to_value(sample)


def stage_preprocess(params: Sequence[Value]) -> Value:
    threshold, cutoff_hz, prev = params
    sample = value_to_sample(prev)
    sample = audio.remove_noise(sample, cutoff_hz=cutoff_hz.payload)
    sample = audio.remove_silence(sample, threshold=threshold.payload)
    sample = audio.normalize(sample)
    return sample_to_value(sample)


def stage_extract(params: Sequence[Value]) -> Value:
    window_len, poles, prev = params
    sample = value_to_sample(prev)
    features = lpc_features(sample, window_len=window_len.payload, poles=poles.payload)
    return Value.of_vector(features)


def stage_classify(params: Sequence[Value]) -> Value:
    ts_value, prev = params
    ts = value_to_training_set(ts_value)
    features = np.array(prev.payload, dtype=np.float64)
    return result_set_to_value(classify(ts, features))


PROCEDURES: Dict[str, Callable[[Sequence[Value]], Value]] = {
    "load_sample": stage_load,
    "preprocess": stage_preprocess,
    "extract_lpc": stage_extract,
    "classify_nearest": stage_classify,
}


def default_procedure_pool() -> Dict[str, Callable[[Sequence[Value]], Value]]:
    return dict(PROCEDURES)


# -- plan construction ---------------------------------------------------------


def build_marf_geer(source: Union[str, SineSpec, Sample],
                    window_len: int = DEFAULT_WINDOW_LEN,
                    poles: int = DEFAULT_POLES,
                    silence_threshold: float = audio.DEFAULT_SILENCE_THRESHOLD,
                    noise_cutoff_hz: float = audio.DEFAULT_NOISE_CUTOFF_HZ,
                    training_set: Optional[TrainingSet] = None) -> Geer:
    """Four-stage plan [load -> preprocess -> extract -> classify].

    The returned id is a digest of the plan itself, so identical parameters
    give identical plans and therefore fully memoized re-runs.
    """
    if window_len < 2 or window_len % 2 != 0:
        raise BadParams("window_len must be an even integer >= 2")
    if not 0 < poles < window_len:
        raise BadParams("poles must satisfy 0 < poles < window_len")
    if not 0.0 <= silence_threshold < 1.0:
        raise BadParams("silence_threshold must be in [0, 1)")
    if noise_cutoff_hz <= 0:
        raise BadParams("noise_cutoff_hz must be positive")
    ts_value = training_set_to_value(training_set or TrainingSet())
    plan = (
        StagePlan("sample_loading", "load_sample", (source_to_value(source),)),
        StagePlan("preprocessing", "preprocess",
                  (Value.of_float(silence_threshold), Value.of_float(noise_cutoff_hz))),
        StagePlan("feature_extraction", "extract_lpc",
                  (Value.of_int(window_len), Value.of_int(poles))),
        StagePlan(CLASSIFICATION_STAGE, "classify_nearest", (ts_value,)),
    )
    digest = hashlib.sha256()
    for stage in plan:
        from .. import canon
        digest.update(canon.text_encode(stage.to_tree()))
    return Geer(geer_id="marf-%s" % digest.hexdigest()[:16], program_id=PROGRAM_ID, plan=plan)


def run_pipeline_local(geer: Geer) -> Value:
    """Direct in-process composition of the stage procedures; the oracle the
    grid execution is compared against."""
    previous = None
    for stage in geer.plan:
        procedure = PROCEDURES[stage.procedure_name]
        params = list(stage.param_template)
        if previous is not None:
            params.append(previous)
        previous = procedure(params)
    return previous
