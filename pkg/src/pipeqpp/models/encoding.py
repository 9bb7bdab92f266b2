"""Feature extraction and encoding for operators and tree nodes."""
from __future__ import annotations

import math

import numpy as np

from ..domain import (DEFAULT_CATALOG, COST_FIELDS, SECONDS_FIELDS, Catalog, OperatorInstance,
                      ResourceUtilization)

# params that describe the execution rather than the operator's work
EXCLUDED_PARAMS = frozenset({"dop", "planner_estimate", "input_chunks"})
UNSEEN = "<unseen>"
MISSING = "<missing>"


def operator_features(inst: OperatorInstance, util: ResourceUtilization, rows=None,
                      catalog: Catalog = DEFAULT_CATALOG, chunks=None) -> dict:
    """Raw named features of one operator call.

    ``rows`` overrides ``inst.input_rows`` (training uses the rows actually
    processed, prediction uses the estimate carried by the instance);
    ``chunks`` likewise overrides the planner's ``input_chunks`` estimate.
    """
    rows = inst.input_rows if rows is None else rows
    chunks = inst.params.get("input_chunks", 0) if chunks is None else chunks
    feats = {
        "util_cpu": util.cpu, "util_mem": util.mem, "util_io": util.io,
        "log_rows": math.log1p(max(rows, 0)),
        "cols": float(inst.input_cols),
        "log_chunks": math.log1p(float(chunks)),
        "simd": "yes" if catalog[inst.op_type].simd else "no",
    }
    for k, v in inst.params.items():
        if k in EXCLUDED_PARAMS:
            continue
        feats[f"p_{k}"] = v if isinstance(v, str) else float(v)
    return feats


class FeatureEncoder:
    """Z-scores numeric features and one-hot encodes categorical ones.

    Numeric std is clamped to 1 for constant features; each categorical
    block ends with a reserved slot for values unseen during fitting.
    A numeric feature absent from a sample encodes as 0 (its mean).
    """

    def __init__(self, numeric=None, categorical=None):
        # numeric: name -> (mean, std); categorical: name -> vocabulary list
        self.numeric = dict(numeric or {})
        self.categorical = {k: list(v) for k, v in (categorical or {}).items()}

    @classmethod
    def fit(cls, samples):
        samples = list(samples)
        if not samples:
            raise ValueError("cannot fit an encoder on zero samples")
        num_vals, cat_vals = {}, {}
        for s in samples:
            for k, v in s.items():
                if isinstance(v, str):
                    cat_vals.setdefault(k, set()).add(v)
                else:
                    num_vals.setdefault(k, []).append(float(v))
        clash = set(num_vals) & set(cat_vals)
        if clash:
            raise ValueError(f"features {sorted(clash)} mix numeric and categorical values")
        numeric = {}
        for k in sorted(num_vals):
            arr = np.array(num_vals[k])
            std = float(arr.std())
            numeric[k] = (float(arr.mean()), std if std > 1e-12 else 1.0)
        categorical = {k: sorted(cat_vals[k]) for k in sorted(cat_vals)}
        return cls(numeric, categorical)

    @property
    def width(self):
        return len(self.numeric) + sum(len(v) + 1 for v in self.categorical.values())

    def slot_names(self):
        names = list(self.numeric)
        for k, vocab in self.categorical.items():
            names += [f"{k}={v}" for v in vocab] + [f"{k}={UNSEEN}"]
        return names

    def encode(self, sample: dict) -> np.ndarray:
        out = np.zeros(self.width)
        i = 0
        for k, (mu, sd) in self.numeric.items():
            v = sample.get(k)
            if v is not None and not isinstance(v, str):
                out[i] = (float(v) - mu) / sd
            i += 1
        for k, vocab in self.categorical.items():
            v = sample.get(k)
            if v is not None:
                v = str(v)
                out[i + (vocab.index(v) if v in vocab else len(vocab))] = 1.0
            i += len(vocab) + 1
        return out

    def encode_many(self, samples) -> np.ndarray:
        return np.array([self.encode(s) for s in samples]).reshape(-1, self.width)

    def to_dict(self):
        return {"numeric": {k: list(v) for k, v in self.numeric.items()},
                "categorical": self.categorical}

    @classmethod
    def from_dict(cls, d):
        return cls({k: tuple(v) for k, v in d["numeric"].items()}, d["categorical"])


def encode_operator(inst, util, enc: FeatureEncoder, rows=None, catalog=DEFAULT_CATALOG):
    return enc.encode(operator_features(inst, util, rows, catalog))


def cost_units():
    """Per-field units so that log1p compresses seconds as well as counts."""
    return np.array([1e-6 if f in SECONDS_FIELDS else 1.0 for f in COST_FIELDS])


class TargetScaler:
    """log1p(x / unit) then z-score per column; the inverse clamps at zero."""

    def __init__(self, mean, std, units=None):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.units = np.ones_like(self.mean) if units is None else np.asarray(units, float)

    @classmethod
    def fit(cls, y, units=None):
        y = np.asarray(y, dtype=np.float64)
        units = cost_units() if units is None and y.shape[-1] == len(COST_FIELDS) else units
        units = np.ones(y.shape[-1]) if units is None else np.asarray(units, float)
        logs = np.log1p(y / units)
        std = logs.std(axis=0)
        return cls(logs.mean(axis=0), np.where(std > 1e-12, std, 1.0), units)

    def transform(self, y):
        return (np.log1p(np.asarray(y, dtype=np.float64) / self.units) - self.mean) / self.std

    def inverse(self, z):
        return np.maximum(np.expm1(np.asarray(z) * self.std + self.mean), 0.0) * self.units

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "units": self.units.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"], d.get("units"))


def cost_feature(cost_array, scaler: TargetScaler) -> np.ndarray:
    """Normalized cost vector as fed to the calibrator."""
    return scaler.transform(np.maximum(cost_array, 0.0))


__all__ = ["FeatureEncoder", "TargetScaler", "operator_features", "encode_operator",
           "cost_feature", "EXCLUDED_PARAMS", "COST_FIELDS"]
