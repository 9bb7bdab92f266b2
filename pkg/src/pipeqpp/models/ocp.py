"""Per-operator-type cost predictors (shallow MLPs)."""
from __future__ import annotations

import numpy as np

from ..domain import DEFAULT_CATALOG, COST_FIELDS, CostVector
from .encoding import FeatureEncoder, TargetScaler, operator_features
from .layers import MLP

N_COST = len(COST_FIELDS)


class UnknownOperatorType(KeyError):
    pass


class OperatorCostPredictor:
    """Encoder, target scaler and a 3-hidden-layer MLP for one operator type."""

    def __init__(self, op_type, encoder: FeatureEncoder, scaler: TargetScaler, hidden, rng):
        self.op_type = op_type
        self.encoder = encoder
        self.scaler = scaler
        self.hidden = tuple(hidden)
        self.mlp = MLP([encoder.width, *self.hidden, N_COST], rng, name=f"ocp.{op_type}")

    def forward(self, x):
        return self.mlp(x)

    def parameters(self):
        return self.mlp.parameters()

    def predict_arrays(self, samples) -> np.ndarray:
        x = self.encoder.encode_many(samples)
        return self.scaler.inverse(self.mlp(x).value)


class OcpModel:
    """One predictor per operator type, plus a pooled cost scaler.

    The pooled scaler normalizes predicted cost vectors before they enter
    the calibrator, so every type shares one input scale.
    """

    def __init__(self, predictors: dict, pooled_scaler: TargetScaler, catalog=DEFAULT_CATALOG):
        self.predictors = dict(predictors)
        self.pooled_scaler = pooled_scaler
        self.catalog = catalog

    def __contains__(self, op_type):
        return op_type in self.predictors

    def predictor(self, op_type) -> OperatorCostPredictor:
        try:
            return self.predictors[op_type]
        except KeyError:
            raise UnknownOperatorType(f"no cost predictor for operator type {op_type!r}") from None

    def predict_array(self, inst, util) -> np.ndarray:
        p = self.predictor(inst.op_type)
        return p.predict_arrays([operator_features(inst, util, catalog=self.catalog)])[0]

    def predict_many(self, calls) -> np.ndarray:
        """Cost arrays for a list of ``(inst, util)``, batched per type."""
        out = np.zeros((len(calls), N_COST))
        by_type = {}
        for i, (inst, util) in enumerate(calls):
            by_type.setdefault(inst.op_type, []).append(i)
        for op_type, idx in by_type.items():
            p = self.predictor(op_type)
            feats = [operator_features(calls[i][0], calls[i][1], catalog=self.catalog)
                     for i in idx]
            out[idx] = p.predict_arrays(feats)
        return out

    def parameters(self):
        return [t for k in sorted(self.predictors) for t in self.predictors[k].parameters()]


def ocp_predict(inst, util, model) -> CostVector:
    """Denormalized, non-negative cost vector for one operator call.

    ``model`` is an OcpModel or anything with an ``ocp`` attribute (a bundle).
    """
    ocp = getattr(model, "ocp", model)
    if ocp is None:
        raise ValueError("bundle has no operator cost predictors")
    arr = ocp.predict_array(inst, util)
    # keep the counter invariants of CostVector after independent regression
    arr[5] = min(arr[5], arr[4])
    arr[6] = min(arr[6], arr[7])
    return CostVector.from_array(arr)


def zero_output_layer(pred: OperatorCostPredictor):
    last = pred.mlp.layers[-1]
    last.W.value[:] = 0.0
    last.b.value[:] = 0.0


__all__ = ["OcpModel", "OperatorCostPredictor", "UnknownOperatorType", "ocp_predict",
           "zero_output_layer", "N_COST"]
