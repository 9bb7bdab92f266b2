"""Operator cost predictors, the attention calibrator and the tree-convolution summarizer."""
from .checkpoint import (CheckpointError, CheckpointVersionError, load_bundle, load_ocp,
                         save_bundle, save_ocp)
from .encoding import FeatureEncoder, TargetScaler, encode_operator, operator_features
from .gat import GatCalibrator, GatLayer, neighborhood_mask, symmetrize
from .layers import MLP, Linear
from .ocp import OcpModel, OperatorCostPredictor, UnknownOperatorType, ocp_predict
from .qpp import (Ablation, GraphBatch, ModelBundle, ModelConfig, QueryGraph, build_graph,
                  collate, predict_query)
from .tcn import TcnPredictor, coefficient_matrices, tcn_coefficients

__all__ = [
    "CheckpointError", "CheckpointVersionError", "load_bundle", "save_bundle", "load_ocp",
    "save_ocp",
    "FeatureEncoder", "TargetScaler", "encode_operator", "operator_features",
    "GatCalibrator", "GatLayer", "neighborhood_mask", "symmetrize", "MLP", "Linear",
    "OcpModel", "OperatorCostPredictor", "UnknownOperatorType", "ocp_predict",
    "Ablation", "GraphBatch", "ModelBundle", "ModelConfig", "QueryGraph", "build_graph",
    "collate", "predict_query", "TcnPredictor", "coefficient_matrices", "tcn_coefficients",
]
