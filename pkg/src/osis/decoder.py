"""Instance decoder: initial masks -> instance features -> masks and classes.

Candidate features are pooled from point features weighted by thresholded
sigmoid mask scores, exchanged through a columnwise max, then used directly
as 1x1 dynamic-convolution kernels against every point feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneOutput, _xavier
from .geometry import fuse_centroid_features
from .tensor import Parameter, Tensor

WEIGHT_SUM_EPS = 1e-6


@dataclass
class InstanceSet:
    """k candidate instances over one scene."""

    mask_logits: Tensor      # (N, k)
    mask_probs: Tensor       # sigmoid of mask_logits
    features: Tensor         # (k, d) pre-interaction
    pooled_features: Tensor  # (k, d) post-interaction
    class_logits: Tensor     # (k, c+1); column c is background


def mask_to_feature(
    mask_logits: Tensor, point_features: Tensor, tau: float, norm: str = "count"
) -> Tensor:
    """Weighted pool of point features per candidate.

    Weight of point i in candidate j is sigmoid(logit) when >= tau, else 0;
    the gate is a stop-gradient indicator (grad flows through retained
    sigmoids only). norm="count" divides by N; norm="weight_sum" divides by
    the per-candidate weight total (clamped at 1e-6).
    """
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must be in [0,1), got {tau}")
    if norm not in ("count", "weight_sum"):
        raise ValueError(f"unknown feature norm {norm!r}")
    m, f = mask_logits, point_features
    if m.shape[0] != f.shape[0]:
        raise ValueError(f"mask rows {m.shape[0]} vs feature rows {f.shape[0]}")
    n = m.shape[0]
    sig = T._sigmoid_np(m.data)
    gate = sig >= tau
    weights = np.where(gate, sig, 0.0)  # (N, k)
    if norm == "count":
        z = np.full(m.shape[1], float(n))
        z_active = None
    else:
        sums = weights.sum(axis=0)
        z_active = sums > WEIGHT_SUM_EPS
        z = np.maximum(sums, WEIGHT_SUM_EPS)
    num = weights.T @ f.data
    out_data = num / z[:, None]

    def bw(out):
        def run():
            g = out.grad  # (k, d)
            g_over_z = g / z[:, None]
            if f.requires_grad:
                f._accum((weights / z[None, :]) @ g)
            if m.requires_grad:
                dw = f.data @ g_over_z.T  # (N, k)
                if z_active is not None:
                    dz = -(num * g).sum(axis=1) / (z * z)
                    dw = dw + (dz * z_active)[None, :]
                m._accum(dw * weights * (1.0 - sig))
        return run

    return T._make(out_data, [m, f], bw)


def feature_interaction(features: Tensor) -> Tensor:
    """Broadcast the columnwise max over candidates back onto each candidate."""
    return T.add_column_max(features)


def feature_to_instance(
    features: Tensor, point_features: Tensor, bias_w: Parameter, bias_b: Parameter
) -> Tensor:
    """Dynamic 1x1 convolution: candidate features act as kernels.

    logit[i, j] = f_ins[j] . f[i] + b[j], with b a learned affine of f_ins.
    """
    if features.shape[1] != point_features.shape[1]:
        raise ValueError(
            f"width mismatch: instances {features.shape} vs points {point_features.shape}"
        )
    bias = T.tsum(T.affine(features, bias_w, bias_b), axis=1)  # (k,1) -> (k,)
    return T.add_rowvec(T.matmul(point_features, T.transpose(features)), bias)


def classify_instances(pooled: Tensor, weight: Parameter, bias: Parameter) -> Tensor:
    """Single affine layer d -> (c+1); softmax is applied by consumers."""
    return T.affine(pooled, weight, bias)


class InstanceDecoder:
    """Owns the fusion projection, mask-bias head, and instance classifier."""

    def __init__(self, rng, d: int, c: int, pe_levels: int, tau: float, feature_norm: str):
        self.tau = tau
        self.feature_norm = feature_norm
        self.n_classes = c
        pe_dim = 6 * pe_levels
        self.proj_w = Parameter("decoder.proj.w", _xavier(rng, (pe_dim, d), pe_dim, d))
        self.proj_b = Parameter("decoder.proj.b", np.zeros(d))
        self.bias_w = Parameter("decoder.maskbias.w", _xavier(rng, (d, 1), d, 1))
        self.bias_b = Parameter("decoder.maskbias.b", np.zeros(1))
        self.cls_w = Parameter("decoder.classifier.w", _xavier(rng, (d, c + 1), d, c + 1))
        self.cls_b = Parameter("decoder.classifier.b", np.zeros(c + 1))

    def parameters(self) -> list[Parameter]:
        return [self.proj_w, self.proj_b, self.bias_w, self.bias_b, self.cls_w, self.cls_b]

    def decode(self, backbone_out: BackboneOutput, positions: np.ndarray) -> InstanceSet:
        """Fuse centroid encodings, pool instance features, emit masks + classes.

        The dynamic convolution consumes pre-interaction features; the
        classifier consumes post-interaction (pooled) features.
        """
        fused = fuse_centroid_features(
            backbone_out.point_features,
            positions,
            backbone_out.offsets,
            self.proj_w,
            self.proj_b,
        )
        f_ins = mask_to_feature(
            backbone_out.mask_logits, fused, self.tau, self.feature_norm
        )
        f_pooled = feature_interaction(f_ins)
        mask_logits = feature_to_instance(f_ins, fused, self.bias_w, self.bias_b)
        class_logits = classify_instances(f_pooled, self.cls_w, self.cls_b)
        return InstanceSet(
            mask_logits=mask_logits,
            mask_probs=T.sigmoid(mask_logits),
            features=f_ins,
            pooled_features=f_pooled,
            class_logits=class_logits,
        )
