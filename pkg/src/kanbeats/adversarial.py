"""Gradient reversal, the domain classifier head and the joint objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .errors import ConfigError, NumericError

PROB_CLIP = 1e-7


@dataclass
class GrlConfig:
    """Reversal strength. ``schedule='ganin'`` ramps it from 0 towards ``lam``."""

    lam: float = 1.0
    schedule: str = "ganin"
    gamma: float = 10.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("GRL lambda must be non-negative")
        if self.schedule not in ("constant", "ganin"):
            raise ConfigError(f"unknown GRL schedule {self.schedule!r}")

    def value(self, progress: float) -> float:
        if self.schedule == "constant":
            return self.lam
        p = min(max(progress, 0.0), 1.0)
        return self.lam * (2.0 / (1.0 + math.exp(-self.gamma * p)) - 1.0)


def grl_forward(x):
    return x


def grl_backward(grad_out, lam: float):
    return -lam * np.asarray(grad_out, dtype=np.float64)


# -------------------------------------------------------- domain classifier


@dataclass
class DomainClassifierParams:
    hidden: L.LinearLayerParams
    output: L.LinearLayerParams

    def parameters(self) -> dict[str, np.ndarray]:
        out = {f"hidden.{k}": v for k, v in self.hidden.arrays().items()}
        out.update({f"output.{k}": v for k, v in self.output.arrays().items()})
        return out


def init_classifier(feature_dim: int, width: int = 32, rng_seed=None) -> DomainClassifierParams:
    rng = np.random.default_rng(rng_seed)
    return DomainClassifierParams(
        hidden=L.init_linear(feature_dim, width, rng),
        output=L.init_linear(width, 1, rng),
    )


@dataclass
class ClassifierCache:
    feature: np.ndarray
    pre_hidden: np.ndarray
    hidden: np.ndarray
    logit: np.ndarray  # (n,)
    prob: np.ndarray  # (n,)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def classifier_forward(params: DomainClassifierParams, feature) -> ClassifierCache:
    """P(domain = primary) for each feature row, with intermediates kept."""
    feature = np.atleast_2d(np.asarray(feature, dtype=np.float64))
    pre = L.linear_forward(params.hidden, feature)
    hid = L.silu(pre)
    logit = L.linear_forward(params.output, hid)[:, 0]
    return ClassifierCache(feature, pre, hid, logit, sigmoid(logit))


def classifier_backward(params: DomainClassifierParams, cache: ClassifierCache, grad_logit):
    """Returns (grad wrt feature, parameter grads)."""
    g = np.asarray(grad_logit, dtype=np.float64).reshape(-1, 1)
    gout = L.linear_backward(params.output, cache.hidden, g)
    g_pre = gout.grad_input * L.silu_grad(cache.pre_hidden)
    ghid = L.linear_backward(params.hidden, cache.feature, g_pre)
    grads = {f"hidden.{k}": v for k, v in ghid.grad_params.items()}
    grads.update({f"output.{k}": v for k, v in gout.grad_params.items()})
    return ghid.grad_input, grads


def bce(prob, label):
    """Mean binary cross-entropy on clipped probabilities and its gradient wrt ``prob``."""
    prob = np.asarray(prob, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    pc = np.clip(prob, PROB_CLIP, 1.0 - PROB_CLIP)
    n = prob.size
    loss = -np.mean(label * np.log(pc) + (1.0 - label) * np.log(1.0 - pc))
    inside = (prob > PROB_CLIP) & (prob < 1.0 - PROB_CLIP)
    grad = np.where(inside, (pc - label) / (pc * (1.0 - pc)), 0.0) / n
    return float(loss), grad


def bce_from_logits(logit, label):
    """Mean clipped BCE and its gradient wrt the logits."""
    prob = sigmoid(logit)
    loss, g_prob = bce(prob, label)
    return loss, g_prob * prob * (1.0 - prob)


# ------------------------------------------------------------- joint loss


@dataclass
class JointLossResult:
    loss: float
    forecast_loss: float
    domain_loss: float
    domain_accuracy: float
    grad_forecast: np.ndarray
    grad_feature: np.ndarray  # already reversed by the GRL
    classifier_grads: dict[str, np.ndarray]


def mae_loss(forecast, target, mask=None):
    """Mean |forecast - target| over the rows selected by ``mask``, with gradient."""
    forecast = np.asarray(forecast, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if mask is None:
        mask = np.ones(forecast.shape[0], dtype=bool)
    count = int(mask.sum()) * forecast.shape[1]
    grad = np.zeros_like(forecast)
    if count == 0:
        return 0.0, grad
    diff = forecast[mask] - target[mask]
    grad[mask] = np.sign(diff) / count
    return float(np.abs(diff).sum() / count), grad


def joint_loss(classifier: DomainClassifierParams, feature, forecast, target, domain_label,
               lam: float, supervised=None) -> JointLossResult:
    """MAE on supervised rows plus domain BCE on every row.

    ``supervised`` defaults to the primary rows (``domain_label == 1``). The
    feature gradient is the classifier's input gradient passed through the
    reversal layer, so the feature extractor ascends the domain loss.
    """
    domain_label = np.asarray(domain_label, dtype=np.float64).ravel()
    if not np.all((domain_label == 0) | (domain_label == 1)):
        raise ValueError("domain labels must be 0 or 1")
    if supervised is None:
        supervised = domain_label == 1
    f_loss, g_forecast = mae_loss(forecast, target, np.asarray(supervised, dtype=bool))

    cache = classifier_forward(classifier, grl_forward(feature))
    d_loss, g_logit = bce_from_logits(cache.logit, domain_label)
    g_feat, clf_grads = classifier_backward(classifier, cache, g_logit)

    loss = f_loss + d_loss
    if not math.isfinite(loss):
        raise NumericError(
            f"non-finite training loss (forecast={f_loss}, domain={d_loss}); "
            "check input scaling, learning rate or enable clip_norm"
        )
    accuracy = float(np.mean((cache.prob >= 0.5) == (domain_label == 1)))
    return JointLossResult(
        loss=loss,
        forecast_loss=f_loss,
        domain_loss=d_loss,
        domain_accuracy=accuracy,
        grad_forecast=g_forecast,
        grad_feature=grl_backward(g_feat, lam),
        classifier_grads=clf_grads,
    )
