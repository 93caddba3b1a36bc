"""Adversarial training loop, zero-shot evaluation and the feature probe."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import adversarial as adv
from .data import WindowBatch
from .errors import ConfigError, NumericError
from .metrics import MetricReport, mae, metric_report
from .model import ModelConfig, ModelState, init_model, model_backward, model_forward, predict
from .optimizer import Adam

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    adversarial: bool = True
    grl_lambda: float = 1.0
    grl_schedule: str = "ganin"
    grl_gamma: float = 10.0
    secondary_supervised: bool = False
    clip_norm: float = 0.0
    train_stride: int = 1
    val_fraction: float = 0.1
    classifier_width: int = 32
    classifier_lr: float = 0.0  # 0 means: same as lr
    classifier_steps: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")
        if self.lr <= 0 or self.classifier_lr < 0:
            raise ConfigError("lr must be positive and classifier_lr non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.classifier_steps < 1:
            raise ConfigError("classifier_steps must be positive")
        if self.train_stride < 1:
            raise ConfigError("train_stride must be positive")
        self.grl()  # validates lambda and schedule

    def grl(self) -> adv.GrlConfig:
        return adv.GrlConfig(self.grl_lambda, self.grl_schedule, self.grl_gamma)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: ModelState
    classifier: adv.DomainClassifierParams | None
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def _split_validation(batch: WindowBatch, fraction: float) -> tuple[WindowBatch, WindowBatch | None]:
    n_val = int(round(len(batch) * fraction))
    if n_val == 0 or n_val >= len(batch):
        return batch, None
    cut = len(batch) - n_val
    return batch.subset(np.arange(cut)), batch.subset(np.arange(cut, len(batch)))


def _denorm_mae(model: ModelState, batch: WindowBatch) -> float:
    pred = batch.denormalize(predict(model, batch.inputs))
    return mae(batch.denormalize(batch.targets), pred)


def train(model_config: ModelConfig, cfg: TrainConfig, primary: WindowBatch,
          secondary: WindowBatch | None = None, on_epoch=None) -> TrainResult:
    """Joint forecasting / domain-confusion training.

    ``primary`` rows carry domain label 1 and ``secondary`` rows label 0.
    Each mini-batch takes half its rows from each market. The forecast
    loss is MAE on de-normalized prices of the supervised rows; with
    ``cfg.adversarial`` the domain BCE reaches the first-stack features
    through the gradient reversal layer. The parameters with the lowest
    validation MAE (last ``val_fraction`` of the primary windows) are kept.
    """
    rng = np.random.default_rng(cfg.seed)
    model = init_model(model_config, seed=rng.integers(2**63))
    use_secondary = secondary is not None and (cfg.adversarial or cfg.secondary_supervised)
    classifier = None
    params = {f"model.{k}": v for k, v in model.parameters().items()}
    clf_params = {}
    if cfg.adversarial:
        if secondary is None:
            raise ConfigError("adversarial training needs a secondary market")
        classifier = adv.init_classifier(model_config.hidden_dim, cfg.classifier_width, rng)
        clf_params = {f"clf.{k}": v for k, v in classifier.parameters().items()}
    opt = Adam(lr=cfg.lr, clip_norm=cfg.clip_norm or None)
    clf_opt = Adam(lr=cfg.classifier_lr or cfg.lr, clip_norm=cfg.clip_norm or None)
    grl = cfg.grl()

    train_p, val_p = _split_validation(primary, cfg.val_fraction)
    half = cfg.batch_size // 2 if use_secondary else cfg.batch_size
    n_batches = max(1, math.ceil(len(train_p) / half))
    total_steps = cfg.epochs * n_batches
    sec_order = rng.permutation(len(secondary)) if use_secondary else None
    sec_pos = 0

    best = (math.inf, None, 0)
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_p))
        sums = np.zeros(3)
        count = 0
        lam = 0.0
        for b in range(n_batches):
            idx = order[b * half:(b + 1) * half]
            if len(idx) == 0:
                continue
            batch = train_p.subset(idx)
            if use_secondary:
                take = []
                while len(take) < len(idx):
                    if sec_pos >= len(sec_order):
                        sec_order = rng.permutation(len(secondary))
                        sec_pos = 0
                    chunk = sec_order[sec_pos:sec_pos + len(idx) - len(take)]
                    sec_pos += len(chunk)
                    take.extend(chunk.tolist())
                batch = WindowBatch.concat([batch, secondary.subset(np.array(take))])

            lam = grl.value(step / max(1, total_steps - 1)) if cfg.adversarial else 0.0
            trace = model_forward(model, batch.inputs)
            y_hat = batch.denormalize(trace.forecast)
            y = batch.denormalize(batch.targets)
            labels = batch.domain_labels
            supervised = np.ones(len(batch), dtype=bool) if cfg.secondary_supervised else labels == 1
            if cfg.adversarial:
                res = adv.joint_loss(classifier, trace.feature, y_hat, y, labels, lam, supervised)
                g_forecast, g_feature = res.grad_forecast, res.grad_feature
                grads_clf = {f"clf.{k}": v for k, v in res.classifier_grads.items()}
                sums += (res.forecast_loss, res.domain_loss, res.domain_accuracy)
            else:
                f_loss, g_forecast = adv.mae_loss(y_hat, y, supervised)
                if not math.isfinite(f_loss):
                    raise NumericError(f"non-finite forecast loss at epoch {epoch}, batch {b}")
                g_feature, grads_clf = None, {}
                sums += (f_loss, math.nan, math.nan)
            # chain through de-normalization
            g_forecast = g_forecast * batch.sigma[:, None]
            grads = {f"model.{k}": v for k, v in model_backward(model, trace, g_forecast, g_feature).items()}
            opt.step(params, grads)
            if grads_clf:
                clf_opt.step(clf_params, grads_clf)
                for _ in range(cfg.classifier_steps - 1):
                    clf_opt.step(clf_params, _classifier_grads(classifier, trace.feature, labels))
            count += 1
            step += 1

        means = sums / max(count, 1)
        val_mae = _denorm_mae(model, val_p) if val_p is not None else float(means[0])
        row = {
            "epoch": epoch,
            "forecast_loss": float(means[0]),
            "domain_loss": float(means[1]),
            "domain_accuracy": float(means[2]),
            "lambda": float(lam),
            "val_mae": float(val_mae),
        }
        history.append(row)
        log.info("epoch %d: %s", epoch, row)
        if on_epoch is not None:
            on_epoch(row)
        if not math.isfinite(val_mae):
            raise NumericError(f"validation MAE is not finite at epoch {epoch}")
        if val_mae < best[0]:
            best = (val_mae, copy.deepcopy((model, classifier)), epoch)

    model, classifier = best[1]
    return TrainResult(model, classifier, history, best[2])


def _classifier_grads(classifier, feature, labels) -> dict[str, np.ndarray]:
    cache = adv.classifier_forward(classifier, feature)
    _, g_logit = adv.bce_from_logits(cache.logit, labels)
    _, grads = adv.classifier_backward(classifier, cache, g_logit)
    return {f"clf.{k}": v for k, v in grads.items()}


# --------------------------------------------------------------- evaluation


def naive_persistence(batch: WindowBatch, season: int = 24) -> np.ndarray:
    """Forecast each hour with the price ``season`` hours earlier (price units)."""
    lookback = batch.inputs.shape[1]
    horizon = batch.targets.shape[1]
    if lookback < season:
        raise ValueError("lookback shorter than the persistence season")
    last = batch.inputs[:, lookback - season:]
    reps = math.ceil(horizon / season)
    return batch.denormalize(np.tile(last, (1, reps))[:, :horizon])


@dataclass
class Evaluation:
    report: MetricReport
    naive: MetricReport
    actual: np.ndarray
    predicted: np.ndarray
    batch: WindowBatch


def evaluate(model: ModelState, batch: WindowBatch) -> Evaluation:
    predicted = batch.denormalize(predict(model, batch.inputs))
    actual = batch.denormalize(batch.targets)
    labels = [ts.strftime("%Y-%m-%d") for ts in batch.target_start]
    report = metric_report(actual, predicted, labels)
    naive = metric_report(actual, naive_persistence(batch), labels)
    return Evaluation(report, naive, actual, predicted, batch)


# -------------------------------------------------------------------- probe


def features(model: ModelState, inputs, chunk: int = 1024) -> np.ndarray:
    inputs = np.atleast_2d(inputs)
    return np.concatenate([model_forward(model, inputs[s:s + chunk]).feature
                           for s in range(0, len(inputs), chunk)])


def probe_domain_accuracy(model: ModelState, primary: WindowBatch, secondary: WindowBatch,
                          seed: int = 0, n_per_domain: int = 1500, train_frac: float = 0.7,
                          steps: int = 400, lr: float = 1e-2, width: int = 32) -> float:
    """Held-out accuracy of a fresh domain classifier on frozen first-stack features.

    Balanced samples from both markets are split at random; the probe is
    trained full-batch with Adam on standardized features.
    """
    rng = np.random.default_rng(seed)
    ip = rng.choice(len(primary), min(n_per_domain, len(primary)), replace=False)
    is_ = rng.choice(len(secondary), min(n_per_domain, len(secondary)), replace=False)
    n = min(len(ip), len(is_))
    feats = np.concatenate([features(model, primary.inputs[ip[:n]]),
                            features(model, secondary.inputs[is_[:n]])])
    labels = np.concatenate([np.ones(n), np.zeros(n)])
    perm = rng.permutation(2 * n)
    cut = int(train_frac * 2 * n)
    tr, te = perm[:cut], perm[cut:]
    mu = feats[tr].mean(axis=0)
    sd = feats[tr].std(axis=0)
    sd[sd == 0] = 1.0
    feats = (feats - mu) / sd

    clf = adv.init_classifier(feats.shape[1], width, rng)
    params = clf.parameters()
    opt = Adam(lr=lr)
    for _ in range(steps):
        cache = adv.classifier_forward(clf, feats[tr])
        _, g_logit = adv.bce_from_logits(cache.logit, labels[tr])
        _, grads = adv.classifier_backward(clf, cache, g_logit)
        opt.step(params, grads)
    prob = adv.classifier_forward(clf, feats[te]).prob
    return float(np.mean((prob >= 0.5) == (labels[te] == 1)))
