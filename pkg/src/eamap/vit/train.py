"""Hand-derived reverse pass, cross-entropy loss and an Adam training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import NumericError, TrainingError
from ..tensor import RngState, gelu_grad
from .model import ModelConfig, _merge_heads, _split_heads, forward, init_params

logger = logging.getLogger(__name__)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(e.sum(axis=1, keepdims=True))
    B = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(B), labels], dtype=np.float64))
    dlogits = probs.copy()
    dlogits[np.arange(B), labels] -= 1
    dlogits /= logits.dtype.type(B)
    return loss, dlogits


def _ln_backward(dy, xhat, rstd, gamma):
    """Gradient of y = xhat * gamma + beta w.r.t. (x, gamma, beta)."""
    axes = tuple(range(dy.ndim - 1))
    dgamma = np.sum(dy * xhat, axis=axes)
    dbeta = np.sum(dy, axis=axes)
    dxhat = dy * gamma
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def _wgrad(inp, dout):
    """Weight gradient of ``out = inp @ W`` summed over all leading axes."""
    return inp.reshape(-1, inp.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])


def backward(dlogits, cache, params, cfg: ModelConfig) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    grads["head.w"] = cache["z"].T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dz = dlogits @ params["head.w"].T
    dx0, grads["norm.g"], grads["norm.b"] = _ln_backward(
        dz, cache["xhatf"], cache["rstdf"], params["norm.g"]
    )
    layers = cache["layers"]
    B, T = layers[0]["x"].shape[:2] if layers else (dz.shape[0], cfg.seq_len)
    dx = np.zeros((B, T, cfg.embed_dim), dtype=dz.dtype)
    dx[:, 0] = dx0

    for l in reversed(range(cfg.num_layers)):
        p = f"blocks.{l}."
        c = layers[l]
        # MLP branch: x_out = h + gelu(y2 @ W1) @ W2
        grads[p + "w2"] = _wgrad(c["g"], dx)
        dg = dx @ params[p + "w2"].T
        du = dg * gelu_grad(c["u"])
        grads[p + "w1"] = _wgrad(c["y2"], du)
        dy2 = du @ params[p + "w1"].T
        dh_ln, grads[p + "ln2.g"], grads[p + "ln2.b"] = _ln_backward(
            dy2, c["xhat2"], c["rstd2"], params[p + "ln2.g"]
        )
        dh = dx + dh_ln
        # attention branch: h = x + concat(A V) @ Wproj
        grads[p + "wproj"] = _wgrad(c["o"], dh)
        do = _split_heads(dh @ params[p + "wproj"].T, cfg)
        a, q, k, v = c["a"], c["q"], c["k"], c["v"]
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) * c["scale"]
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
        y1 = c["y1"]
        grads[p + "wq"] = _wgrad(y1, dq)
        grads[p + "wk"] = _wgrad(y1, dk)
        grads[p + "wv"] = _wgrad(y1, dv)
        dy1 = dq @ params[p + "wq"].T + dk @ params[p + "wk"].T + dv @ params[p + "wv"].T
        dx_ln, grads[p + "ln1.g"], grads[p + "ln1.b"] = _ln_backward(
            dy1, c["xhat1"], c["rstd1"], params[p + "ln1.g"]
        )
        dx = dh + dx_ln

    grads["pos"] = dx.sum(axis=0)
    grads["cls"] = dx[:, 0].sum(axis=0)
    dtok = dx[:, 1:]
    grads["patch.w"] = _wgrad(cache["patches"], dtok)
    grads["patch.b"] = dtok.sum(axis=(0, 1))
    return {name: grads[name].astype(params[name].dtype, copy=False) for name in params}


def loss_and_grads(images, labels, params, cfg: ModelConfig):
    """Mean cross-entropy over the batch and the gradient for every parameter."""
    if len(images) == 0:
        raise ValueError("batch must be nonempty")
    logits, cache = forward(images, params, cfg, keep_cache=True)
    loss, dlogits = cross_entropy(logits, np.asarray(labels))
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    return loss, backward(dlogits, cache, params, cfg)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[Optional[float]] = field(default_factory=list)


class Adam:
    def __init__(self, params, lr, beta1, beta2, eps, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and params[k].ndim == 2:
                upd = upd + self.weight_decay * params[k]
            params[k] -= (lr * upd).astype(params[k].dtype)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return 0.5 * base * (1 + math.cos(math.pi * step / total))


def train(
    images: np.ndarray,
    labels: np.ndarray,
    cfg: ModelConfig,
    tc: TrainConfig,
    params: Optional[dict] = None,
    val: Optional[tuple[np.ndarray, np.ndarray]] = None,
    callback=None,
):
    """Train on pre-normalised float images. Returns ``(params, history)``.

    Batches come from a per-epoch permutation seeded by ``tc.seed``, so a
    rerun with the same inputs produces bit-identical parameters.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("training data needs at least two classes")
    rng = RngState(tc.seed)
    if params is None:
        params = init_params(cfg, rng.spawn(1))
    params = {k: v.copy() for k, v in params.items()}
    opt = Adam(params, tc.lr, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay)
    order_rng = rng.spawn(2).generator
    n = len(images)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total = steps_per_epoch * tc.epochs
    history = TrainHistory()
    initial_loss = None
    step = 0
    for epoch in range(tc.epochs):
        perm = order_rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, tc.batch_size):
            idx = perm[start : start + tc.batch_size]
            xb, yb = images[idx], labels[idx]
            logits, cache = forward(xb, params, cfg, keep_cache=True)
            loss, dlogits = cross_entropy(logits, yb)
            if not math.isfinite(loss):
                raise NumericError("non-finite loss")
            if initial_loss is None:
                initial_loss = loss
            elif loss > 10 * initial_loss:
                raise TrainingError(
                    f"training diverged (loss {loss:.3g} > 10x initial {initial_loss:.3g}); "
                    "lower the learning rate"
                )
            grads = backward(dlogits, cache, params, cfg)
            if tc.lr:
                opt.step(params, grads, cosine_lr(tc.lr, step, total))
            step += 1
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == yb))
        history.loss.append(loss_sum / n)
        history.accuracy.append(correct / n)
        val_acc = None
        if val is not None:
            from .model import predict_logits

            val_acc = float(np.mean(np.argmax(predict_logits(val[0], params, cfg), 1) == val[1]))
        history.val_accuracy.append(val_acc)
        logger.info(
            "epoch %d loss %.4f acc %.4f val %s", epoch + 1, history.loss[-1], history.accuracy[-1], val_acc
        )
        if callback is not None:
            callback(epoch, history)
    return params, history
