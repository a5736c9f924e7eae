"""L-infinity PGD / FGSM and the cipher-aware gradient routes."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .cipher import EncryptionKey, encrypt_image
from .data import encrypt_unit, to_bytes, to_unit
from .errors import AttackError, ConfigError
from .gradcore import ops
from .gradcore.optim import ParamSet
from .gradcore.tensor import Graph, Tensor

MODES = ("whitebox", "surrogate", "bpda", "post-encryption")

LossFn = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    alpha: float = 0.01
    steps: int = 20
    mode: str = "surrogate"
    random_start: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown attack mode {self.mode!r}; choose from {MODES}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        if self.epsilon > 0 and not 0.0 < self.alpha <= self.epsilon:
            raise ConfigError("need 0 < alpha <= epsilon")

    def with_mode(self, mode: str) -> "AttackConfig":
        return replace(self, mode=mode)


@dataclass
class AdversarialBatch:
    x_adv: np.ndarray
    loss: np.ndarray          # per-sample loss at the returned point
    linf: np.ndarray          # per-sample max |x_adv - x_ref|
    encrypted: bool = False   # x_adv lives in cipher space (post-encryption mode)


@contextlib.contextmanager
def frozen(params: ParamSet):
    """Temporarily stop gradient tracking on ``params``."""
    saved = [(t, t.requires_grad) for t in params.values()]
    for t, _ in saved:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


def _eval_loss(loss_fn: LossFn, x: np.ndarray) -> np.ndarray:
    loss = loss_fn(Tensor(x, dtype=x.dtype))
    return np.atleast_1d(np.asarray(loss.data, dtype=np.float64))


def pgd(loss_fn: LossFn, x: np.ndarray, cfg: AttackConfig,
        rng: Optional[np.random.Generator] = None) -> AdversarialBatch:
    """Maximize ``loss_fn`` over the epsilon-ball around ``x`` intersected with [0, 1].

    ``loss_fn`` maps an input tensor to per-sample losses (or a scalar); the
    ascent direction is the sign of the gradient of their sum, with sign(0) = 0.
    """
    x = np.asarray(x, dtype=np.float32)
    eps = np.float32(cfg.epsilon)
    lo = np.maximum(x - eps, np.float32(0.0))
    hi = np.minimum(x + eps, np.float32(1.0))
    x_adv = x.copy()
    if cfg.random_start and cfg.epsilon > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        x_adv = np.clip(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(np.float32), lo, hi)
    if cfg.epsilon > 0:
        alpha = np.float32(cfg.alpha)
        for t in range(cfg.steps):
            xt = Tensor(x_adv, requires_grad=True)
            with Graph() as g:
                loss = loss_fn(xt)
                total = ops.sum(loss) if loss.size > 1 else loss
            if not np.all(np.isfinite(loss.data)):
                raise AttackError("non-finite attack loss", t)
            g.backward(total)
            step = alpha * np.sign(xt.grad).astype(np.float32)
            x_adv = np.clip(x_adv + step, lo, hi)
    final = _eval_loss(loss_fn, x_adv)
    if not np.all(np.isfinite(final)):
        raise AttackError("non-finite attack loss", cfg.steps)
    linf = np.abs(x_adv - x).reshape(len(x), -1).max(axis=1) if x.ndim > 1 else np.abs(x_adv - x)
    return AdversarialBatch(x_adv, final, linf)


def fgsm(loss_fn: LossFn, x: np.ndarray, epsilon: float) -> AdversarialBatch:
    """Single signed-gradient step of size ``epsilon``."""
    alpha = epsilon if epsilon > 0 else 1.0
    return pgd(loss_fn, x, AttackConfig(epsilon, alpha, 1, "whitebox", False))


def classifier_loss(model, y: np.ndarray) -> LossFn:
    """Per-sample cross-entropy of ``model`` in eval mode."""
    def fn(x: Tensor) -> Tensor:
        return ops.softmax_cross_entropy(model.forward(x, training=False), y, reduction="none")
    return fn


def cipher_through(x: Tensor, key: EncryptionKey) -> Tensor:
    """Encrypt ``x`` with an identity backward (straight-through estimator).

    The byte-domain cipher is applied to the rounded image and the sub-byte
    rounding residual is carried over unchanged, so the identity key reduces
    this map to the identity exactly.
    """
    q = to_unit(to_bytes(x.data))
    value = to_unit(encrypt_image(to_bytes(x.data), key)) + (x.data - q)
    return ops.straight_through(x, value)


def craft_for_pipeline(model, key: Optional[EncryptionKey], x: np.ndarray, y: np.ndarray,
                       cfg: AttackConfig, surrogate=None,
                       rng: Optional[np.random.Generator] = None) -> AdversarialBatch:
    """Craft adversarial examples for one batch under ``cfg.mode``.

    ``x`` is the clean batch.  All modes except ``post-encryption`` return
    clean-space examples that the caller encrypts afterwards; in
    ``post-encryption`` mode the perturbation is added to ``encrypt(x)``.
    Models are run in eval mode and their parameters are not tracked.
    """
    x = np.asarray(x, dtype=np.float32)
    mode = cfg.mode
    if mode == "surrogate" and surrogate is None:
        raise ConfigError("surrogate mode needs a surrogate model")
    if mode in ("bpda", "post-encryption") and key is None:
        raise ConfigError(f"{mode} mode needs an encryption key")

    if mode == "whitebox":
        target, fn = model, classifier_loss(model, y)
    elif mode == "surrogate":
        target, fn = surrogate, classifier_loss(surrogate, y)
    elif mode == "bpda":
        target = model
        inner = classifier_loss(model, y)
        fn = lambda xt: inner(cipher_through(xt, key))  # noqa: E731
    else:
        target, fn = model, classifier_loss(model, y)
        x = encrypt_unit(x, key)

    with frozen(target.params):
        adv = pgd(fn, x, cfg, rng)
    adv.encrypted = mode == "post-encryption"
    return adv
