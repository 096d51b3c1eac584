"""White-box FGSM/PGD attacks and label-free spatial augmentation.

Attacks work on batches ``x`` of shape (B, C, D, H, W) with labels ``y`` (B,).
The attacked loss is the model's binary cross-entropy, summed over the batch so
each sample's input gradient is independent of its batch mates.
"""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from hive3d import model as cnn
from hive3d.errors import ConfigError, NumericError
from hive3d.tensor import Tape, Tensor, bce_with_logits

EPS_SCALE = 8.0


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    alpha: float = 0.01
    steps: int = 1
    clamp_range: tuple = (0.0, 1.0)

    def validate(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("alpha must be > 0")
        lo, hi = self.clamp_range
        if not lo < hi:
            raise ConfigError(f"empty clamp range {self.clamp_range}")

    def scaled(self, factor=EPS_SCALE):
        return AttackConfig(self.epsilon / factor, self.alpha / factor, self.steps, self.clamp_range)


REFERENCE_FGSM = AttackConfig(epsilon=1.19)
REFERENCE_PGD = AttackConfig(epsilon=1.225, alpha=1.1, steps=40)
# desk-scale regime where the perturbation does not saturate the [0, 1] range
SCALED_FGSM = REFERENCE_FGSM.scaled()
SCALED_PGD = REFERENCE_PGD.scaled()


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation: float = 18.0
    max_shear: float = 11.0
    zoom_range: tuple = (0.75, 1.0)
    noise_sigma: float = 0.17
    seed: int = 0


IDENTITY_AUGMENT = AugmentConfig(0.0, 0.0, (1.0, 1.0), 0.0)


def input_gradient(params, x, y, tied_depth=False):
    """d(sum of BCE)/dx for a batch, as float32 array.

    With ``tied_depth`` the gradient is summed over the depth axis and
    broadcast back, i.e. the gradient w.r.t. one frame replicated along depth.
    """
    frozen = params.frozen()
    xt = Tensor(np.ascontiguousarray(x, dtype=np.float32), requires_grad=True)
    with Tape() as tape:
        loss = bce_with_logits(cnn.logits(frozen, xt), y, reduction="sum")
    tape.backward(loss)
    g = xt.grad
    if g is None:
        g = np.zeros_like(xt.data)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite input gradient")
    if tied_depth:
        g = np.broadcast_to(g.sum(axis=2, keepdims=True, dtype=np.float64), g.shape).astype(np.float32)
    return g


def _finalize(x, delta, clamp_range):
    """``clip(x + delta)`` rounded to float32 without leaving the delta's l-inf ball."""
    lo, hi = clamp_range
    x64 = x.astype(np.float64)
    bound = np.abs(delta)
    out = np.clip(x64 + delta, lo, hi).astype(np.float32)
    over = np.abs(out.astype(np.float64) - x64) > bound
    if over.any():
        out[over] = np.nextafter(out[over], x[over])
    return out


def fgsm_attack(params, x, y, cfg, tied_depth=False):
    """One signed-gradient step of size epsilon: clip(x + eps * sign(grad_x L))."""
    cfg.validate()
    x = np.asarray(x, dtype=np.float32)
    g = input_gradient(params, x, y, tied_depth)
    return _finalize(x, cfg.epsilon * np.sign(g).astype(np.float64), cfg.clamp_range)


def pgd_attack(params, x, y, cfg, stop_at_fixed_point=True, tied_depth=False):
    """Projected signed-gradient ascent from x (no random start).

    Each iterate satisfies ``|x_t - x| <= epsilon`` and lies in the clamp range.
    A sample whose iterate stops changing has reached a fixed point of the
    (deterministic) update, so it is frozen; the result is identical to running
    every step.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y).reshape(-1)
    x64 = x.astype(np.float64)
    cur = x.copy()
    active = np.arange(len(x))
    for _ in range(cfg.steps):
        if active.size == 0:
            break
        g = input_gradient(params, cur[active], y[active], tied_depth)
        offset = cur[active].astype(np.float64) - x64[active]
        delta = np.clip(offset + cfg.alpha * np.sign(g).astype(np.float64), -cfg.epsilon, cfg.epsilon)
        nxt = _finalize(x[active], delta, cfg.clamp_range)
        if stop_at_fixed_point:
            moved = np.any((nxt != cur[active]).reshape(len(active), -1), axis=1)
            cur[active] = nxt
            active = active[moved]
        else:
            cur[active] = nxt
    return cur


def _affine_matrix(rotation_deg, shear_deg, zoom):
    """Output->input coordinate map (row, col) for rotate * shear * center-crop zoom."""
    th = np.deg2rad(rotation_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shear = np.array([[1.0, 0.0], [np.tan(np.deg2rad(shear_deg)), 1.0]])
    forward = rot @ shear
    return zoom * np.linalg.inv(forward)


def sample_noise(rng, shape, sigma):
    if sigma == 0:
        return np.zeros(shape)
    return rng.normal(0.0, sigma, size=shape)


def augment(x, cfg, rng=None):
    """Random affine (shared by every frame) plus Gaussian noise, clamped to [0, 1].

    ``x`` is one sequence (C, D, H, W) or a batch (B, C, D, H, W); each sample
    of a batch draws its own transform. Labels are never consulted.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 5:
        return np.stack([augment(s, cfg, rng) for s in x])
    rot = rng.uniform(-cfg.max_rotation, cfg.max_rotation) if cfg.max_rotation else 0.0
    shear = rng.uniform(-cfg.max_shear, cfg.max_shear) if cfg.max_shear else 0.0
    lo, hi = cfg.zoom_range
    zoom = rng.uniform(lo, hi) if hi > lo else lo
    out = x.astype(np.float64)
    if rot or shear or zoom != 1.0:
        m = _affine_matrix(rot, shear, zoom)
        h, w = x.shape[-2:]
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        offset = center - m @ center
        flat = out.reshape(-1, h, w)
        for i in range(flat.shape[0]):
            flat[i] = ndimage.affine_transform(flat[i], m, offset=offset, order=1, mode="constant", cval=1.0)
        out = flat.reshape(x.shape)
    out = out + sample_noise(rng, x.shape, cfg.noise_sigma)
    return np.clip(out, 0.0, 1.0).astype(np.float32)
