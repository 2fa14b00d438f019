"""Conditioning-space optimization of generated image queries.

Minimizes the sum of a VLM cross-entropy term (push the yes-probability up),
a detector suppression term (floored below a small confidence) and a
latent-norm regularizer, using adaptive-moment updates with linear warmup,
per-step L2 gradient clipping and a damped step size on the latent block.
The best-loss iterate over the whole trajectory, including the unoptimized
initialization, becomes the image query.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .adapters import (
    AdapterError,
    Conditioning,
    DifferentiableDetector,
    DifferentiableGenerator,
    DifferentiableVlm,
    EmbedderAdapter,
)
from .types import Lineage, Query, stable_id


@dataclass(frozen=True)
class OptConfig:
    steps: int = 25
    base_step_size: float = 0.1
    warmup_steps: int = 3
    grad_clip_l2: float = 0.1
    latent_step_factor: float = 0.1
    det_floor: float = 0.05
    start_timestep: int = 800
    regularizer_weight: float = 1.0
    loss_clamp_eps: float = 1e-12
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        for name in ("base_step_size", "warmup_steps", "grad_clip_l2", "latent_step_factor",
                     "regularizer_weight", "loss_clamp_eps", "start_timestep"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.det_floor < 1.0:
            raise ValueError("det_floor must lie in (0, 1)")


def vlm_loss(p_yes: float, eps: float = 1e-12) -> float:
    """Cross-entropy of answering yes: -log(max(p_yes, eps))."""
    return -math.log(max(p_yes, eps))


def det_loss(p_det: float, det_floor: float = 0.05, eps: float = 1e-12) -> float:
    """Detector suppression term, zeroed below the confidence floor."""
    p = p_det if p_det >= det_floor else 0.0
    return -math.log(max(1.0 - p, eps))


def latent_reg(z: np.ndarray) -> float:
    """Squared-norm anchor (||z||^2 - d)^2 / (2d); zero at ||z||^2 = d.

    Rotation-invariant and centered on the expected squared norm of a
    standard normal latent.
    """
    z = np.asarray(z, dtype=np.float64)
    d = z.size
    return float((z @ z - d) ** 2 / (2.0 * d))


def latent_reg_grad(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    d = z.size
    return 2.0 * z * (z @ z - d) / d


def total_loss(p_yes: float, p_det: float, conditioning: Conditioning,
               cfg: OptConfig = OptConfig()) -> float:
    """VLM term + detector term + weighted latent regularizer."""
    return (
        vlm_loss(p_yes, cfg.loss_clamp_eps)
        + det_loss(p_det, cfg.det_floor, cfg.loss_clamp_eps)
        + cfg.regularizer_weight * latent_reg(conditioning.latent)
    )


def clip_gradient(g: np.ndarray, max_norm: float) -> np.ndarray:
    """Scale the full gradient to L2 norm at most max_norm."""
    norm = float(np.linalg.norm(g))
    if norm > max_norm > 0.0:
        return g * (max_norm / norm)
    return g


def loss_and_grad(vlm: DifferentiableVlm, detector: DifferentiableDetector,
                  generator: DifferentiableGenerator, conditioning: Conditioning,
                  object_name: str, cfg: OptConfig) -> tuple:
    """(loss, grad wrt flattened conditioning, p_yes, p_det).

    The analytic chain runs image-space gradients from both models through
    the generator's vector-Jacobian product and adds the regularizer
    gradient on the latent block.
    """
    x = generator.generate_vector(conditioning)
    p_yes, g_yes = vlm.p_yes_and_grad(x, object_name)
    p_det, g_det = detector.p_det_and_grad(x, object_name)
    eps = cfg.loss_clamp_eps

    grad_x = np.zeros_like(x)
    if p_yes > eps:
        grad_x += (-1.0 / p_yes) * g_yes
    if p_det >= cfg.det_floor and (1.0 - p_det) > eps:
        grad_x += (1.0 / (1.0 - p_det)) * g_det

    grad_u = generator.vjp(conditioning, grad_x)
    d_lat = conditioning.latent.size
    grad_u[:d_lat] += cfg.regularizer_weight * latent_reg_grad(conditioning.latent)
    loss = total_loss(p_yes, p_det, conditioning, cfg)
    return loss, grad_u, p_yes, p_det


@dataclass
class TrajectoryEntry:
    step: int
    conditioning: Conditioning
    p_yes: float
    p_det: float
    loss_vlm: float
    loss_det: float
    loss_total: float
    image_id: Optional[str] = None
    rejected: bool = False

    def to_dict(self) -> dict:
        d = {
            "step": self.step,
            "latent": [float(v) for v in self.conditioning.latent],
            "text_conditionings": [[float(v) for v in t] for t in self.conditioning.text_conditionings],
            "p_yes": self.p_yes,
            "p_det": self.p_det,
            "loss_vlm": self.loss_vlm,
            "loss_det": self.loss_det,
            "loss_total": self.loss_total,
        }
        if self.image_id is not None:
            d["image_id"] = self.image_id
        if self.rejected:
            d["rejected"] = True
        return d


@dataclass
class Trajectory:
    entries: list = field(default_factory=list)

    @property
    def best_index(self) -> int:
        """Index of the lowest total loss; the initialization is eligible."""
        losses = [e.loss_total for e in self.entries]
        return int(np.argmin(losses))

    @property
    def best(self) -> TrajectoryEntry:
        return self.entries[self.best_index]

    def to_dict(self) -> dict:
        return {
            "best_index": self.best_index,
            "entries": [e.to_dict() for e in self.entries],
        }

    def loss_curve_text(self) -> str:
        """Columnar dump of the loss curve for external plotting."""
        lines = ["step\tp_yes\tp_det\tloss_vlm\tloss_det\tloss_total"]
        for e in self.entries:
            lines.append(
                f"{e.step}\t{e.p_yes:.6f}\t{e.p_det:.6f}\t{e.loss_vlm:.6f}"
                f"\t{e.loss_det:.6f}\t{e.loss_total:.6f}"
            )
        return "\n".join(lines) + "\n"


def _evaluate(vlm, detector, generator, conditioning, object_name, cfg) -> TrajectoryEntry:
    x = generator.generate_vector(conditioning)
    p_yes, _ = vlm.p_yes_and_grad(x, object_name)
    p_det, _ = detector.p_det_and_grad(x, object_name)
    lv = vlm_loss(p_yes, cfg.loss_clamp_eps)
    ld = det_loss(p_det, cfg.det_floor, cfg.loss_clamp_eps)
    lt = lv + ld + cfg.regularizer_weight * latent_reg(conditioning.latent)
    return TrajectoryEntry(
        step=0, conditioning=conditioning.copy(), p_yes=p_yes, p_det=p_det,
        loss_vlm=lv, loss_det=ld, loss_total=lt,
    )


def optimize_conditioning(vlm: DifferentiableVlm, detector: DifferentiableDetector,
                          generator: DifferentiableGenerator, init: Conditioning,
                          object_name: str, cfg: OptConfig,
                          on_entry: Optional[Callable] = None) -> Trajectory:
    """Run the update schedule from an explicit initialization.

    Step 0 records the unoptimized initialization. A step whose new iterate
    produces a non-finite loss is rejected: parameters and moments are
    restored and the entry is recorded with the restored values.
    """
    d_lat = init.latent.size
    text_dims = [t.size for t in init.text_conditionings]
    u = init.flatten()
    scale = np.concatenate([
        np.full(d_lat, cfg.latent_step_factor),
        np.ones(sum(text_dims)),
    ])
    m = np.zeros_like(u)
    v = np.zeros_like(u)

    def cond_at(vec: np.ndarray) -> Conditioning:
        return Conditioning.unflatten(vec, d_lat, text_dims, init.init_prompt_id)

    traj = Trajectory()
    entry = _evaluate(vlm, detector, generator, cond_at(u), object_name, cfg)
    entry.step = 0
    if on_entry:
        on_entry(entry)
    traj.entries.append(entry)

    for t in range(1, cfg.steps + 1):
        _, grad, _, _ = loss_and_grad(vlm, detector, generator, cond_at(u), object_name, cfg)
        grad = clip_gradient(grad, cfg.grad_clip_l2)
        m_prev, v_prev, u_prev = m.copy(), v.copy(), u.copy()
        m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad
        v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * grad * grad
        m_hat = m / (1.0 - cfg.adam_beta1 ** t)
        v_hat = v / (1.0 - cfg.adam_beta2 ** t)
        lr = cfg.base_step_size * min(t / cfg.warmup_steps, 1.0) if cfg.warmup_steps else cfg.base_step_size
        u = u - lr * scale * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)

        entry = _evaluate(vlm, detector, generator, cond_at(u), object_name, cfg)
        entry.step = t
        if not math.isfinite(entry.loss_total):
            m, v, u = m_prev, v_prev, u_prev
            entry = _evaluate(vlm, detector, generator, cond_at(u), object_name, cfg)
            entry.step = t
            entry.rejected = True
        if on_entry:
            on_entry(entry)
        traj.entries.append(entry)
    return traj


def init_conditioning_for_prompt(generator, prompt_text: str, latent_dim: int, seed: int,
                                 init_prompt_id: Optional[str] = None) -> Conditioning:
    """Standard-normal latent plus the generator's encoding of the prompt."""
    rng = np.random.default_rng(seed)
    latent = rng.normal(0.0, 1.0, latent_dim)
    texts = generator.encode_prompt(prompt_text)
    return Conditioning(latent, texts, init_prompt_id)


def optimize_query(suite, init_prompt: Query, cfg: OptConfig, *, store=None, seed: int = 0,
                   init: Optional[Conditioning] = None) -> tuple:
    """Optimize one text prompt into an image query.

    Returns ``(query, trajectory)`` where the query carries the best-loss
    image along the trajectory, tagged origin "optimized" with the prompt it
    was seeded from. When a run store is given, every step image is
    registered through the cache and the trajectory records its id.
    """
    if init_prompt.kind != "text":
        raise AdapterError("optimization initializes from a text prompt")
    vlm, detector, generator, embedder = suite.vlm, suite.detector, suite.generator, suite.embedder
    for role, adapter, proto in (("vlm", vlm, DifferentiableVlm),
                                 ("detector", detector, DifferentiableDetector),
                                 ("generator", generator, DifferentiableGenerator)):
        if not isinstance(adapter, proto):
            raise AdapterError(f"{role} adapter is not differentiable; cannot optimize")

    if init is None:
        init = init_conditioning_for_prompt(
            generator, init_prompt.payload, generator.latent_dim, seed, init_prompt.id
        )
    object_name = init_prompt.object.name

    def register(entry: TrajectoryEntry) -> None:
        if store is None:
            return
        data = generator.generate(entry.conditioning)
        rec = store.put_image(data, Lineage("generated", parent_query_id=init_prompt.id))
        entry.image_id = rec.id

    traj = optimize_conditioning(vlm, detector, generator, init, object_name, cfg, on_entry=register)

    best = traj.best
    data = generator.generate(best.conditioning)
    if store is not None:
        record = store.put_image(data, Lineage("generated", parent_query_id=init_prompt.id))
        payload = record.content_hash
    else:
        from .store import content_digest, decode_image
        payload = content_digest(decode_image(data))
    query = Query(
        id=stable_id("opt-query", init_prompt.id, payload),
        object=init_prompt.object,
        kind="image",
        payload=payload,
        embedding=np.asarray(embedder.embed_image(data), dtype=np.float64),
        origin="optimized",
        init_prompt_id=init_prompt.id,
    )
    return query, traj
