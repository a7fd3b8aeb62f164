"""Black-box scattering-parameter attack.

The optimization variables are the per-mesh blend coefficients (alpha for
the specular coefficient, beta for the diffuse one). A coefficient of 0
keeps the object's material, 1 replaces it with the background material.
Each mini-batch of meshes gets one forward-difference gradient (all of its
coefficients nudged by ``fd_step`` together), which is clipped and fed to
an Adam *ascent* step on the true-class cross-entropy averaged over views.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .classifier import ClassifierModel, batch_cross_entropy, forward_batch
from .errors import ConfigError, FormatError, ValidationError
from .render import RenderOptions, ViewSet
from .scene import BlendCoefficients, ScatteringParams, Scene, component_mask, partition_batches

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class AttackConfig:
    fd_step: float = 0.001
    lr: float = 0.001
    epochs: int = 25
    batch_denominator: int = 20
    clip_bound: float = 1.0
    lr_drop_thresholds: tuple[float, ...] = (2.0, 4.0)
    view_azimuths_deg: tuple[float, ...] = tuple(float(a) for a in range(0, 360, 10))
    elevation_deg: float = 15.0
    target_class: int = 0
    seed: int = 0
    component_restriction: tuple[str, ...] | None = None
    per_parameter: bool = False

    def __post_init__(self):
        if not self.fd_step > 0:
            raise ConfigError("fd_step must be > 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.clip_bound > 0:
            raise ConfigError("clip_bound must be > 0")
        if list(self.lr_drop_thresholds) != sorted(self.lr_drop_thresholds):
            raise ConfigError("lr_drop_thresholds must be ascending")
        if not self.view_azimuths_deg:
            raise ConfigError("at least one view azimuth is required")
        object.__setattr__(self, "lr_drop_thresholds", tuple(float(t) for t in self.lr_drop_thresholds))
        object.__setattr__(self, "view_azimuths_deg", tuple(float(a) for a in self.view_azimuths_deg))
        if self.component_restriction is not None:
            object.__setattr__(self, "component_restriction", tuple(self.component_restriction))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drop_thresholds"] = list(self.lr_drop_thresholds)
        d["view_azimuths_deg"] = list(self.view_azimuths_deg)
        if self.component_restriction is not None:
            d["component_restriction"] = list(self.component_restriction)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for key in ("lr_drop_thresholds", "view_azimuths_deg", "component_restriction"):
            if known.get(key) is not None:
                known[key] = tuple(known[key])
        return cls(**known)


# --------------------------------------------------------------------------
# blending

def blend_params(object_params: ScatteringParams, background_params: ScatteringParams,
                 coeffs: BlendCoefficients, delta: float = 0.0) -> ScatteringParams:
    """Pull f_s toward the background by ``alpha + delta`` and f_d by
    ``beta + delta`` (both clamped to [0, 1]); f_r, f_b pass through."""
    a = min(max(coeffs.alpha + delta, 0.0), 1.0)
    b = min(max(coeffs.beta + delta, 0.0), 1.0)
    return ScatteringParams((1.0 - a) * object_params.f_s + a * background_params.f_s,
                            (1.0 - b) * object_params.f_d + b * background_params.f_d,
                            object_params.f_r, object_params.f_b)


def blend_arrays(object_params: np.ndarray, background: np.ndarray, blend: np.ndarray) -> np.ndarray:
    """Vectorized blend for an (n, 4) parameter array and (n, 2) coefficients
    (already offset and clamped)."""
    out = np.array(object_params, dtype=np.float64, copy=True)
    a, b = blend[:, 0], blend[:, 1]
    out[:, 0] = (1.0 - a) * object_params[:, 0] + a * background[0]
    out[:, 1] = (1.0 - b) * object_params[:, 1] + b * background[1]
    return out


def blend_table(scene: Scene, blend: np.ndarray) -> np.ndarray:
    """Renderer parameter table (meshes, ground, pad row) for a blend."""
    bg = scene.background_params.as_array()
    obj = blend_arrays(scene.param_array, bg, np.clip(np.asarray(blend, dtype=np.float64), 0.0, 1.0))
    return np.vstack([obj, bg[None, :], np.array([[1.0, 0.0, 1.0, 0.0]])])


# --------------------------------------------------------------------------
# loss over views

class AttackObjective:
    """Average true-class cross-entropy over a fixed set of views.

    Each distinct azimuth is traced once; later evaluations only re-shade.
    """

    def __init__(self, scene: Scene, classifier: ClassifierModel, views, options: RenderOptions,
                 target_class: int, workers: int = 1):
        if not len(views):
            raise ConfigError("average_loss needs at least one view")
        if not 0 <= target_class < classifier.n_classes:
            raise ConfigError(f"target class {target_class} out of range")
        self.scene = scene
        self.classifier = classifier
        self.target_class = int(target_class)
        self.views = ViewSet(scene, views, options, workers)
        self.evaluations = 0

    def images(self, blend: np.ndarray) -> np.ndarray:
        return self.views.images(blend_table(self.scene, blend))

    def losses(self, blend: np.ndarray) -> np.ndarray:
        probs = forward_batch(self.classifier, self.images(blend))
        return batch_cross_entropy(probs, self.target_class)

    def __call__(self, blend: np.ndarray) -> float:
        self.evaluations += 1
        return float(np.mean(self.losses(blend)))


def average_loss(scene: Scene, blend: np.ndarray, classifier: ClassifierModel, views,
                 options: RenderOptions, target_class: int, workers: int = 1) -> float:
    return AttackObjective(scene, classifier, views, options, target_class, workers)(blend)


# --------------------------------------------------------------------------
# optimizer pieces

@dataclass
class AttackState:
    blend: np.ndarray                 # (n, 2) alpha, beta
    adam_m: np.ndarray
    adam_v: np.ndarray
    coeff_steps: np.ndarray           # per-coefficient Adam step counts
    step_count: int = 0
    loss_history: list[dict] = field(default_factory=list)
    current_lr: float = 0.001
    thresholds_consumed: int = 0

    @classmethod
    def initial(cls, blend: np.ndarray, lr: float) -> "AttackState":
        blend = np.clip(np.array(blend, dtype=np.float64), 0.0, 1.0)
        return cls(blend, np.zeros_like(blend), np.zeros_like(blend),
                   np.zeros(blend.shape, dtype=np.int64), 0, [], float(lr), 0)

    def copy(self) -> "AttackState":
        return replace(self, blend=self.blend.copy(), adam_m=self.adam_m.copy(), adam_v=self.adam_v.copy(),
                       coeff_steps=self.coeff_steps.copy(), loss_history=list(self.loss_history))


def perturb(blend: np.ndarray, batch: np.ndarray, delta: float, column=None) -> np.ndarray:
    out = blend.copy()
    if column is None:
        out[batch] = np.clip(out[batch] + delta, 0.0, 1.0)
    else:
        out[batch, column] = np.clip(out[batch, column] + delta, 0.0, 1.0)
    return out


def estimate_batch_gradient(loss_fn: Callable[[np.ndarray], float], blend: np.ndarray, batch,
                            fd_step: float, per_parameter: bool = False, loss_before: float | None = None):
    """Forward difference ``(loss(blend + delta on batch) - loss(blend)) / delta``.

    Returns ``(g, loss_before)``. With ``per_parameter`` every coefficient of
    the batch is differenced on its own and ``g`` has shape (len(batch), 2);
    otherwise ``g`` is one scalar shared by the whole batch.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise ValidationError("gradient batch must not be empty")
    if loss_before is None:
        loss_before = loss_fn(blend)
    if not per_parameter:
        loss_now = loss_fn(perturb(blend, batch, fd_step))
        return (loss_now - loss_before) / fd_step, loss_before
    g = np.zeros((batch.size, 2))
    for i, mesh in enumerate(batch):
        for c in (0, 1):
            g[i, c] = (loss_fn(perturb(blend, batch[i:i + 1], fd_step, c)) - loss_before) / fd_step
    return g, loss_before


def clip_gradient(g, epsilon: float):
    if not epsilon > 0:
        raise ConfigError("clip bound must be > 0")
    return np.clip(g, -epsilon, epsilon) if np.ndim(g) else min(max(float(g), -epsilon), epsilon)


def adam_step(state: AttackState, batch, g, lr: float, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> AttackState:
    """Adam ascent on the batch's coefficients, bias-corrected by each
    coefficient's own step count, clamped to [0, 1]."""
    batch = np.asarray(batch, dtype=np.int64)
    new = state.copy()
    g = np.broadcast_to(np.asarray(g, dtype=np.float64), (batch.size, 2))
    t = new.coeff_steps[batch] + 1
    m = beta1 * new.adam_m[batch] + (1.0 - beta1) * g
    v = beta2 * new.adam_v[batch] + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new.adam_m[batch] = m
    new.adam_v[batch] = v
    new.coeff_steps[batch] = t
    new.blend[batch] = np.clip(new.blend[batch] + lr * m_hat / (np.sqrt(v_hat) + eps), 0.0, 1.0)
    new.step_count += 1
    return new


def schedule_lr(lr: float, avg_loss: float, thresholds, consumed: int) -> tuple[float, int]:
    """Divide ``lr`` by 10 for every not-yet-consumed threshold the epoch
    loss now exceeds. Returns ``(lr, consumed)``."""
    thresholds = list(thresholds)
    while consumed < len(thresholds) and avg_loss > thresholds[consumed]:
        lr /= 10.0
        consumed += 1
    return lr, consumed


# --------------------------------------------------------------------------
# snapshots

@dataclass
class ParameterSnapshot:
    blend: np.ndarray
    config: AttackConfig
    loss_history: list[dict]
    scene_hash: str
    epochs_completed: int = 0
    kind: str = "attack"            # "attack" | "random"
    format_version: int = SNAPSHOT_VERSION

    def to_dict(self) -> dict:
        return {"format_version": self.format_version, "kind": self.kind, "scene_hash": self.scene_hash,
                "config": self.config.to_dict(), "epochs_completed": self.epochs_completed,
                "blend": [{"alpha": float(a), "beta": float(b)} for a, b in self.blend],
                "loss_history": self.loss_history}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "avg_loss", "lr"])
            for row in self.loss_history:
                w.writerow([row["epoch"], repr(row["avg_loss"]), repr(row["lr"])])

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterSnapshot":
        if d.get("format_version") != SNAPSHOT_VERSION:
            raise FormatError(f"unsupported snapshot format version {d.get('format_version')!r}")
        try:
            blend = np.array([[r["alpha"], r["beta"]] for r in d["blend"]], dtype=np.float64).reshape(-1, 2)
            return cls(blend, AttackConfig.from_dict(d["config"]), list(d["loss_history"]), d["scene_hash"],
                       int(d.get("epochs_completed", 0)), d.get("kind", "attack"))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"snapshot: {exc}") from None

    @classmethod
    def load(cls, path) -> "ParameterSnapshot":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(doc)

    def apply(self, scene: Scene) -> Scene:
        if scene.fingerprint() != self.scene_hash:
            raise ValidationError("snapshot was produced for a different scene")
        return scene.with_blend(self.blend)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# outer loop

def attack_indices(scene: Scene, config: AttackConfig) -> np.ndarray:
    if config.component_restriction is None:
        return np.arange(scene.n_meshes)
    return component_mask(scene, config.component_restriction)


def iterate_attack(scene: Scene, objective: Callable[[np.ndarray], float], config: AttackConfig,
                   initial_blend: np.ndarray | None = None) -> Iterator[AttackState]:
    """Yield the initial state, then the state after every epoch."""
    state = AttackState.initial(scene.blend if initial_blend is None else initial_blend, config.lr)
    yield state.copy()
    if config.epochs == 0:
        return
    indices = attack_indices(scene, config)
    if indices.size == 0:
        raise ConfigError("component restriction selects no meshes")
    m = min(config.batch_denominator, indices.size)
    schedule = partition_batches(indices.size, m, config.seed)
    batches = [indices[b] for b in schedule]
    for epoch in range(1, config.epochs + 1):
        lr = state.current_lr
        losses = []
        for batch in batches:
            g, before = estimate_batch_gradient(objective, state.blend, batch, config.fd_step,
                                                config.per_parameter)
            losses.append(before)
            state = adam_step(state, batch, clip_gradient(g, config.clip_bound), lr)
        avg = float(np.mean(losses))
        state.loss_history.append({"epoch": epoch, "avg_loss": avg, "lr": lr})
        state.current_lr, state.thresholds_consumed = schedule_lr(
            lr, avg, config.lr_drop_thresholds, state.thresholds_consumed)
        log.info("epoch %d avg_loss %.6f lr %g", epoch, avg, lr)
        yield state.copy()


def _snapshot(scene: Scene, state: AttackState, config: AttackConfig, epochs: int) -> ParameterSnapshot:
    return ParameterSnapshot(state.blend.copy(), replace(config, epochs=epochs), list(state.loss_history),
                             scene.fingerprint(), epochs)


def run_attack(scene: Scene, classifier: ClassifierModel, config: AttackConfig,
               options: RenderOptions | None = None, workers: int = 1,
               initial_blend: np.ndarray | None = None, objective=None,
               progress: Callable[[dict], None] | None = None) -> ParameterSnapshot:
    """Optimize the blend coefficients for ``config.epochs`` epochs."""
    if objective is None:
        options = options or RenderOptions(elevation_deg=config.elevation_deg)
        objective = AttackObjective(scene, classifier, config.view_azimuths_deg, options,
                                    config.target_class, workers)
    state = None
    for state in iterate_attack(scene, objective, config, initial_blend):
        if progress and state.loss_history:
            progress(state.loss_history[-1])
    return _snapshot(scene, state, config, config.epochs)


def run_attack_captures(scene: Scene, objective, config: AttackConfig, capture_epochs,
                        initial_blend: np.ndarray | None = None) -> dict[int, ParameterSnapshot]:
    """One run of ``max(capture_epochs)`` epochs, snapshotting at each listed
    epoch count (the loop never looks ahead, so each capture equals a
    standalone run of that length)."""
    wanted = sorted(set(int(e) for e in capture_epochs))
    if not wanted or wanted[0] < 0:
        raise ConfigError("capture epochs must be non-negative")
    full = replace(config, epochs=wanted[-1])
    out = {}
    for epoch, state in enumerate(iterate_attack(scene, objective, full, initial_blend)):
        if epoch in wanted:
            out[epoch] = _snapshot(scene, state, config, epoch)
    return out


def random_baseline(scene: Scene, config: AttackConfig, seed: int) -> ParameterSnapshot:
    """Uniform [0, 1] blend coefficients, packaged like an attack result."""
    blend = np.random.default_rng(seed).uniform(0.0, 1.0, size=(scene.n_meshes, 2))
    return ParameterSnapshot(blend, replace(config, epochs=0, seed=int(seed)), [], scene.fingerprint(), 0, "random")
