"""Training loop: Adam over the weighted objective, with deterministic
logs and resumable checkpoints.

Every per-step decision (patch order, augmentation draws) is a pure
function of (seed, step), so a resumed run reproduces the exact loss
trace of an unbroken one. Batch size is one patch per step.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import LOSS_CSV_HEADER, LossWeights, total_loss
from .model import ModelConfig, ModelGraph, build_model, load_blob, load_parameters, save_blob
from .phantom import LabelVolume, derive_regions
from .pipeline import augment, build_grid, extract_patches, normalize


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "MMTSN"
    patch_extents: tuple = (16, 16, 16)
    depth: int = 3
    base_channels: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 300
    seed: int = 0
    grad_clip_norm: float | None = 5.0  # None disables clipping
    augment: bool = False
    checkpoint_interval: int = 100  # 0 = final checkpoint only

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        self.patch_extents = tuple(int(e) for e in self.patch_extents)

    def model_config(self):
        return ModelConfig(depth=self.depth, base_channels=self.base_channels)

    def to_dict(self):
        d = asdict(self)
        d["patch_extents"] = list(self.patch_extents)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def init_like(cls, params):
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
        )


def adam_step(params, state: AdamState, config: TrainConfig):
    """One Adam update with bias correction; gradients are consumed."""
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        grads[name] = g

    if config.grad_clip_norm is not None:
        norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
        if norm > config.grad_clip_norm:
            scale = np.float32(config.grad_clip_norm / norm)
            grads = {k: g * scale for k, g in grads.items()}

    state.step += 1
    bc1 = 1.0 - config.beta1**state.step
    bc2 = 1.0 - config.beta2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
        p.data -= config.learning_rate * update
        p.zero_grad()


def _schedule(seed, step, n_slots):
    """Slot index for a step under per-epoch shuffled enumeration."""
    epoch, idx = divmod(step, n_slots)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0, epoch)))
    return int(rng.permutation(n_slots)[idx])


def _augment_seed(seed, step):
    return (seed * 1_000_003 + step) % (2**63)


def save_checkpoint(path, graph: ModelGraph, state: AdamState, config: TrainConfig):
    named = {name: t.data for name, t in graph.params.items()}
    for key, moments in (("adam.m", state.m), ("adam.v", state.v)):
        for name, arr in moments.items():
            named[f"{key}.{name}"] = arr
    meta = {
        "variant": graph.variant,
        "depth": config.depth,
        "base_channels": config.base_channels,
        "patch_extents": list(config.patch_extents),
        "step": state.step,
        "seed": config.seed,
    }
    save_blob(path, named, meta)


def load_checkpoint(path, config: TrainConfig):
    """Rebuild graph and optimizer state; the config must match the file."""
    named, meta = load_blob(path)
    for key, want in (
        ("variant", config.variant),
        ("depth", config.depth),
        ("base_channels", config.base_channels),
    ):
        if meta[key] != want:
            raise TrainingError(
                f"checkpoint {key}={meta[key]!r} does not match config {key}={want!r}"
            )
    graph = build_model(config.variant, config.model_config(), seed=config.seed)
    params = {k: v for k, v in named.items() if not k.startswith("adam.")}
    load_parameters(graph, params)
    state = AdamState.init_like(graph.params)
    state.step = int(meta["step"])
    for name in graph.params:
        state.m[name][...] = named[f"adam.m.{name}"]
        state.v[name][...] = named[f"adam.v.{name}"]
    return graph, state, meta


def _format_row(step, components):
    cols = [str(step)] + [
        repr(float(components[k]))
        for k in ("loss_bt", "loss_wt", "loss_tc", "loss_et", "loss_sc", "total")
    ]
    return ",".join(cols)


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    steps_run: int
    final_components: dict


def train(config: TrainConfig, cases, out_dir, graph=None, resume_from=None) -> TrainResult:
    """Optimize on a phantom set; returns paths to checkpoint and loss log.

    `cases` is a sequence of (MultiModalVolume, LabelVolume). Volumes are
    intensity-normalized once, then patches are enumerated per the sliding
    grid and visited in per-epoch shuffled order. A non-finite loss aborts
    with the last periodic checkpoint left in place.
    """
    os.makedirs(out_dir, exist_ok=True)
    checkpoint_path = os.path.join(out_dir, "checkpoint")
    log_path = os.path.join(out_dir, "loss_log.csv")

    slots = []
    for volume, labels in cases:
        norm = normalize(volume)
        grid = build_grid(norm.extents, config.patch_extents)
        for img, lbl in extract_patches(norm, labels, grid):
            slots.append((img, lbl))
    if not slots:
        raise TrainingError("no training patches available")

    state = None
    if resume_from is not None:
        graph, state, _ = load_checkpoint(resume_from, config)
    if graph is None:
        graph = build_model(config.variant, config.model_config(), seed=config.seed)
    if state is None:
        state = AdamState.init_like(graph.params)

    components = {}
    with open(log_path, "w", encoding="ascii") as log:
        log.write(LOSS_CSV_HEADER + "\n")
        while state.step < config.steps:
            step = state.step  # 0-based position of the upcoming update
            img, lbl = slots[_schedule(config.seed, step, len(slots))]
            if config.augment:
                img, lbl = augment(img, lbl, _augment_seed(config.seed, step))
            regions = derive_regions(LabelVolume(lbl))

            graph.zero_grads()
            outputs = graph.forward(img)
            loss, components = total_loss(outputs, lbl, regions, config.weights)
            if not np.isfinite(components["total"]):
                raise TrainingError(
                    f"non-finite loss at step {step}; last checkpoint retained"
                )
            loss.backward()
            adam_step(graph.params, state, config)

            log.write(_format_row(state.step, components) + "\n")
            if config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
                save_checkpoint(checkpoint_path, graph, state, config)

    save_checkpoint(checkpoint_path, graph, state, config)
    return TrainResult(
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        steps_run=state.step,
        final_components=components,
    )
