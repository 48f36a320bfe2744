"""Gradient-descent fitting over 3-frame samples and online refinement on a stream."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import diffengine as de
from .losses import LossWeights, total_loss
from .motion import NEXT, PREV, SequenceSample
from .predictors import DirectModel, middle_frame_id, pair_id

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Non-finite loss or a tripped divergence guard; carries the per-term losses."""

    def __init__(self, message: str, terms: dict | None = None):
        super().__init__(message if terms is None else f"{message}; terms={terms}")
        self.terms = terms or {}
        self.trace: list = []  # steps completed before the failure, when raised by fit


@dataclass
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 0
    seed: int = 0
    refine_steps: int = 20
    reset_policy: str = "carry"
    frozen: tuple = ()  # parameter-name prefixes excluded from updates
    lr_scale: dict = field(default_factory=dict)  # parameter-name prefix -> lr multiplier
    schedule: str = "constant"  # "constant" | "cosine" (decays to lr_floor * lr over ``steps``)
    lr_floor: float = 0.01
    motion_model: bool = True
    divergence_factor: float = 10.0
    divergence_patience: int = 50

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0 or self.refine_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0 <= self.lr_floor <= 1:
            raise ValueError("lr_floor must lie in [0, 1]")
        if self.reset_policy not in ("carry", "reset"):
            raise ValueError(f"unknown reset policy {self.reset_policy!r}")
        self.frozen = tuple(self.frozen)
        self.lr_scale = dict(self.lr_scale)
        if any(not v > 0 for v in self.lr_scale.values()):
            raise ValueError("lr multipliers must be positive")

    def lr_for(self, name: str) -> float:
        """Base rate times the multiplier of the longest matching prefix."""
        best = max((p for p in self.lr_scale if name.startswith(p)), key=len, default=None)
        return self.lr * (1.0 if best is None else self.lr_scale[best])

    def decay(self, step: int) -> float:
        """Learning-rate factor for ``step`` of a ``steps``-long run."""
        if self.schedule == "constant" or self.steps <= 1:
            return 1.0
        c = 0.5 * (1.0 + np.cos(np.pi * step / (self.steps - 1)))
        return self.lr_floor + (1.0 - self.lr_floor) * c


class SGD:
    def __init__(self, lr: float, lr_of: Callable[[str], float] | None = None):
        self.lr = lr
        self.lr_of = lr_of or (lambda name: self.lr)
        self.factor = 1.0

    def step(self, params: de.ParamSet, grads: dict) -> None:
        for k, g in grads.items():
            params[k] = params[k] - self.factor * self.lr_of(k) * g


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 lr_of: Callable[[str], float] | None = None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.lr_of = lr_of or (lambda name: self.lr)
        self.factor = 1.0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: de.ParamSet, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] = params[k] - self.factor * self.lr_of(k) * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.lr, config.lr_for)
    return Adam(config.lr, config.beta1, config.beta2, config.eps, config.lr_for)


@dataclass
class StepResult:
    loss: float
    terms: dict


def _trainable(model: DirectModel, config: TrainConfig, names: Iterable[str]) -> list[str]:
    return [n for n in names if not any(n.startswith(p) for p in config.frozen)]


def sample_param_names(model: DirectModel, sample: SequenceSample) -> list[str]:
    """Parameters a sample's loss can touch."""
    prefixes = (f"depth/{middle_frame_id(sample)}", f"ego/{pair_id(sample, PREV)}", f"ego/{pair_id(sample, NEXT)}",
                f"obj/{pair_id(sample, PREV)}/", f"obj/{pair_id(sample, NEXT)}/", "prior/")
    return [n for n in model.params.names() if n.startswith(prefixes)]


def train_step(sample: SequenceSample, model: DirectModel, config: TrainConfig, weights: LossWeights,
               optimizer=None) -> StepResult:
    """One loss evaluation, backward pass and parameter update (in place)."""
    optimizer = optimizer or make_optimizer(config)
    model.register_sample(sample)
    names = sample_param_names(model, sample)
    tape = de.Tape()
    leaves = {n: tape.variable(model.params[n]) for n in names}
    values = dict(leaves)
    res = total_loss(sample, model, weights, values=values, motion_model=config.motion_model)
    loss = res.terms["total"]
    if not np.isfinite(loss):
        raise NumericError("non-finite loss", res.terms)
    grads = de.backward(tape, res.total, leaves)
    for n, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {n}", res.terms)
    optimizer.step(model.params, {n: grads[n] for n in _trainable(model, config, names)})
    return StepResult(loss, res.terms)


@dataclass
class FitResult:
    model: DirectModel
    trace: list = field(default_factory=list)


def fit(samples: Sequence[SequenceSample], model: DirectModel, config: TrainConfig, weights: LossWeights,
        callback: Callable[[int, StepResult], None] | None = None) -> FitResult:
    """Run ``config.steps`` train steps over ``samples`` in seeded shuffled epochs."""
    if not samples:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    for s in samples:
        model.register_sample(s)
    optimizer = make_optimizer(config)
    trace = []
    order: list[int] = []
    initial = None
    over = 0
    try:
        for step in range(config.steps):
            if not order:
                order = list(rng.permutation(len(samples)))
            idx = order.pop(0)
            optimizer.factor = config.decay(step)
            res = train_step(samples[idx], model, config, weights, optimizer)
            trace.append({"step": step, "sample": samples[idx].name, **res.terms})
            if callback:
                callback(step, res)
            initial = res.loss if initial is None else initial
            over = over + 1 if res.loss > config.divergence_factor * initial else 0
            if over >= config.divergence_patience:
                raise NumericError(f"loss above {config.divergence_factor}x initial for {over} steps", res.terms)
    except NumericError as exc:
        exc.trace = trace
        raise
    if config.steps:
        model.depth.refresh_template()
    return FitResult(model, trace)


@dataclass
class WindowOutput:
    name: str
    depth: np.ndarray
    losses: list


@dataclass
class RefineResult:
    windows: list
    model: DirectModel


def online_refine(stream: Sequence[SequenceSample], model: DirectModel, config: TrainConfig,
                  weights: LossWeights) -> RefineResult:
    """Adapt on each 3-frame window for ``config.refine_steps`` steps, then predict its middle depth.

    The state carried between windows is the middle-frame log-depth field and
    the two ego poses. With ``carry`` each window starts from the previous
    window's refined state; with ``reset`` every window starts from the state
    the model had before the stream.
    """
    start_depth = model.depth.template.copy()
    start_ego = {PREV: model.motion.ego_template.copy(), NEXT: model.motion.ego_template.copy()}
    depth_state, ego_state = start_depth, dict(start_ego)
    outputs = []
    for sample in stream:
        model.register_sample(sample, depth_init=depth_state, ego_init=ego_state)
        optimizer = make_optimizer(config)
        losses = [train_step(sample, model, config, weights, optimizer).loss for _ in range(config.refine_steps)]
        fid = middle_frame_id(sample)
        field_ = model.params[f"depth/{fid}"].copy()
        outputs.append(WindowOutput(sample.name, np.exp(field_), losses))
        if config.reset_policy == "carry":
            depth_state = field_
            ego_state = {w: model.params[f"ego/{pair_id(sample, w)}"].copy() for w in (PREV, NEXT)}
        else:
            depth_state, ego_state = start_depth, dict(start_ego)
    return RefineResult(outputs, model)
