"""Alternating adversarial training.

Each training step runs ``critic_steps_per_gen_step`` critic updates followed
by one generator update. During a critic update the generator only produces
detached fakes and its batch-norm statistics are restored afterwards; during
a generator update the critic runs in inference mode with gradients off.
"""
from __future__ import annotations

import contextlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import losses
from .dataset import DatasetIndex, load_arrays
from .errors import ConfigError, SceneFlowError, TrainingHalted
from .networks import (
    Critic,
    DiscriminatorSpec,
    Generator,
    GeneratorSpec,
    ParameterSet,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    critic_steps_per_gen_step: int = 1
    clip_value: float = 0.01
    lambda_adv: float = 1.0
    gan_mode: str = "wasserstein"
    reduction: str = "mean"
    max_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    log_path: str | None = None
    dtype: str = "float32"
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    critic: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)

    def __post_init__(self):
        if isinstance(self.generator, dict):
            self.generator = GeneratorSpec(**self.generator)
        if isinstance(self.critic, dict):
            self.critic = DiscriminatorSpec(**self.critic)
        self.validate()

    def validate(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.gan_mode not in losses.GAN_MODES:
            raise ConfigError(f"gan_mode must be one of {losses.GAN_MODES}, got {self.gan_mode!r}")
        if self.gan_mode == "wasserstein" and not self.clip_value > 0:
            raise ConfigError("clip_value must be > 0 in wasserstein mode")
        if self.reduction not in losses.REDUCTIONS:
            raise ConfigError(f"reduction must be one of {losses.REDUCTIONS}")
        if self.batch_size < 1 or self.critic_steps_per_gen_step < 0 or self.max_steps < 0:
            raise ConfigError("batch_size >= 1, critic_steps_per_gen_step >= 0, max_steps >= 0 required")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}")

    def critic_spec(self) -> DiscriminatorSpec:
        """Critic spec with the output mode implied by ``gan_mode``."""
        mode = "score" if self.gan_mode == "wasserstein" else "probability"
        return replace(self.critic, output_mode=mode)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig field(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        try:
            if "generator" in d:
                d["generator"] = GeneratorSpec(**d["generator"])
            if "critic" in d:
                d["critic"] = DiscriminatorSpec(**d["critic"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    critic: Critic
    gen_opt: torch.optim.Optimizer
    critic_opt: torch.optim.Optimizer
    step: int = 0
    history: list = field(default_factory=list)
    last_checkpoint: Path | None = None

    @property
    def generator_params(self) -> ParameterSet:
        return ParameterSet.from_module(self.generator)

    @property
    def critic_params(self) -> ParameterSet:
        return ParameterSet.from_module(self.critic)


def _adam(net, cfg: TrainConfig):
    return torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def init_state(config: TrainConfig, generator_params: ParameterSet | None = None, critic_params: ParameterSet | None = None) -> TrainState:
    """Fresh state: generator seeded with ``seed``, critic with ``seed + 1``."""
    dtype = DTYPES[config.dtype]
    gp = generator_params or init_parameters(config.generator, config.seed, dtype)
    cspec = config.critic_spec()
    cp = critic_params or init_parameters(cspec, config.seed + 1, dtype)
    gen = gp.to(dtype).module()
    critic = ParameterSet(cspec, cp.to(dtype).tensors).module()
    if config.gan_mode == "wasserstein":
        clip_critic_weights(critic, config.clip_value)
    return TrainState(config, gen, critic, _adam(gen, config), _adam(critic, config))


@contextlib.contextmanager
def frozen_buffers(net: torch.nn.Module):
    """Restore every buffer (batch-norm statistics) of ``net`` on exit."""
    saved = {k: v.clone() for k, v in net.named_buffers()}
    try:
        yield net
    finally:
        with torch.no_grad():
            for k, v in net.named_buffers():
                v.copy_(saved[k])


def clip_critic_weights(params, c: float):
    """Clamp every learnable critic weight and bias to ``[-c, c]`` in place.

    Accepts a module or a :class:`ParameterSet`; running statistics are left
    untouched. Returns its argument.
    """
    if not c > 0:
        raise ValueError(f"clip value must be > 0, got {c}")
    with torch.no_grad():
        if isinstance(params, ParameterSet):
            for name in params.learnable_names():
                params.tensors[name].clamp_(-c, c)
        else:
            for p in params.parameters():
                p.clamp_(-c, c)
    return params


def _check_finite(value: torch.Tensor, state: TrainState, what: str):
    if not torch.isfinite(value).all():
        raise TrainingHalted(f"non-finite {what}", state.step, state.last_checkpoint)


def _check_params(net, state: TrainState, what: str):
    for name, p in net.named_parameters():
        if not torch.isfinite(p).all():
            raise TrainingHalted(f"non-finite {what} parameter {name}", state.step, state.last_checkpoint)


def discriminator_step(state: TrainState, real_batch, input_batch) -> float:
    """One critic update on ground truth vs detached generator output. Returns the critic loss."""
    cfg = state.config
    G, C = state.generator, state.critic
    G.train()
    with frozen_buffers(G), torch.no_grad():
        fake = G(input_batch)
    C.train()
    C.requires_grad_(True)
    n = real_batch.shape[0]
    scores = C(torch.cat([real_batch, fake], dim=0))
    loss = losses.critic_loss(scores[:n], scores[n:], cfg.gan_mode)
    _check_finite(loss, state, "critic loss")
    state.critic_opt.zero_grad(set_to_none=True)
    loss.backward()
    state.critic_opt.step()
    if cfg.gan_mode == "wasserstein":
        clip_critic_weights(C, cfg.clip_value)
    _check_params(C, state, "critic")
    return loss.item()


def generator_step(state: TrainState, input_batch, gt_batch) -> losses.LossBreakdown:
    """One generator update on joint loss + lambda_adv * adversarial loss, critic frozen."""
    cfg = state.config
    G, C = state.generator, state.critic
    G.train()
    pred = G(input_batch)
    terms = losses.joint_terms(pred, gt_batch, cfg.reduction)
    if cfg.lambda_adv != 0:
        C.eval()
        C.requires_grad_(False)
        try:
            adv = losses.generator_adv_loss(C(pred), cfg.gan_mode)
        finally:
            C.requires_grad_(True)
    else:
        adv = torch.zeros((), dtype=pred.dtype)
    total = losses.total_generator_loss(terms["joint"], adv, cfg.lambda_adv)
    _check_finite(total, state, "generator loss")
    state.gen_opt.zero_grad(set_to_none=True)
    total.backward()
    state.gen_opt.step()
    _check_params(G, state, "generator")
    return losses.LossBreakdown(
        **{k: v.item() for k, v in terms.items()},
        adversarial=adv.item(),
        total=total.item(),
    )


class BatchStream:
    """Endless seeded stream of mini-batches, reshuffled every epoch; incomplete tail batches are dropped."""

    def __init__(self, x: torch.Tensor, y: torch.Tensor, batch_size: int, seed: int):
        if x.shape[0] < batch_size:
            raise SceneFlowError(f"dataset has {x.shape[0]} samples, fewer than batch_size {batch_size}")
        self.x, self.y, self.bs = x, y, batch_size
        self.rng = np.random.default_rng([seed, 0xBA7C])
        self._order = []

    def next(self):
        if len(self._order) < self.bs:
            perm = self.rng.permutation(self.x.shape[0])
            n = (len(perm) // self.bs) * self.bs
            self._order = list(perm[:n])
        idx = torch.as_tensor(self._order[: self.bs])
        self._order = self._order[self.bs :]
        return self.x[idx], self.y[idx]


def _as_tensors(data, dtype):
    if isinstance(data, DatasetIndex):
        x, y = load_arrays(data)
    else:
        x, y = data
    return torch.as_tensor(np.asarray(x), dtype=dtype), torch.as_tensor(np.asarray(y), dtype=dtype)


def save_state(state: TrainState, path) -> Path:
    """Checkpoint parameters, statistics and Adam moments."""
    aux = {}
    for role, net, opt in (("generator", state.generator, state.gen_opt), ("critic", state.critic, state.critic_opt)):
        names = {id(p): n for n, p in net.named_parameters()}
        for group in opt.param_groups:
            for p in group["params"]:
                st = opt.state.get(p)
                if not st:
                    continue
                for k in ("exp_avg", "exp_avg_sq", "step"):
                    aux[f"{role}_opt/{names[id(p)]}/{k}"] = torch.as_tensor(st[k]).detach().cpu().numpy()
    extra = {"step": state.step, "config": state.config.to_dict()}
    path = save_checkpoint(path, {"generator": state.generator_params, "critic": state.critic_params}, extra, aux)
    state.last_checkpoint = Path(path)
    return Path(path)


def load_state(path, config: TrainConfig | None = None) -> TrainState:
    """Rebuild a TrainState (including Adam moments) from :func:`save_state` output."""
    nets, meta, aux = load_checkpoint(path)
    cfg = config or TrainConfig.from_dict(meta["extra"]["config"])
    expect = {"generator": cfg.generator, "critic": cfg.critic_spec()}
    nets, meta, aux = load_checkpoint(path, expect=expect)
    state = TrainState(
        cfg,
        nets["generator"].module(),
        nets["critic"].module(),
        None,
        None,
        step=meta["extra"]["step"],
        last_checkpoint=Path(path),
    )
    state.gen_opt, state.critic_opt = _adam(state.generator, cfg), _adam(state.critic, cfg)
    for role, net, opt in (("generator", state.generator, state.gen_opt), ("critic", state.critic, state.critic_opt)):
        for name, p in net.named_parameters():
            key = f"{role}_opt/{name}/"
            if key + "exp_avg" in aux:
                opt.state[p] = {k: torch.as_tensor(aux[key + k]) for k in ("exp_avg", "exp_avg_sq", "step")}
    return state


def train(config: TrainConfig, data, state: TrainState | None = None, callback=None) -> tuple[TrainState, list]:
    """Run ``config.max_steps`` alternating steps on ``data``.

    ``data`` is a DatasetIndex or an ``(inputs, targets)`` array pair.
    ``callback(state, record)`` is invoked after every step. Returns the
    final state and the per-step LossBreakdown log.
    """
    torch.manual_seed(config.seed)
    dtype = DTYPES[config.dtype]
    state = state or init_state(config)
    if config.max_steps == 0:
        return state, state.history
    x, y = _as_tensors(data, dtype)
    stream = BatchStream(x, y, config.batch_size, config.seed)
    log_file = open(config.log_path, "a") if config.log_path else None
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    try:
        while state.step < config.max_steps:
            critic_losses = []
            for _ in range(config.critic_steps_per_gen_step):
                xb, yb = stream.next()
                critic_losses.append(discriminator_step(state, yb, xb))
            xb, yb = stream.next()
            rec = generator_step(state, xb, yb)
            rec.critic = float(np.mean(critic_losses)) if critic_losses else None
            rec.step = state.step
            state.history.append(rec)
            state.step += 1
            if log_file:
                log_file.write(rec.to_json() + "\n")
            if ckpt_dir and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                ckpt_dir.mkdir(parents=True, exist_ok=True)
                save_state(state, ckpt_dir / f"step_{state.step:07d}.npz")
            if callback:
                callback(state, rec)
    finally:
        if log_file:
            log_file.close()
    return state, state.history


def run_bn_ablation(config: TrainConfig, data, out_path=None) -> dict:
    """Train twice from the same seed, with and without batch-norm in the generator.

    Returns ``{"with_bn": [...], "without_bn": [...]}`` per-step joint losses
    and writes them as JSON to ``out_path`` when given.
    """
    curves = {}
    for key, flag in (("with_bn", True), ("without_bn", False)):
        cfg = replace(config, generator=replace(config.generator, use_batchnorm=flag), log_path=None, checkpoint_dir=None)
        _, hist = train(cfg, data)
        curves[key] = [r.joint for r in hist]
    if out_path is not None:
        doc = {"steps": list(range(len(curves["with_bn"]))), **curves, "config": config.to_dict()}
        Path(out_path).write_text(json.dumps(doc))
    return curves
