"""Generator (encoder-decoder with skips) and critic networks.

Both are built from declarative specs. Every building block is a
conv -> batch-norm -> leaky-ReLU unit; batch-norm can be switched off.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .errors import CheckpointMismatchError, ShapeError
from .types import N_INPUT_CHANNELS, N_TARGET_CHANNELS

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GeneratorSpec:
    depth: int = 4
    base_channels: int = 32
    use_batchnorm: bool = True
    leaky_slope: float = 0.2
    skip_mode: str = "concatenate"
    max_channels: int = 256
    zero_init_head: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.skip_mode not in ("concatenate", "add"):
            raise ValueError(f"skip_mode must be 'concatenate' or 'add', got {self.skip_mode!r}")

    def stage_channels(self) -> list[int]:
        """Channel width of encoder level 0..depth (level i is at 1/2**i resolution)."""
        return [min(self.base_channels * 2**i, self.max_channels) for i in range(self.depth + 1)]

    def required_multiple(self) -> int:
        return 2**self.depth


@dataclass(frozen=True)
class DiscriminatorSpec:
    conv_channels: tuple[int, int, int] = (32, 64, 128)
    dense_widths: tuple[int, int, int] = (256, 64, 1)
    dropout_rate: float = 0.4
    leaky_slope: float = 0.2
    output_mode: str = "score"
    use_batchnorm: bool = True
    input_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "dense_widths", tuple(self.dense_widths))
        object.__setattr__(self, "input_size", tuple(self.input_size))
        if len(self.conv_channels) != 3 or len(self.dense_widths) != 3:
            raise ValueError("critic needs exactly 3 conv stages and 3 dense layers")
        if self.dense_widths[-1] != 1:
            raise ValueError("last dense layer must have width 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.output_mode not in ("probability", "score"):
            raise ValueError(f"output_mode must be 'probability' or 'score', got {self.output_mode!r}")
        h, w = self.input_size
        if h % 8 or w % 8:
            raise ShapeError(f"critic input size {h}x{w} must be divisible by 8")

    def flat_features(self) -> int:
        h, w = self.input_size
        return self.conv_channels[-1] * (h // 8) * (w // 8)


def _unit(cin, cout, stride, bn, slope):
    """conv(3x3) -> [batch-norm] -> leaky-ReLU."""
    layers = OrderedDict(conv=nn.Conv2d(cin, cout, 3, stride=stride, padding=1))
    if bn:
        layers["bn"] = nn.BatchNorm2d(cout)
    layers["act"] = nn.LeakyReLU(slope)
    return nn.Sequential(layers)


def _up_unit(cin, cout, bn, slope):
    """transposed conv(4x4, stride 2) -> [batch-norm] -> leaky-ReLU."""
    layers = OrderedDict(conv=nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1))
    if bn:
        layers["bn"] = nn.BatchNorm2d(cout)
    layers["act"] = nn.LeakyReLU(slope)
    return nn.Sequential(layers)


class Generator(nn.Module):
    """Maps the 12-channel stereo stack to the 4-channel scene-flow field.

    Encoder level 0 keeps full resolution; levels 1..depth halve it with
    stride-2 units. Each decoder stage upsamples and merges the encoder
    output of matching resolution. The head is a linear 3x3 convolution.
    """

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        ch = spec.stage_channels()
        bn, a = spec.use_batchnorm, spec.leaky_slope
        self.enc = nn.ModuleList([_unit(N_INPUT_CHANNELS, ch[0], 1, bn, a)])
        for i in range(1, spec.depth + 1):
            self.enc.append(_unit(ch[i - 1], ch[i], 2, bn, a))
        self.dec = nn.ModuleList()
        cin = ch[spec.depth]
        for i in range(spec.depth, 0, -1):
            self.dec.append(_up_unit(cin, ch[i - 1], bn, a))
            cin = 2 * ch[i - 1] if spec.skip_mode == "concatenate" else ch[i - 1]
        self.head = nn.Conv2d(cin, N_TARGET_CHANNELS, 3, padding=1)

    def forward(self, x):
        m = self.spec.required_multiple()
        if x.shape[-2] % m or x.shape[-1] % m:
            raise ShapeError(f"input {x.shape[-2]}x{x.shape[-1]} must have H and W divisible by {m}")
        if x.shape[-3] != N_INPUT_CHANNELS:
            raise ShapeError(f"generator expects {N_INPUT_CHANNELS} input channels, got {x.shape[-3]}")
        skips = []
        for unit in self.enc:
            x = unit(x)
            skips.append(x)
        x = skips.pop()
        for unit in self.dec:
            x = unit(x)
            skip = skips.pop()
            x = torch.cat([x, skip], dim=1) if self.spec.skip_mode == "concatenate" else x + skip
        return self.head(x)


class Critic(nn.Module):
    """Unconditioned critic on the 4-channel scene-flow field."""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        a = spec.leaky_slope
        cin = N_TARGET_CHANNELS
        convs = []
        for cout in spec.conv_channels:
            convs.append(_unit(cin, cout, 2, spec.use_batchnorm, a))
            cin = cout
        self.convs = nn.Sequential(*convs)
        w1, w2, w3 = spec.dense_widths
        self.dense = nn.Sequential(
            OrderedDict(
                fc1=nn.Linear(spec.flat_features(), w1),
                act1=nn.LeakyReLU(a),
                drop=nn.Dropout(spec.dropout_rate),
                fc2=nn.Linear(w1, w2),
                act2=nn.LeakyReLU(a),
                fc3=nn.Linear(w2, w3),
            )
        )

    def forward(self, x):
        if x.shape[-3] != N_TARGET_CHANNELS:
            raise ShapeError(f"critic expects {N_TARGET_CHANNELS} channels, got {x.shape[-3]}")
        if tuple(x.shape[-2:]) != self.spec.input_size:
            raise ShapeError(f"critic built for {self.spec.input_size}, got {tuple(x.shape[-2:])}")
        score = self.dense(self.convs(x).flatten(1)).squeeze(1)
        if self.spec.output_mode == "probability":
            return torch.sigmoid(score)
        return score


def build(spec):
    if isinstance(spec, GeneratorSpec):
        return Generator(spec)
    if isinstance(spec, DiscriminatorSpec):
        return Critic(spec)
    raise TypeError(f"unknown network spec {type(spec).__name__}")


@dataclass
class ParameterSet:
    """Learnable arrays and normalization statistics keyed by layer path."""

    spec: GeneratorSpec | DiscriminatorSpec
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.tensors[key]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def learnable_names(self) -> list[str]:
        return [n for n, _ in build(self.spec).named_parameters()]

    def count(self, learnable_only=True) -> int:
        names = self.learnable_names() if learnable_only else list(self.tensors)
        return sum(self.tensors[n].numel() for n in names)

    def to(self, dtype) -> "ParameterSet":
        return ParameterSet(
            self.spec,
            {k: v.to(dtype) if v.is_floating_point() else v.clone() for k, v in self.tensors.items()},
        )

    def clone(self) -> "ParameterSet":
        return ParameterSet(self.spec, {k: v.detach().clone() for k, v in self.tensors.items()})

    def equal(self, other: "ParameterSet") -> bool:
        """Bit-exact equality of every array."""
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(torch.equal(self.tensors[k], other.tensors[k]) for k in self.tensors)

    def module(self) -> nn.Module:
        net = build(self.spec)
        ref = next(iter(self.tensors.values()))
        net.to(ref.dtype if ref.is_floating_point() else torch.float32)
        net.load_state_dict(self.tensors)
        return net

    @classmethod
    def from_module(cls, net: nn.Module) -> "ParameterSet":
        return cls(net.spec, {k: v.detach().clone() for k, v in net.state_dict().items()})


def _leaky_gain(slope):
    return np.sqrt(2.0 / (1.0 + slope**2))


def init_parameters(spec, seed: int = 0, dtype=torch.float32) -> ParameterSet:
    """Deterministic initialization.

    Weights ~ N(0, (gain / sqrt(fan_in))**2) with the leaky-ReLU gain; the
    generator head and the critic's final dense layer use unit gain. Biases
    are zero, batch-norm affine parameters are (1, 0) and running
    statistics are (0, 1).
    """
    gen = torch.Generator().manual_seed(int(seed))
    net = build(spec).to(dtype)
    gain = _leaky_gain(spec.leaky_slope)
    linear_last = {"head", "dense.fc3"}
    with torch.no_grad():
        for name, mod in net.named_modules():
            if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                w = mod.weight
                if isinstance(mod, nn.ConvTranspose2d):
                    # each output pixel of a stride-2 k4 transposed conv sees cin * 2 * 2 taps
                    fan_in = w.shape[0] * (w.shape[2] // 2) * (w.shape[3] // 2)
                else:
                    fan_in = w[0].numel()
                g = 1.0 if name in linear_last else gain
                w.copy_(torch.randn(w.shape, generator=gen, dtype=torch.float64) * (g / np.sqrt(fan_in)))
                mod.bias.zero_()
                if name == "head" and getattr(spec, "zero_init_head", False):
                    w.zero_()
            elif isinstance(mod, nn.BatchNorm2d):
                mod.reset_parameters()
    return ParameterSet.from_module(net)


def _forward(params: ParameterSet, x, training: bool):
    net = build(params.spec).to(x.dtype)
    net.train(training)
    return functional_call(net, params.tensors, (x,))


def generator_forward(params: ParameterSet, x, training: bool = False):
    """Run the generator on ``(12, H, W)`` or ``(N, 12, H, W)`` input."""
    x = torch.as_tensor(x)
    single = x.ndim == 3
    out = _forward(params, x[None] if single else x, training)
    return out[0] if single else out


def discriminator_forward(params: ParameterSet, sceneflow, mode: str | None = None, training: bool = False):
    """Critic output for ``(4, H, W)`` or ``(N, 4, H, W)`` input.

    ``mode`` overrides the spec's output mode ('probability' or 'score').
    """
    spec = params.spec
    if mode is not None and mode != spec.output_mode:
        spec = DiscriminatorSpec(**{**asdict(spec), "output_mode": mode})
        params = ParameterSet(spec, params.tensors)
    x = torch.as_tensor(sceneflow)
    single = x.ndim == 3
    out = _forward(params, x[None] if single else x, training)
    return out[0] if single else out


# -- checkpoints ------------------------------------------------------------

def _spec_doc(spec) -> dict:
    return {"kind": type(spec).__name__, **asdict(spec)}


def spec_from_doc(doc: dict):
    doc = dict(doc)
    kind = doc.pop("kind")
    cls = {"GeneratorSpec": GeneratorSpec, "DiscriminatorSpec": DiscriminatorSpec}[kind]
    return cls(**doc)


def save_checkpoint(path, nets: dict[str, ParameterSet], extra: dict | None = None, arrays: dict | None = None):
    """Write a named-array container (``.npz``) with the network specs embedded."""
    out = {}
    meta = {"version": CHECKPOINT_VERSION, "specs": {}, "extra": extra or {}}
    for role, ps in nets.items():
        meta["specs"][role] = _spec_doc(ps.spec)
        for k, v in ps.items():
            out[f"{role}/{k}"] = v.detach().cpu().numpy()
    for k, v in (arrays or {}).items():
        out[f"aux/{k}"] = np.asarray(v)
    out["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as f:
        np.savez(f, **out)
    return path


def read_checkpoint_meta(path) -> dict:
    with np.load(path) as z:
        return json.loads(z["__meta__"].tobytes().decode())


def load_checkpoint(path, expect: dict | None = None) -> tuple[dict[str, ParameterSet], dict, dict]:
    """Load a checkpoint written by :func:`save_checkpoint`.

    ``expect`` maps role -> spec; a mismatch raises CheckpointMismatchError.
    Returns ``(params_by_role, meta, aux_arrays)``.
    """
    with np.load(path) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointMismatchError(f"unsupported checkpoint version {meta.get('version')}")
        nets, aux = {}, {}
        for role, doc in meta["specs"].items():
            spec = spec_from_doc(doc)
            if expect and role in expect and expect[role] != spec:
                raise CheckpointMismatchError(f"{role}: checkpoint spec {spec} does not match expected {expect[role]}")
            prefix = f"{role}/"
            tensors = {k[len(prefix):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith(prefix)}
            nets[role] = ParameterSet(spec, tensors)
        for k in z.files:
            if k.startswith("aux/"):
                aux[k[4:]] = z[k].copy()
    return nets, meta, aux
