"""The four GAN / BiGAN architectures used for MNIST and KDD99.

Each network is a :class:`Stack` of :class:`Layer` rows copied from the
architecture tables. A discriminator is one stack for plain GANs; for
BiGANs it is an x-branch, a z-branch and a joint stack after concatenation.
The starred layer of each discriminator is the feature tap used by the
feature-matching score.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .params import InitSpec, ParamStore, init_params

ARCH_IDS = ("mnist_gan", "mnist_bigan", "kdd_gan", "kdd_bigan")


@dataclass(frozen=True)
class Layer:
    op: str                     # dense | conv | tconv | flatten | reshape
    units: int | None = None    # output units / feature maps
    kernel: int | None = None
    stride: int | None = None
    bn: bool = False
    act: str = "linear"
    dropout: float = 0.0
    starred: bool = False
    shape: tuple[int, ...] | None = None  # reshape target (without batch)

    def describe(self) -> str:
        if self.op in ("flatten", "reshape"):
            target = "x".join(map(str, self.shape)) if self.shape else "-"
            return f"{self.op} | target={target}"
        kernel = f"{self.kernel}x{self.kernel}" if self.kernel else "-"
        stride = f"{self.stride}x{self.stride}" if self.stride else "-"
        star = "*" if self.starred else ""
        return (f"{self.op}{star} | kernel={kernel} | stride={stride} | units={self.units}"
                f" | bn={'yes' if self.bn else 'no'} | act={self.act} | dropout={self.dropout}")


@dataclass(frozen=True)
class Hyper:
    latent_dim: int
    batch_size: int
    epochs: int
    lr: float
    beta1: float
    ema_decay: float
    init: str
    input_shape: tuple[int, ...]


HYPER = {
    "mnist_gan": Hyper(200, 100, 100, 1e-5, 0.5, 0.999, "gaussian", (28, 28, 1)),
    "mnist_bigan": Hyper(200, 100, 100, 1e-5, 0.5, 0.999, "gaussian", (28, 28, 1)),
    "kdd_gan": Hyper(32, 50, 50, 1e-5, 0.5, 0.9999, "xavier", (121,)),
    "kdd_bigan": Hyper(32, 50, 50, 1e-5, 0.5, 0.9999, "xavier", (121,)),
}

_MNIST_G = (
    Layer("dense", 1024, bn=True, act="relu"),
    Layer("dense", 7 * 7 * 128, bn=True, act="relu"),
    Layer("reshape", shape=(7, 7, 128)),
    Layer("tconv", 64, kernel=4, stride=2, bn=True, act="relu"),
    Layer("tconv", 1, kernel=4, stride=2, act="tanh"),
)
_KDD_G = (
    Layer("dense", 64, act="relu"),
    Layer("dense", 128, act="relu"),
    Layer("dense", 121, act="linear"),
)

# name -> {net name: layers}; discriminator parts are D, Dx, Dz, Dxz
LAYOUTS: dict[str, dict[str, tuple[Layer, ...]]] = {
    "mnist_gan": {
        "G": _MNIST_G,
        "D": (
            Layer("conv", 64, kernel=4, stride=2, act="leaky_relu"),
            Layer("conv", 64, kernel=4, stride=2, bn=True, act="leaky_relu"),
            Layer("flatten"),
            Layer("dense", 1024, bn=True, act="leaky_relu", starred=True),
            Layer("dense", 1, act="sigmoid"),
        ),
    },
    "mnist_bigan": {
        "E": (
            Layer("conv", 32, kernel=3, stride=1, act="linear"),
            Layer("conv", 64, kernel=3, stride=2, bn=True, act="leaky_relu"),
            Layer("conv", 128, kernel=3, stride=2, bn=True, act="leaky_relu"),
            Layer("flatten"),
            Layer("dense", 200, act="linear"),
        ),
        "G": _MNIST_G,
        "Dx": (
            Layer("conv", 64, kernel=4, stride=2, act="leaky_relu"),
            Layer("conv", 64, kernel=4, stride=2, bn=True, act="leaky_relu"),
            Layer("flatten"),
        ),
        "Dz": (Layer("dense", 512, act="leaky_relu"),),
        "Dxz": (
            Layer("dense", 1024, act="leaky_relu", starred=True),
            Layer("dense", 1, act="sigmoid"),
        ),
    },
    "kdd_gan": {
        "G": _KDD_G,
        "D": (
            Layer("dense", 256, act="leaky_relu", dropout=0.2),
            Layer("dense", 128, act="leaky_relu", dropout=0.2),
            Layer("dense", 128, act="leaky_relu", dropout=0.2, starred=True),
            Layer("dense", 1, act="sigmoid"),
        ),
    },
    "kdd_bigan": {
        "E": (
            Layer("dense", 64, act="leaky_relu"),
            Layer("dense", 32, act="linear"),
        ),
        "G": _KDD_G,
        "Dx": (Layer("dense", 128, act="leaky_relu", dropout=0.2),),
        "Dz": (Layer("dense", 128, act="leaky_relu", dropout=0.2),),
        "Dxz": (
            Layer("dense", 128, act="leaky_relu", dropout=0.2, starred=True),
            Layer("dense", 1, act="linear"),
        ),
    },
}


@dataclass
class RunMode:
    """Forward-pass context: train flag plus the dropout generator."""

    train: bool = False
    rng: np.random.Generator | None = None


INFER = RunMode(False, None)


class Stack:
    """A sequential run of layers whose parameters live in a shared store."""

    def __init__(self, name: str, layers, input_shape: tuple[int, ...]):
        self.name = name
        self.layers = tuple(layers)
        self.input_shape = tuple(input_shape)
        self.output_shape = self._infer_shapes()

    def _infer_shapes(self):
        shape = self.input_shape
        self.shapes = []
        for layer in self.layers:
            if layer.op == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"{self.name}: dense layer after non-flat shape {shape}")
                shape = (layer.units,)
            elif layer.op == "conv":
                h = ad.same_padding(shape[0], layer.kernel, layer.stride)[0]
                w = ad.same_padding(shape[1], layer.kernel, layer.stride)[0]
                shape = (h, w, layer.units)
            elif layer.op == "tconv":
                shape = (shape[0] * layer.stride, shape[1] * layer.stride, layer.units)
            elif layer.op == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.op == "reshape":
                if int(np.prod(layer.shape)) != int(np.prod(shape)):
                    raise ShapeError(f"{self.name}: cannot reshape {shape} to {layer.shape}")
                shape = tuple(layer.shape)
            else:
                raise ValueError(f"unknown layer op {layer.op!r}")
            self.shapes.append(shape)
        return shape

    def param_entries(self):
        """``(name, shape, role)`` for every parameter, in creation order."""
        entries = []
        shape = self.input_shape
        for i, (layer, out) in enumerate(zip(self.layers, self.shapes)):
            p = f"{self.name}/{i}"
            if layer.op == "dense":
                entries.append((f"{p}/w", (shape[0], layer.units), "weight"))
            elif layer.op == "conv":
                entries.append((f"{p}/k", (layer.kernel, layer.kernel, shape[2], layer.units), "weight"))
            elif layer.op == "tconv":
                entries.append((f"{p}/k", (layer.kernel, layer.kernel, layer.units, shape[2]), "weight"))
            if layer.op in ("dense", "conv", "tconv"):
                if layer.bn:
                    entries.append((f"{p}/gamma", (layer.units,), "gamma"))
                    entries.append((f"{p}/beta", (layer.units,), "beta"))
                else:
                    entries.append((f"{p}/b", (layer.units,), "bias"))
            shape = out
        return entries

    def buffer_entries(self):
        return [(f"{self.name}/{i}", layer.units)
                for i, layer in enumerate(self.layers) if layer.bn]

    def forward(self, store: ParamStore, x: Tensor, mode: RunMode = INFER):
        """Run the stack; returns ``(output, starred_activation_or_None)``."""
        tap = None
        h = x
        for i, layer in enumerate(self.layers):
            p = f"{self.name}/{i}"
            if layer.op == "flatten":
                h = ad.flatten(h)
                continue
            if layer.op == "reshape":
                h = ad.reshape(h, (h.shape[0],) + tuple(layer.shape))
                continue
            if layer.op == "dense":
                h = ad.dense(h, store[f"{p}/w"], None if layer.bn else store[f"{p}/b"])
            elif layer.op == "conv":
                h = ad.conv2d(h, store[f"{p}/k"], layer.stride)
                if not layer.bn:
                    h = ad.add(h, store[f"{p}/b"])
            elif layer.op == "tconv":
                h = ad.conv2d_transpose(h, store[f"{p}/k"], layer.stride)
                if not layer.bn:
                    h = ad.add(h, store[f"{p}/b"])
            if layer.bn:
                running = {"mean": store.buffers[f"{p}/mean"], "var": store.buffers[f"{p}/var"]}
                h = ad.batch_norm(h, store[f"{p}/gamma"], store[f"{p}/beta"], mode.train, running)
            h = ad.activation(layer.act, h)
            if layer.starred:
                tap = h
            h = ad.dropout(h, layer.dropout, mode.train, mode.rng)
        return h, tap


class DiscOutput(NamedTuple):
    logit: Tensor        # [b]
    prob: np.ndarray     # sigmoid(logit), [b]
    features: Tensor     # starred-layer activation


@dataclass
class Network:
    """One of G, E or D: its stacks plus a parameter store."""

    stacks: dict[str, Stack]
    store: ParamStore

    def all_layers(self):
        for name, stack in self.stacks.items():
            for layer in stack.layers:
                yield name, layer


def _make_network(stacks: dict[str, Stack], init: InitSpec, dtype) -> Network:
    entries = [e for s in stacks.values() for e in s.param_entries()]
    store = init_params(entries, init, dtype)
    for s in stacks.values():
        for prefix, units in s.buffer_entries():
            store.add_buffer(f"{prefix}/mean", np.zeros(units, dtype=dtype))
            store.add_buffer(f"{prefix}/var", np.ones(units, dtype=dtype))
    return Network(stacks, store)


@dataclass
class ModelBundle:
    arch: str
    G: Network
    D: Network
    E: Network | None
    latent_dim: int
    input_shape: tuple[int, ...]
    dtype: np.dtype = field(default=np.dtype(np.float64))

    @property
    def is_bigan(self) -> bool:
        return self.E is not None

    @property
    def feature_tap(self) -> str:
        for name, stack in self.D.stacks.items():
            for i, layer in enumerate(stack.layers):
                if layer.starred:
                    return f"{name}/{i}"
        raise LookupError(f"{self.arch}: discriminator has no starred layer")

    @property
    def feature_dim(self) -> int:
        for stack in self.D.stacks.values():
            for layer, shape in zip(stack.layers, stack.shapes):
                if layer.starred:
                    return int(np.prod(shape))
        raise LookupError(f"{self.arch}: discriminator has no starred layer")

    def networks(self) -> dict[str, Network]:
        nets = {"G": self.G, "D": self.D}
        if self.E is not None:
            nets["E"] = self.E
        return nets

    def _as_input(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        return x

    def generator_forward(self, z, mode: RunMode = INFER) -> Tensor:
        z = self._as_input(z)
        if z.data.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"{self.arch}: latent input {z.shape}, expected [b, {self.latent_dim}]")
        out, _ = self.G.stacks["G"].forward(self.G.store, z, mode)
        return out

    def encoder_forward(self, x, mode: RunMode = INFER) -> Tensor:
        if self.E is None:
            raise TypeError(f"{self.arch} has no encoder")
        x = self._check_x(self._as_input(x))
        out, _ = self.E.stacks["E"].forward(self.E.store, x, mode)
        return out

    def _check_x(self, x: Tensor) -> Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            if int(np.prod(x.shape[1:])) == int(np.prod(self.input_shape)):
                return ad.reshape(x, (x.shape[0],) + self.input_shape)
            raise ShapeError(f"{self.arch}: sample shape {x.shape[1:]}, expected {self.input_shape}")
        return x

    def discriminator_forward(self, x, z=None, mode: RunMode = INFER) -> DiscOutput:
        x = self._check_x(self._as_input(x))
        stacks, store = self.D.stacks, self.D.store
        if self.is_bigan:
            if z is None:
                raise TypeError(f"{self.arch} discriminator needs (x, z)")
            z = self._as_input(z)
            hx, tap_x = stacks["Dx"].forward(store, x, mode)
            hz, tap_z = stacks["Dz"].forward(store, z, mode)
            h, tap = stacks["Dxz"].forward(store, ad.concat([hx, hz], axis=1), mode)
            tap = next(t for t in (tap, tap_x, tap_z) if t is not None)
        else:
            if z is not None:
                raise TypeError(f"{self.arch} discriminator takes x only")
            h, tap = stacks["D"].forward(store, x, mode)
        # sigmoid heads were built as linear (see _logit_layers), so h is the logit
        logit = ad.reshape(h, (h.shape[0],))
        return DiscOutput(logit, ad.sigmoid_np(logit.data), tap)

    def ema_copy(self) -> "ModelBundle":
        """Deep copy whose raw weights are replaced by the EMA shadows."""
        twin = copy.deepcopy(self)
        for net in twin.networks().values():
            net.store.use_ema()
        return twin

    def astype(self, dtype) -> "ModelBundle":
        for net in self.networks().values():
            net.store.astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def param_count(self) -> dict[str, int]:
        return {k: n.store.count() for k, n in self.networks().items()}

    def dump(self) -> str:
        return architecture_dump(self)


def _logit_layers(layers: tuple[Layer, ...]) -> tuple[Layer, ...]:
    # Run a sigmoid head as linear so the stack yields logits; the sigmoid is
    # applied analytically in DiscOutput.prob and inside the stable loss.
    last = layers[-1]
    if last.act != "sigmoid":
        return layers
    return layers[:-1] + (Layer(last.op, last.units, last.kernel, last.stride, last.bn,
                                "linear", last.dropout, last.starred, last.shape),)


def assemble(arch: str, layout: dict[str, tuple[Layer, ...]], latent_dim: int,
             input_shape: tuple[int, ...], init: InitSpec, dtype=np.float64) -> ModelBundle:
    """Build a bundle from a ``{G, D}`` or ``{E, G, Dx, Dz, Dxz}`` layout."""
    seed = init.seed

    def spec(offset):
        return InitSpec(init.kind, init.std, seed * 7 + offset)

    g = _make_network({"G": Stack("G", layout["G"], (latent_dim,))}, spec(1), dtype)
    e = None
    if "E" in layout:
        e = _make_network({"E": Stack("E", layout["E"], input_shape)}, spec(2), dtype)
        dx = Stack("Dx", layout["Dx"], input_shape)
        dz = Stack("Dz", layout["Dz"], (latent_dim,))
        joint_in = (dx.output_shape[0] + dz.output_shape[0],)
        dxz = Stack("Dxz", _logit_layers(layout["Dxz"]), joint_in)
        d = _make_network({"Dx": dx, "Dz": dz, "Dxz": dxz}, spec(3), dtype)
    else:
        d = _make_network({"D": Stack("D", _logit_layers(layout["D"]), input_shape)}, spec(3), dtype)
    return ModelBundle(arch, g, d, e, latent_dim, tuple(input_shape), np.dtype(dtype))


def build_model(arch: str, init: InitSpec | None = None, dtype=np.float64) -> ModelBundle:
    if arch not in LAYOUTS:
        raise ValueError(f"unknown arch {arch!r}; expected one of {ARCH_IDS}")
    hp = HYPER[arch]
    return assemble(arch, LAYOUTS[arch], hp.latent_dim, hp.input_shape,
                    init or InitSpec(hp.init), dtype)


def architecture_dump(bundle_or_arch) -> str:
    """Deterministic text listing of an architecture, one layer per line.

    Rows come from the table layout (so a sigmoid head reads ``sigmoid`` even
    though it runs as a logit internally).
    """
    arch = bundle_or_arch if isinstance(bundle_or_arch, str) else bundle_or_arch.arch
    hp = HYPER[arch]
    init = "gaussian(mean=0,std=0.02)" if hp.init == "gaussian" else "xavier"
    lines = [
        f"arch={arch}",
        f"latent_dim={hp.latent_dim} batch_size={hp.batch_size} epochs={hp.epochs}",
        f"optimizer=adam(lr={hp.lr:g},beta1={hp.beta1:g}) leaky_slope={ad.LEAKY_SLOPE:g}",
        f"init={init} bias=constant(0) ema_decay={hp.ema_decay:g}",
    ]
    for net, layers in LAYOUTS[arch].items():
        for layer in layers:
            lines.append(f"{net} | {layer.describe()}")
    return "\n".join(lines) + "\n"
