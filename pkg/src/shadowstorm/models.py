"""Differentiable shadow-removal targets for the attack engine.

Every model exposes exactly two capabilities consumed by the attacks:

  * ``forward(image) -> Image``: deterministic, output clamped to [0, 1];
  * ``input_grad(image, cotangent) -> ndarray``: the vector-Jacobian
    product of the forward map with an upstream cotangent array.

Anything implementing that pair can be attacked; the bundled zoo holds an
identity map (analytic test target), an illumination gain-map corrector,
and a tiny residual CNN with a toy full-batch trainer.
"""

from __future__ import annotations

import logging
import struct
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .imagecore import Image
from .rng import Xoshiro256StarStar

log = logging.getLogger(__name__)

GAIN_DENOM_EPS = 1e-3  # floor under the blurred luminance; avoids blow-up at black pixels

PARAMS_MAGIC = b"SSPM"
PARAMS_VERSION = 1


class ParamsError(ValueError):
    """Malformed parameter file."""


class DiffModel(Protocol):
    name: str

    def forward(self, image: Image) -> Image: ...

    def input_grad(self, image: Image, cotangent: np.ndarray) -> np.ndarray: ...


class TapeModel:
    """Base for zoo models: implements the capability pair on top of a
    tensor-level ``forward_t``."""

    name = "tape"

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def forward_t(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def forward(self, image: Image) -> Image:
        out = self.forward_t(Tensor(image.data))
        return Image(np.clip(out.data, 0.0, 1.0))

    def input_grad(self, image: Image, cotangent: np.ndarray) -> np.ndarray:
        leaf = Tensor(np.array(image.data), requires_grad=True)
        out = self.forward_t(leaf)
        out.backward(np.asarray(cotangent, dtype=np.float64))
        if leaf.grad is None:
            return np.zeros_like(leaf.data)
        return leaf.grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}


class IdentityModel(TapeModel):
    name = "identity"

    def forward_t(self, x: Tensor) -> Tensor:
        return x

    def forward(self, image: Image) -> Image:
        return image

    def input_grad(self, image: Image, cotangent: np.ndarray) -> np.ndarray:
        return np.array(cotangent, dtype=np.float64)


class GainMapModel(TapeModel):
    """Analytic illumination corrector.

    Brightens dark regions by a spatially varying multiplicative gain
    g = clamp(mu / (blur(luminance) + eps), 1, max_gain), where mu is the
    global mean luminance. Never darkens; fully differentiable.
    """

    def __init__(self, blur_radius: int = 4, max_gain: float = 4.0):
        super().__init__()
        if blur_radius < 1:
            raise ValueError(f"blur_radius must be >= 1, got {blur_radius}")
        if max_gain <= 1.0:
            raise ValueError(f"max_gain must exceed 1, got {max_gain}")
        self.blur_radius = blur_radius
        self.max_gain = max_gain
        self._kernel = ad.box_kernel(blur_radius)
        self.name = f"gainmap(r={blur_radius},g={max_gain:g})"

    def _border_weight(self, height: int, width: int) -> np.ndarray:
        """Blur mass that falls inside the image; divides out the darkening
        a zero-padded blur would otherwise introduce at the borders."""
        ones = Tensor(np.ones((height, width, 1)))
        return ad.blur2d(ones, self._kernel).data

    def forward_t(self, x: Tensor) -> Tensor:
        h, w = x.data.shape[0], x.data.shape[1]
        lum = ad.mean_channels(x)
        mu = ad.smul(ad.tsum(lum), 1.0 / (h * w))
        smooth = ad.mul(ad.blur2d(lum, self._kernel),
                        Tensor(1.0 / self._border_weight(h, w)))
        gain = ad.clamp(ad.div(mu, smooth + Tensor(GAIN_DENOM_EPS)),
                        1.0, self.max_gain)
        return ad.clamp01(ad.mul(x, gain))


class TinyCnnModel(TapeModel):
    """Three-layer residual CNN (3->8->8->3, 3x3 kernels, relu, final clamp).

    Weights start from seeded uniform(-0.1, 0.1); train with
    :func:`train_toy` to get a model that actually removes shadows.
    """

    LAYOUT: Sequence[tuple[str, tuple[int, ...]]] = (
        ("k1", (3, 3, 3, 8)), ("b1", (8,)),
        ("k2", (3, 3, 8, 8)), ("b2", (8,)),
        ("k3", (3, 3, 8, 3)), ("b3", (3,)),
    )

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed
        self.name = f"tinycnn(seed={seed})"
        rng = Xoshiro256StarStar(seed)
        for pname, shape in self.LAYOUT:
            self.params[pname] = Tensor(rng.fill_uniform(shape, -0.1, 0.1),
                                        requires_grad=True)

    def forward_t(self, x: Tensor) -> Tensor:
        p = self.params
        h1 = ad.relu(ad.conv2d(x, p["k1"], p["b1"]))
        h2 = ad.relu(ad.conv2d(h1, p["k2"], p["b2"]))
        res = ad.conv2d(h2, p["k3"], p["b3"])
        return ad.clamp01(ad.add(x, res))

    def load_state(self, params: Mapping[str, np.ndarray]) -> None:
        for pname, shape in self.LAYOUT:
            if pname not in params:
                raise ParamsError(f"missing parameter tensor '{pname}'")
            arr = np.asarray(params[pname], dtype=np.float64)
            if arr.shape != shape:
                raise ParamsError(
                    f"parameter '{pname}' has shape {arr.shape}, expected {shape}")
            self.params[pname] = Tensor(arr.copy(), requires_grad=True)


def model_identity() -> IdentityModel:
    return IdentityModel()


def model_gainmap(blur_radius: int = 4, max_gain: float = 4.0) -> GainMapModel:
    return GainMapModel(blur_radius, max_gain)


def model_tinycnn(seed: int = 0) -> TinyCnnModel:
    return TinyCnnModel(seed)


def model_tinycnn_from_params(params: Mapping[str, np.ndarray]) -> TinyCnnModel:
    model = TinyCnnModel(seed=0)
    model.load_state(params)
    return model


class DivergenceError(ArithmeticError):
    """Training loss became non-finite."""


def train_toy(model: TapeModel,
              dataset: Sequence[tuple[Image, Image]],
              epochs: int,
              lr: float,
              seed: int = 0,
              on_epoch: Callable[[int, float], None] | None = None,
              ) -> dict[str, np.ndarray]:
    """Full-batch gradient descent on mean squared error.

    dataset holds (shadow, shadow-free) pairs of identical shape. Plain GD
    with no momentum keeps the run deterministic; `seed` is accepted for
    interface symmetry but the trainer draws no randomness itself. Returns
    a copy of the final parameters; per-epoch losses go to `on_epoch` and
    the module logger.
    """
    if not dataset:
        raise ValueError("training dataset must be non-empty")
    shape = dataset[0][0].shape
    for i, (shadow, free) in enumerate(dataset):
        if shadow.shape != free.shape or shadow.shape != shape:
            raise ValueError(
                f"dataset pair {i} has mismatched shapes "
                f"{shadow.shape} vs {free.shape}")
    n_values = int(np.prod(shape))

    for epoch in range(epochs):
        model.zero_grad()
        loss: Tensor | None = None
        for shadow, free in dataset:
            pred = model.forward_t(Tensor(shadow.data))
            err = ad.sub(pred, Tensor(free.data))
            term = ad.smul(ad.sqnorm(err), 1.0 / n_values)
            loss = term if loss is None else ad.add(loss, term)
        loss = ad.smul(loss, 1.0 / len(dataset))
        value = float(loss.data)
        if not np.isfinite(value):
            raise DivergenceError(
                f"training loss became non-finite at epoch {epoch}; "
                f"try a smaller lr than {lr}")
        loss.backward()
        for p in model.params.values():
            if p.grad is not None:
                p.data = p.data - lr * p.grad
        log.debug("epoch %d loss %.6g", epoch, value)
        if on_epoch is not None:
            on_epoch(epoch, value)
    return model.snapshot()


def save_params(params: Mapping[str, np.ndarray], path) -> None:
    """Write a named tensor map: magic, version, count, then per tensor the
    name, shape and float64 little-endian payload. Tensors are stored in
    sorted name order so files are byte-stable."""
    for name, arr in params.items():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter tensor '{name}' contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<II", PARAMS_VERSION, len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != PARAMS_MAGIC:
        raise ParamsError(f"bad magic {raw[:4]!r}, expected {PARAMS_MAGIC!r}")
    if len(raw) < 12:
        raise ParamsError("truncated header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != PARAMS_VERSION:
        raise ParamsError(f"unsupported version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        label = f"#{i}"
        try:
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            if len(raw) < pos + name_len:
                raise struct.error
            name = raw[pos:pos + name_len].decode("utf-8")
            label = repr(name)
            pos += name_len
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            n_bytes = int(np.prod(shape, dtype=np.int64)) * 8
            payload = raw[pos:pos + n_bytes]
            if len(payload) < n_bytes:
                raise struct.error
            pos += n_bytes
        except struct.error:
            raise ParamsError(
                f"truncated file while reading tensor {label}") from None
        out[name] = np.frombuffer(payload, dtype="<f8").astype(
            np.float64).reshape(shape)
    return out
