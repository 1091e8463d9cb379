"""Differentiable surrogate capsule encoder and its training loop.

The encoder maps an image to K object-capsule presences, twice over: a
"prior" head (sigmoid, values in [0, 1]) and a "posterior" head (softplus,
non-negative) shaped K x M over part capsules. Supervised training gives
the class-selective activation the attacks rely on: capsule c lights up
on class-c images and stays quiet otherwise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from capsevade import autodiff as ad
from capsevade.autodiff import ShapeError

HIDDEN = 64

PRIOR = "prior"
POSTERIOR = "posterior"
MODES = (PRIOR, POSTERIOR)

_PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

_MAGIC = b"CENC"
_VERSION = 1


class ModelFormatError(Exception):
    """Raised when a serialized encoder file is malformed."""


@dataclass(frozen=True)
class EncoderParams:
    """Weights of the two-layer surrogate encoder.

    Biases are stored as (1, n) rows so that every affine step is an exact
    shape-matched add against a single-row activation matrix.
    """

    w1: np.ndarray  # (H*W, HIDDEN)
    b1: np.ndarray  # (1, HIDDEN)
    w2: np.ndarray  # (HIDDEN, K)
    b2: np.ndarray  # (1, K)
    w3: np.ndarray  # (HIDDEN, K*M)
    b3: np.ndarray  # (1, K*M)
    k: int
    m: int
    height: int
    width: int

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_NAMES}


@dataclass(frozen=True)
class CapsuleOutput:
    prior: np.ndarray  # (K,), values in [0, 1]
    posterior: np.ndarray  # (K, M), non-negative


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings for the surrogate training run."""

    learning_rate: float = 3e-5
    momentum: float = 0.9
    epsilon: float = 1e-6
    decay_steps: int = 10000
    decay_rate: float = 0.96
    batch_size: int = 100
    epochs: int = 1500
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")


def _as_flat_image(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.size != params.n_pixels:
        raise ShapeError(
            f"expected {params.n_pixels} pixels "
            f"({params.height}x{params.width}), got {arr.size}"
        )
    return arr.reshape(1, params.n_pixels)


def _row_sum_matrix(k: int, m: int) -> np.ndarray:
    # maps a flat (1, K*M) posterior onto its K row sums
    return np.kron(np.eye(k), np.ones((m, 1)))


def _forward(params: EncoderParams, x_row: np.ndarray):
    """Plain-numpy forward pass, op-for-op identical to the graph version."""
    h = np.maximum(x_row @ params.w1 + params.b1, 0.0)
    prior = expit(h @ params.w2 + params.b2)
    post = np.logaddexp(0.0, h @ params.w3 + params.b3)
    return prior, post


def encode(params: EncoderParams, x: np.ndarray) -> CapsuleOutput:
    """Run the encoder on one image (2-D or flat, pixels in [0, 1])."""
    x_row = _as_flat_image(params, x)
    prior, post = _forward(params, x_row)
    return CapsuleOutput(prior=prior[0], posterior=post[0].reshape(params.k, params.m))


def presence_for(params: EncoderParams, x: np.ndarray, mode: str) -> np.ndarray:
    """K-vector of presences: the prior head, or posterior row sums."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    x_row = _as_flat_image(params, x)
    if mode == PRIOR:
        h = np.maximum(x_row @ params.w1 + params.b1, 0.0)
        return expit(h @ params.w2 + params.b2)[0]
    h = np.maximum(x_row @ params.w1 + params.b1, 0.0)
    post = np.logaddexp(0.0, h @ params.w3 + params.b3)
    return post[0].reshape(params.k, params.m).sum(axis=1)


def presence_from(params: EncoderParams, x_node: ad.Node, mode: str) -> ad.Node:
    """Graph node for the (1, K) presence vector of an existing image node.

    Only the head needed for ``mode`` is built, keeping attack graphs small.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    h = ad.relu(ad.add(ad.matmul(x_node, ad.const(params.w1)), ad.const(params.b1)))
    if mode == PRIOR:
        return ad.sigmoid(ad.add(ad.matmul(h, ad.const(params.w2)), ad.const(params.b2)))
    post = ad.softplus(ad.add(ad.matmul(h, ad.const(params.w3)), ad.const(params.b3)))
    return ad.matmul(post, ad.const(_row_sum_matrix(params.k, params.m)))


def presence_graph(params: EncoderParams, mode: str) -> tuple[ad.Node, str]:
    """(presence node, leaf name) for a (1, H*W) image leaf called "x"."""
    return presence_from(params, ad.leaf("x"), mode), "x"


@dataclass
class RmsPropState:
    """Running state of the RMSProp-with-momentum optimizer."""

    square_avg: dict[str, np.ndarray]
    buffer: dict[str, np.ndarray]
    step: int = 0


def init_rmsprop(params: dict[str, np.ndarray]) -> RmsPropState:
    return RmsPropState(
        square_avg={k: np.zeros_like(v) for k, v in params.items()},
        buffer={k: np.zeros_like(v) for k, v in params.items()},
    )


_RMSPROP_RHO = 0.9  # squared-gradient decay; fixed, not part of TrainConfig


def rmsprop_step(
    state: RmsPropState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    config: TrainConfig,
) -> tuple[RmsPropState, dict[str, np.ndarray]]:
    """One RMSProp-with-momentum update over a dict of parameter arrays.

    The learning rate decays by ``decay_rate`` every ``decay_steps`` steps
    (staircase), where ``state.step`` counts previously applied updates.
    """
    lr = config.learning_rate * config.decay_rate ** (state.step // config.decay_steps)
    new_params = {}
    for name, value in params.items():
        g = grads[name]
        a = _RMSPROP_RHO * state.square_avg[name] + (1.0 - _RMSPROP_RHO) * g * g
        b = config.momentum * state.buffer[name] + lr * g / np.sqrt(a + config.epsilon)
        state.square_avg[name] = a
        state.buffer[name] = b
        new_params[name] = value - b
    state.step += 1
    return state, new_params


_TIE_WEIGHT = 0.2  # weight of the posterior-row-sum tie term in the loss


def _loss_graph(n_pixels: int, k: int, m: int, batch: int):
    """Training loss over a (batch, n_pixels) image block.

    Binary cross-entropy of the prior head against one-hot class targets
    (written in logit form through softplus), plus a mean-squared tie that
    pulls each posterior row sum toward k times the matching prior.
    """
    x = ad.leaf("x")
    t = ad.leaf("targets")
    w1, b1 = ad.param("w1"), ad.param("b1")
    w2, b2 = ad.param("w2"), ad.param("b2")
    w3, b3 = ad.param("w3"), ad.param("b3")
    ones = ad.const(np.ones((batch, 1)))
    h = ad.relu(ad.add(ad.matmul(x, w1), ad.matmul(ones, b1)))
    zp = ad.add(ad.matmul(h, w2), ad.matmul(ones, b2))
    zq = ad.add(ad.matmul(h, w3), ad.matmul(ones, b3))
    bce = ad.reduce_mean(ad.sub(ad.softplus(zp), ad.mul(t, zp)))
    row_sums = ad.matmul(ad.softplus(zq), ad.const(_row_sum_matrix(k, m)))
    resid = ad.sub(row_sums, ad.mul(ad.sigmoid(zp), float(k)))
    tie = ad.reduce_mean(ad.mul(resid, resid))
    return ad.add(bce, ad.mul(tie, _TIE_WEIGHT))


def _init_params(rng: np.random.Generator, n_pixels: int, k: int, m: int):
    def xavier(n_in, n_out):
        limit = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-limit, limit, size=(n_in, n_out))

    return {
        "w1": xavier(n_pixels, HIDDEN),
        "b1": np.zeros((1, HIDDEN)),
        "w2": xavier(HIDDEN, k),
        "b2": np.zeros((1, k)),
        "w3": xavier(HIDDEN, k * m),
        "b3": np.zeros((1, k * m)),
    }


def train(
    config: TrainConfig,
    images: np.ndarray,
    labels: np.ndarray,
    n_capsules: int,
    n_parts: int = 24,
) -> EncoderParams:
    """Train the surrogate encoder; deterministic for a given seed.

    ``images`` is (N, H, W) with pixels in [0, 1]; ``labels`` holds class
    ids in 0..n_capsules-1. Capsule c is trained to fire on class c.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.ndim != 3 or len(images) == 0:
        raise ValueError("images must be a non-empty (N, H, W) array")
    if len(labels) != len(images):
        raise ValueError("images and labels must have equal length")
    if labels.min() < 0 or labels.max() >= n_capsules:
        raise ValueError(f"labels must lie in 0..{n_capsules - 1}")

    n, height, width = images.shape
    n_pixels = height * width
    flat = images.reshape(n, n_pixels)
    onehot = np.zeros((n, n_capsules))
    onehot[np.arange(n), labels] = 1.0

    rng = np.random.default_rng(config.seed)
    params = _init_params(rng, n_pixels, n_capsules, n_parts)
    # biases stay frozen at zero: an all-black image then maps to the
    # neutral presence vector instead of electing a default capsule,
    # which would make it unattackable by pure presence suppression
    trained = ("w1", "w2", "w3")
    state = init_rmsprop({name: params[name] for name in trained})
    graphs: dict[int, ad.Node] = {}

    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = len(idx)
            if batch not in graphs:
                graphs[batch] = _loss_graph(n_pixels, n_capsules, n_parts, batch)
            bindings = {"x": flat[idx], "targets": onehot[idx], **params}
            grads = ad.gradients(graphs[batch], trained, bindings)
            state, updated = rmsprop_step(
                state, {name: params[name] for name in trained}, grads, config
            )
            params.update(updated)

    return EncoderParams(
        w1=params["w1"],
        b1=params["b1"],
        w2=params["w2"],
        b2=params["b2"],
        w3=params["w3"],
        b3=params["b3"],
        k=n_capsules,
        m=n_parts,
        height=height,
        width=width,
    )


def save_encoder(params: EncoderParams, path) -> None:
    """Write the little-endian binary model file (bit-exact roundtrip)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(
            struct.pack(
                "<5I", _VERSION, params.k, params.m, params.height, params.width
            )
        )
        for name in _PARAM_NAMES:
            tensor = np.ascontiguousarray(getattr(params, name), dtype=np.float64)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.tobytes())


def load_encoder(path) -> EncoderParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ModelFormatError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, k, m, height, width = struct.unpack_from("<5I", blob, 4)
    except struct.error as exc:
        raise ModelFormatError(f"{path}: truncated header") from exc
    if version != _VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    offset = 4 + 20
    tensors = {}
    for name in _PARAM_NAMES:
        try:
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            payload = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
        except (struct.error, ValueError) as exc:
            raise ModelFormatError(f"{path}: truncated tensor {name!r}") from exc
        tensors[name] = payload.reshape(shape).copy()
    if offset != len(blob):
        raise ModelFormatError(f"{path}: trailing bytes after payload")
    return EncoderParams(k=k, m=m, height=height, width=width, **tensors)
