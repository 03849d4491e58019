"""Inference-only hybrid CNN/Transformer encoder-decoder in numpy.

Three encoder stages of dilated convolution blocks followed by attention
blocks produce features at strides 4, 8 and 16.  The decoder upsamples
with skip connections and emits a sigmoid disparity map and a unit normal
map at each requested scale.  Weights are seeded random draws: the point
is to exercise shapes, ranges and determinism, not to predict depth.

Feature maps are ``(C, H, W)`` float64 arrays.  All matrix products are
split into fixed-size row bands so that the result does not depend on
how many worker threads evaluate them.
"""

from __future__ import annotations

import configparser
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, ParameterError
from .grid_core import avg_pool

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
BAND_ROWS = 8
TOKEN_CHUNK = 256
LN_EPS = 1e-6
LOGIT_CLIP = 30.0


def receptive_field(k: int, d: int) -> int:
    """Span of a single dilated convolution: ``(k - 1) * d + 1``."""
    if int(k) != k or int(d) != d or k < 1 or d < 1:
        raise ParameterError(f"kernel size and dilation must be positive integers, got k={k}, d={d}")
    return (int(k) - 1) * int(d) + 1


@dataclass(frozen=True)
class NetConfig:
    dims: tuple = (32, 64, 128)
    depth: tuple = (3, 3, 6)
    transformer_blocks: tuple = (1, 1, 2)
    dilations: tuple = ((1, 2), (1, 2), (1, 2, 3, 1))
    decoder_channels: tuple = (16, 32, 64)
    scales: tuple = (0, 1, 2)
    heads: tuple | None = None
    mlp_ratio: float = 4.0
    eps: float = 1e-7
    input_mean: tuple = IMAGENET_MEAN
    input_std: tuple = IMAGENET_STD
    use_skips: bool = True

    def __post_init__(self):
        for name in ("dims", "depth", "transformer_blocks", "decoder_channels"):
            if len(getattr(self, name)) != 3:
                raise ParameterError(f"{name} needs one entry per stage (3), got {getattr(self, name)}")
        if len(self.dilations) != 3:
            raise ParameterError("dilations needs one list per stage (3)")
        for i in range(3):
            if not 0 <= self.transformer_blocks[i] <= self.depth[i]:
                raise ParameterError(f"stage {i}: transformer_blocks must lie in [0, depth]")
            n_conv = self.depth[i] - self.transformer_blocks[i]
            if len(self.dilations[i]) != n_conv:
                raise ParameterError(f"stage {i}: expected {n_conv} dilations, got {len(self.dilations[i])}")
            if any(d < 1 for d in self.dilations[i]):
                raise ParameterError(f"stage {i}: dilations must be >= 1")
        if any(c < 1 for c in (*self.dims, *self.decoder_channels)):
            raise ParameterError("channel counts must be positive")
        if not self.scales or any(s not in (0, 1, 2) for s in self.scales):
            raise ParameterError(f"scales must be a non-empty subset of {{0, 1, 2}}, got {self.scales}")
        for i, h in enumerate(self.stage_heads):
            if h < 1 or self.dims[i] % h:
                raise ParameterError(f"stage {i}: {h} heads do not divide {self.dims[i]} channels")
        if len(self.input_mean) != 3 or len(self.input_std) != 3 or min(self.input_std) <= 0:
            raise ParameterError("input_mean/input_std need 3 entries with positive std")
        if self.mlp_ratio <= 0 or self.eps <= 0:
            raise ParameterError("mlp_ratio and eps must be positive")

    @property
    def stage_heads(self) -> tuple:
        if self.heads is not None:
            return tuple(self.heads)
        return tuple(max(1, d // 32) for d in self.dims)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["heads"] = list(self.stage_heads)
        return out

    @classmethod
    def from_text(cls, text: str) -> "NetConfig":
        """Parse ``key = value`` lines.

        Lists are comma separated; ``dilations`` separates stages with
        ``;`` (``1,2; 1,2; 1,2,3,1``).  Unknown keys are rejected.
        """
        parser = configparser.ConfigParser()
        try:
            parser.read_string("[net]\n" + text)
        except configparser.Error as exc:
            raise FormatError(f"malformed net config: {exc}") from exc
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in parser["net"].items():
            if key not in known:
                raise FormatError(f"unknown net config key {key!r}")
            kwargs[key] = _parse_value(key, raw.strip())
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "NetConfig":
        try:
            return cls.from_text(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise FormatError(f"cannot read net config {path}: {exc}") from exc


def _parse_value(key, raw):
    try:
        if key == "dilations":
            return tuple(tuple(int(v) for v in part.split(",")) if part.strip() else ()
                         for part in raw.split(";"))
        if key in ("mlp_ratio", "eps"):
            return float(raw)
        if key == "use_skips":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if key in ("input_mean", "input_std"):
            return tuple(float(v) for v in raw.split(","))
        return tuple(int(v) for v in raw.split(","))
    except ValueError as exc:
        raise FormatError(f"bad value for {key}: {raw!r}") from exc


class _Init:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) draws, in call order."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params = {}

    def conv(self, name, c_out, c_in, k):
        bound = 1.0 / math.sqrt(c_in * k * k)
        self.params[f"{name}.w"] = self.rng.uniform(-bound, bound, (c_out, c_in, k, k))
        self.params[f"{name}.b"] = self.rng.uniform(-bound, bound, c_out)

    def linear(self, name, c_in, c_out):
        bound = 1.0 / math.sqrt(c_in)
        self.params[f"{name}.w"] = self.rng.uniform(-bound, bound, (c_in, c_out))
        self.params[f"{name}.b"] = self.rng.uniform(-bound, bound, c_out)

    def norm(self, name, c):
        self.params[f"{name}.g"] = np.ones(c)
        self.params[f"{name}.b"] = np.zeros(c)


@dataclass(frozen=True)
class NetWeights:
    params: dict
    seed: int

    def __getitem__(self, key):
        return self.params[key]

    @property
    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def build_weights(cfg: NetConfig, seed: int = 0) -> NetWeights:
    init = _Init(seed)
    d0 = cfg.dims[0]
    init.conv("stem.0", d0, 3, 3)
    init.conv("stem.1", d0, d0, 3)
    init.conv("stem.2", d0, d0, 3)
    init.conv("stem.3", d0, d0 + 3, 3)
    for i in range(3):
        c = cfg.dims[i]
        n_conv = cfg.depth[i] - cfg.transformer_blocks[i]
        for j in range(cfg.depth[i]):
            name = f"stage{i}.block{j}"
            if j < n_conv:
                init.conv(f"{name}.dw", c, c, 3)
                init.norm(f"{name}.norm", c)
                init.conv(f"{name}.pw", c, c, 1)
            else:
                hidden = int(round(c * cfg.mlp_ratio))
                init.norm(f"{name}.norm1", c)
                init.linear(f"{name}.qkv", c, 3 * c)
                init.linear(f"{name}.proj", c, c)
                init.norm(f"{name}.norm2", c)
                init.linear(f"{name}.fc1", c, hidden)
                init.linear(f"{name}.fc2", hidden, c)
        if i < 2:
            init.conv(f"down{i}", cfg.dims[i + 1], c + 3, 3)
    dec = cfg.decoder_channels
    for i in (2, 1, 0):
        c_in = cfg.dims[2] if i == 2 else dec[i + 1]
        init.conv(f"dec{i}.up0", dec[i], c_in, 3)
        init.norm(f"dec{i}.up0.norm", dec[i])
        skip = cfg.dims[i - 1] if (cfg.use_skips and i > 0) else 0
        init.conv(f"dec{i}.up1", dec[i], dec[i] + skip, 3)
        init.norm(f"dec{i}.up1.norm", dec[i])
        if i in cfg.scales:
            init.conv(f"dec{i}.disp", 1, dec[i], 3)
            init.conv(f"dec{i}.normal", 3, dec[i], 3)
    return NetWeights(params=init.params, seed=seed)


class _Runner:
    """Maps work over fixed-size chunks, serially or on a thread pool."""

    def __init__(self, pool=None):
        self.pool = pool

    def map(self, fn, items):
        items = list(items)
        if self.pool is None or len(items) < 2:
            return [fn(it) for it in items]
        return list(self.pool.map(fn, items))


@contextmanager
def _runner(workers: int):
    if int(workers) != workers or workers < 1:
        raise ParameterError(f"workers must be an integer >= 1, got {workers}")
    if workers == 1:
        yield _Runner()
    else:
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            yield _Runner(pool)


def conv2d(x, w, b, stride: int = 1, dilation: int = 1, run: _Runner | None = None) -> np.ndarray:
    """Zero-padded 2-D cross-correlation of ``(C, H, W)`` input."""
    run = run or _Runner()
    c_out, c_in, k, _ = w.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"conv expects {c_in} input channels, got {x.shape[0]}")
    pad = dilation * (k - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    h_out = (x.shape[1] + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    w_out = (x.shape[2] + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    wmat = w.reshape(c_out, c_in * k * k)

    def band(r0):
        r1 = min(r0 + BAND_ROWS, h_out)
        taps = [
            xp[:, r0 * stride + ky * dilation:(r1 - 1) * stride + ky * dilation + 1:stride,
               kx * dilation:(w_out - 1) * stride + kx * dilation + 1:stride]
            for ky in range(k) for kx in range(k)
        ]
        cols = np.stack(taps, axis=1).reshape(c_in * k * k, (r1 - r0) * w_out)
        return (wmat @ cols + b[:, None]).reshape(c_out, r1 - r0, w_out)

    return np.concatenate(run.map(band, range(0, h_out, BAND_ROWS)), axis=1)


def _rows_matmul(a, w, b, run: _Runner) -> np.ndarray:
    parts = run.map(lambda r0: a[r0:r0 + TOKEN_CHUNK] @ w + b, range(0, a.shape[0], TOKEN_CHUNK))
    return np.concatenate(parts, axis=0)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def _layer_norm_tokens(t, g, b):
    mu = t.mean(axis=1, keepdims=True)
    var = ((t - mu) ** 2).mean(axis=1, keepdims=True)
    return (t - mu) / np.sqrt(var + LN_EPS) * g + b


def _layer_norm_channels(x, g, b):
    mu = x.mean(axis=0, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=0, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g[:, None, None] + b[:, None, None]


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def upsample2(x):
    """Nearest-neighbour 2x upsampling of ``(C, H, W)``."""
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def conv_block(x, w: NetWeights, name: str, dilation: int, run: _Runner):
    """Residual dilated 3x3 conv -> channel LayerNorm -> GELU -> 1x1 conv."""
    y = conv2d(x, w[f"{name}.dw.w"], w[f"{name}.dw.b"], dilation=dilation, run=run)
    y = gelu(_layer_norm_channels(y, w[f"{name}.norm.g"], w[f"{name}.norm.b"]))
    y = conv2d(y, w[f"{name}.pw.w"], w[f"{name}.pw.b"], run=run)
    return x + y


def transformer_block(x, w: NetWeights, name: str, heads: int, run: _Runner, record=None):
    """Pre-norm multi-head self-attention over all pixels, then an MLP.

    When ``record`` is a list, each head's attention matrix is appended.
    """
    c, h, wd = x.shape
    t = x.reshape(c, h * wd).T
    n = t.shape[0]
    dh = c // heads
    qkv = _rows_matmul(_layer_norm_tokens(t, w[f"{name}.norm1.g"], w[f"{name}.norm1.b"]),
                       w[f"{name}.qkv.w"], w[f"{name}.qkv.b"], run)
    q, k, v = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
    scale = 1.0 / math.sqrt(dh)
    heads_out = []
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]

        def chunk(r0, qh=qh, kh=kh, vh=vh):
            a = softmax((qh[r0:r0 + TOKEN_CHUNK] @ kh.T) * scale, axis=1)
            return a, a @ vh

        parts = run.map(chunk, range(0, n, TOKEN_CHUNK))
        if record is not None:
            record.append(np.concatenate([p[0] for p in parts], axis=0))
        heads_out.append(np.concatenate([p[1] for p in parts], axis=0))
    attn = np.concatenate(heads_out, axis=1)
    t = t + _rows_matmul(attn, w[f"{name}.proj.w"], w[f"{name}.proj.b"], run)
    hidden = gelu(_rows_matmul(_layer_norm_tokens(t, w[f"{name}.norm2.g"], w[f"{name}.norm2.b"]),
                               w[f"{name}.fc1.w"], w[f"{name}.fc1.b"], run))
    t = t + _rows_matmul(hidden, w[f"{name}.fc2.w"], w[f"{name}.fc2.b"], run)
    return t.T.reshape(c, h, wd)


@dataclass
class FeaturePyramid:
    F1: np.ndarray
    F2: np.ndarray
    F3: np.ndarray

    def __iter__(self):
        return iter((self.F1, self.F2, self.F3))

    def __getitem__(self, i):
        return (self.F1, self.F2, self.F3)[i]

    def shapes(self):
        return [tuple(f.shape) for f in self]


def _to_chw(x, cfg: NetConfig):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise DimensionError(f"encoder input must be (H, W, 3), got {x.shape}")
    h, w = x.shape[:2]
    if h % 16 or w % 16 or h == 0 or w == 0:
        raise DimensionError(f"input size {h}x{w} must be a positive multiple of 16; pad it first")
    mean = np.asarray(cfg.input_mean)
    std = np.asarray(cfg.input_std)
    return np.ascontiguousarray(((x - mean) / std).transpose(2, 0, 1))


def encoder_forward(x, cfg: NetConfig, w: NetWeights, workers: int = 1, record_attention=None) -> FeaturePyramid:
    """Hierarchical features at strides 4, 8 and 16 from an ``(H, W, 3)`` image."""
    xn = _to_chw(x, cfg)
    # pooled inputs at 1/2, 1/4, 1/8, 1/16; the last level is built but unused
    x_down = [avg_pool(xn.transpose(1, 2, 0), 2 ** i).transpose(2, 0, 1) for i in range(1, 5)]
    feats = []
    with _runner(workers) as run:
        y = gelu(conv2d(xn, w["stem.0.w"], w["stem.0.b"], stride=2, run=run))
        y = gelu(conv2d(y, w["stem.1.w"], w["stem.1.b"], run=run))
        y = gelu(conv2d(y, w["stem.2.w"], w["stem.2.b"], run=run))
        y = gelu(conv2d(np.concatenate([y, x_down[0]]), w["stem.3.w"], w["stem.3.b"], stride=2, run=run))
        for i in range(3):
            n_conv = cfg.depth[i] - cfg.transformer_blocks[i]
            for j in range(cfg.depth[i]):
                name = f"stage{i}.block{j}"
                if j < n_conv:
                    y = conv_block(y, w, name, cfg.dilations[i][j], run)
                else:
                    y = transformer_block(y, w, name, cfg.stage_heads[i], run, record_attention)
            feats.append(y)
            if i < 2:
                y = conv2d(np.concatenate([y, x_down[i + 1]]), w[f"down{i}.w"], w[f"down{i}.b"],
                           stride=2, run=run)
    return FeaturePyramid(*feats)


def _sigmoid(z):
    # clipping keeps the output strictly inside (0, 1) in float64
    return 1.0 / (1.0 + np.exp(-np.clip(z, -LOGIT_CLIP, LOGIT_CLIP)))


def normalize_normals(n, eps):
    """Unit-normalise along the channel axis, dividing by ``max(|n|, eps)``.

    A floored norm keeps ``| |n| - 1 |`` at rounding level for every vector
    longer than ``eps``; an additive ``|n| + eps`` would miss 1e-5 once
    ``|n|`` drops below 1e-2.
    """
    return n / np.maximum(np.sqrt(np.sum(n * n, axis=0, keepdims=True)), eps)


def _dec_block(x, w: NetWeights, name: str, run: _Runner):
    """3x3 conv -> channel LayerNorm -> GELU; the norm keeps head inputs O(1)."""
    y = conv2d(x, w[f"{name}.w"], w[f"{name}.b"], run=run)
    return gelu(_layer_norm_channels(y, w[f"{name}.norm.g"], w[f"{name}.norm.b"]))


def decoder_forward(F: FeaturePyramid, cfg: NetConfig, w: NetWeights, workers: int = 1) -> dict:
    """Per-scale ``{"disparity": (H, W), "normals": (H, W, 3)}`` keyed by scale."""
    for i, f in enumerate(F):
        if f.ndim != 3 or f.shape[0] != cfg.dims[i]:
            raise DimensionError(f"feature {i} has shape {f.shape}, expected {cfg.dims[i]} channels")
    for i in (1, 2):
        prev = F[i - 1].shape[1:]
        if F[i].shape[1:] != tuple(-(-s // 2) for s in prev):
            raise DimensionError(f"feature {i} spatial size {F[i].shape[1:]} is not half of {prev}")
    outputs = {}
    x = F[2]
    with _runner(workers) as run:
        for i in (2, 1, 0):
            x = upsample2(_dec_block(x, w, f"dec{i}.up0", run))
            if cfg.use_skips and i > 0:
                x = np.concatenate([x, F[i - 1]])
            x = _dec_block(x, w, f"dec{i}.up1", run)
            if i in cfg.scales:
                disp = upsample2(conv2d(x, w[f"dec{i}.disp.w"], w[f"dec{i}.disp.b"], run=run))
                normal = upsample2(conv2d(x, w[f"dec{i}.normal.w"], w[f"dec{i}.normal.b"], run=run))
                outputs[i] = {
                    "disparity": _sigmoid(disp[0]),
                    "normals": normalize_normals(normal, cfg.eps).transpose(1, 2, 0),
                }
    return dict(sorted(outputs.items()))


@dataclass
class AquaNet:
    """Config plus seeded weights; ``forward`` runs encoder and decoder."""

    cfg: NetConfig = field(default_factory=NetConfig)
    seed: int = 0

    def __post_init__(self):
        self.weights = build_weights(self.cfg, self.seed)

    def forward(self, x, workers: int = 1, record_attention=None):
        F = encoder_forward(x, self.cfg, self.weights, workers, record_attention)
        return F, decoder_forward(F, self.cfg, self.weights, workers)


def probe_receptive_field(dilation: int, k: int = 3, size: int | None = None) -> int:
    """Measure the span of one dilated conv layer on an impulse input.

    Uses an all-ones kernel so every tap that touches the impulse shows up.
    """
    span = receptive_field(k, dilation)
    size = size or 2 * span + 1
    x = np.zeros((1, size, size))
    x[0, size // 2, size // 2] = 1.0
    y = conv2d(x, np.ones((1, 1, k, k)), np.zeros(1), dilation=dilation)
    hit_rows = np.flatnonzero(np.any(y[0] != 0, axis=1))
    return int(hit_rows.max() - hit_rows.min() + 1)
