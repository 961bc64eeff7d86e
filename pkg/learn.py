"""
FeatureNet, AttentionNet and PoseNet on the autodiff engine, trained against IMU pose proxies.

A frame pair is stacked as two channels, reduced 16x by a strided conv stack, flattened into
one token per 16x16 block and passed through self-attention. The attention each token receives
becomes its score, which drives both pooling and the binary search-space mask.
"""

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

import autodiff as ad
import config
from autodiff import Tensor
from errors import InvalidArgumentError, ParseError, TrainingDivergedError
from geometry import Pose, rotation_angle, so3_exp, so3_log
from imu import ImuSample, ImuState, window_proxies
from vision import BinaryMask, Image

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ATVO"
CHECKPOINT_HEADER_KEYS = ("names", "shapes", "config")
DOWNSAMPLE = 16
CONV_LAYERS = 4
KERNEL = 3
POOLING_MODES = ("attention", "mean")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 200
    window_size: int = 4
    mask_rho: float = 0.51
    rng_seed: int = 0
    downscale: int = 1
    channels: int = 32
    heads: int = 1
    hidden: int = 64
    pooling: str = "attention"
    log_every: int = 10

    def __post_init__(self):
        if not 0.0 < self.mask_rho <= 1.0:
            raise InvalidArgumentError(f"mask_rho must be in (0, 1], got {self.mask_rho}")
        # zero is accepted so a run can be replayed without moving the parameters
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise InvalidArgumentError(f"learning_rate must be finite and non-negative, got {self.learning_rate}")
        if self.epochs < 0 or self.window_size < 2:
            raise InvalidArgumentError("epochs must be >= 0 and window_size >= 2")
        if self.downscale not in (1, 2, 4, 8):
            raise InvalidArgumentError(f"downscale must be 1, 2, 4 or 8, got {self.downscale}")
        if not 1 <= self.channels <= 256 or self.heads < 1 or self.channels % self.heads:
            raise InvalidArgumentError(f"channels ({self.channels}) must be in [1, 256] and divisible by heads")
        if self.hidden < 1:
            raise InvalidArgumentError("hidden must be positive")
        if self.pooling not in POOLING_MODES:
            raise InvalidArgumentError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")

    @property
    def block_size(self):
        """Image pixels covered by one token side."""
        return DOWNSAMPLE * self.downscale

    @classmethod
    def from_dict(cls, d: Dict):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidArgumentError(f"Unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


# --- parameters ---


def glorot_uniform(rng, shape, fan_in, fan_out, name):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True, name=name)


def zeros(shape, name):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


@dataclass
class FeatureNetParams:
    weights: List[Tensor]
    biases: List[Tensor]

    @classmethod
    def init(cls, rng, channels):
        plan = [2, 8, 16, 32, channels]
        weights, biases = [], []
        for i, (cin, cout) in enumerate(zip(plan[:-1], plan[1:])):
            fan_in, fan_out = cin * KERNEL * KERNEL, cout * KERNEL * KERNEL
            weights.append(glorot_uniform(rng, (cout, cin, KERNEL, KERNEL), fan_in, fan_out, f"feature.conv{i}.weight"))
            biases.append(zeros((cout,), f"feature.conv{i}.bias"))
        return cls(weights, biases)

    def parameters(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    heads: int = 1

    @classmethod
    def init(cls, rng, d, heads=1):
        return cls(
            glorot_uniform(rng, (d, d), d, d, "attention.w_q"),
            glorot_uniform(rng, (d, d), d, d, "attention.w_k"),
            glorot_uniform(rng, (d, d), d, d, "attention.w_v"),
            heads,
        )

    def parameters(self):
        yield self.w_q
        yield self.w_k
        yield self.w_v


@dataclass
class PoseNetParams:
    w_x: Tensor
    w_h: Tensor
    b: Tensor
    w_out: Tensor
    b_out: Tensor

    @property
    def hidden(self):
        return self.w_h.shape[0]

    @classmethod
    def init(cls, rng, input_dim, hidden=64):
        return cls(
            glorot_uniform(rng, (input_dim, 4 * hidden), input_dim, 4 * hidden, "pose.lstm.w_x"),
            glorot_uniform(rng, (hidden, 4 * hidden), hidden, 4 * hidden, "pose.lstm.w_h"),
            zeros((4 * hidden,), "pose.lstm.b"),
            glorot_uniform(rng, (hidden, 6), hidden, 6, "pose.head.weight"),
            zeros((6,), "pose.head.bias"),
        )

    def parameters(self):
        yield from (self.w_x, self.w_h, self.b, self.w_out, self.b_out)


@dataclass(frozen=True)
class Pose6Dof:
    """Translation in meters plus so(3) log rotation in radians."""

    translation: Tuple[float, float, float]
    rotation: Tuple[float, float, float]

    def __post_init__(self):
        t = tuple(float(v) for v in np.asarray(self.translation).reshape(3))
        r = tuple(float(v) for v in np.asarray(self.rotation).reshape(3))
        if not all(math.isfinite(v) for v in t + r):
            raise InvalidArgumentError("Pose6Dof must be finite")
        if np.linalg.norm(r) >= math.pi:
            raise InvalidArgumentError(f"Rotation vector norm {np.linalg.norm(r):.6f} must be below pi")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", r)

    @classmethod
    def from_pose(cls, pose: Pose):
        return cls(pose.translation, so3_log(pose.R))

    @classmethod
    def from_array(cls, values):
        v = np.asarray(values, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    def as_array(self):
        return np.array(self.translation + self.rotation)

    def to_pose(self):
        return Pose.from_rt(so3_exp(self.rotation), self.translation)


# --- forward passes ---


def downscale_image(pixels, factor):
    """Block-average by an integer factor, edge-padding to a multiple of it."""
    if factor == 1:
        return pixels
    H, W = pixels.shape
    ph, pw = -H % factor, -W % factor
    padded = np.pad(pixels, ((0, ph), (0, pw)), mode="edge")
    return padded.reshape(padded.shape[0] // factor, factor, padded.shape[1] // factor, factor).mean(axis=(1, 3))


def stack_pair(img_a: Image, img_b: Image, downscale=1) -> np.ndarray:
    """(2, H', W') array in [0, 1], zero-padded to multiples of 16."""
    if img_a.shape != img_b.shape:
        raise InvalidArgumentError(
            f"Image pair sizes differ: {img_a.width}x{img_a.height} vs {img_b.width}x{img_b.height}"
        )
    a = downscale_image(img_a.pixels.astype(np.float64) / 255.0, downscale)
    b = downscale_image(img_b.pixels.astype(np.float64) / 255.0, downscale)
    H, W = a.shape
    pad = ((0, 0), (0, -H % DOWNSAMPLE), (0, -W % DOWNSAMPLE))
    return np.pad(np.stack([a, b]), pad)


def featurenet_forward(params: FeatureNetParams, img_a: Image, img_b: Image, downscale=1) -> Tensor:
    x = Tensor(stack_pair(img_a, img_b, downscale))
    for w, b in zip(params.weights, params.biases):
        x = ad.relu(ad.conv2d(x, w, b, stride=2, padding=1))
    return x


def attention_forward(params: AttentionParams, features: Tensor) -> Tuple[Tensor, Tensor]:
    """Returns (attended tokens (T, C), per-token scores (T,)) with T = M * N."""
    C, M, N = features.shape
    tokens = ad.transpose(ad.reshape(features, (C, M * N)))
    dh = C // params.heads
    outputs, scores = [], None
    for h in range(params.heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        q = tokens @ params.w_q[cols]
        k = tokens @ params.w_k[cols]
        v = tokens @ params.w_v[cols]
        A = ad.softmax((q @ ad.transpose(k)) * (1.0 / math.sqrt(dh)), axis=-1)
        outputs.append(A @ v)
        received = ad.mean(A, axis=0)
        scores = received if scores is None else scores + received
    attended = outputs[0] if params.heads == 1 else ad.concat(outputs, axis=1)
    if params.heads > 1:
        scores = scores * (1.0 / params.heads)
    return attended, scores


def pool_tokens(attended: Tensor, scores: Tensor, grid_shape, pooling="attention") -> Tensor:
    """One (1, C) vector per frame pair."""
    if pooling == "mean":
        C = attended.shape[1]
        return ad.reshape(ad.global_avg_pool(ad.reshape(ad.transpose(attended), (C,) + tuple(grid_shape))), (1, C))
    return ad.reshape(scores, (1, -1)) @ attended


def lstm_step(params: PoseNetParams, x: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
    H = params.hidden
    z = x @ params.w_x + h @ params.w_h + params.b
    i = ad.sigmoid(z[:, 0:H])
    f = ad.sigmoid(z[:, H : 2 * H])
    g = ad.tanh(z[:, 2 * H : 3 * H])
    o = ad.sigmoid(z[:, 3 * H : 4 * H])
    c = f * c + i * g
    return o * ad.tanh(c), c


def posenet_forward(params: PoseNetParams, window_features: Sequence[Tensor]) -> List[Tensor]:
    """Per-step 6-vectors (translation, so(3) rotation); state starts at zero every call."""
    if not window_features:
        raise InvalidArgumentError("PoseNet needs a non-empty feature sequence")
    h = Tensor(np.zeros((1, params.hidden)))
    c = Tensor(np.zeros((1, params.hidden)))
    outputs = []
    for x in window_features:
        h, c = lstm_step(params, ad.reshape(x, (1, -1)), h, c)
        outputs.append(ad.reshape(h @ params.w_out + params.b_out, (6,)))
    return outputs


def _pose_target(pose) -> np.ndarray:
    if isinstance(pose, Pose6Dof):
        return pose.as_array()
    return np.concatenate([pose.translation, so3_log(pose.R)])


def consistency_loss(pred: Sequence, proxy: Sequence[Pose]) -> Tensor:
    """Component-mean squared error over the window's 6-DoF vectors."""
    if len(pred) != len(proxy):
        raise InvalidArgumentError(f"Prediction length {len(pred)} differs from proxy length {len(proxy)}")
    if not pred:
        raise InvalidArgumentError("Empty window")
    rows = [ad.reshape(p if isinstance(p, Tensor) else Tensor(_pose_target(p)), (1, 6)) for p in pred]
    target = np.stack([_pose_target(p) for p in proxy])
    return ad.mse(ad.concat(rows, axis=0), Tensor(target))


# --- model ---


@dataclass
class TrainingWindow:
    """W + 1 consecutive frames with the W IMU proxies between them."""

    index: int
    images: List[Image]
    proxies: List[Pose]

    def __post_init__(self):
        if len(self.images) != len(self.proxies) + 1:
            raise InvalidArgumentError(f"Window needs {len(self.proxies) + 1} images, got {len(self.images)}")


@dataclass
class WindowOutput:
    poses: List[Tensor]
    scores: List[Tensor]
    grid_shape: Tuple[int, int]


class AttentivePoseModel:
    def __init__(self, train_config: TrainConfig, seed: Optional[int] = None):
        self.config = train_config
        self.seed = train_config.rng_seed if seed is None else seed
        rng = np.random.default_rng(self.seed)
        self.feature = FeatureNetParams.init(rng, train_config.channels)
        self.attention = AttentionParams.init(rng, train_config.channels, train_config.heads)
        self.pose = PoseNetParams.init(rng, train_config.channels, train_config.hidden)

    def parameters(self) -> List[Tensor]:
        return [*self.feature.parameters(), *self.attention.parameters(), *self.pose.parameters()]

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(p.name, p) for p in self.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def pair_scores(self, img_a: Image, img_b: Image) -> Tuple[Tensor, Tensor, Tuple[int, int]]:
        features = featurenet_forward(self.feature, img_a, img_b, self.config.downscale)
        attended, scores = attention_forward(self.attention, features)
        return attended, scores, features.shape[1:]

    def forward_window(self, images: Sequence[Image]) -> WindowOutput:
        pooled, all_scores, grid = [], [], None
        for img_a, img_b in zip(images[:-1], images[1:]):
            attended, scores, grid = self.pair_scores(img_a, img_b)
            pooled.append(pool_tokens(attended, scores, grid, self.config.pooling))
            all_scores.append(scores)
        return WindowOutput(posenet_forward(self.pose, pooled), all_scores, tuple(grid))

    def predict(self, window: TrainingWindow) -> List[Pose6Dof]:
        return [Pose6Dof.from_array(t.data) for t in self.forward_window(window.images).poses]


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * p.grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * p.grad**2
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


@dataclass
class TrainResult:
    model: AttentivePoseModel
    history: List[float] = field(default_factory=list)


def build_windows(
    images: Sequence[Image],
    frame_timestamps: Sequence[float],
    imu_samples: Sequence[ImuSample],
    window_size: int,
    frame_states: Optional[Sequence[ImuState]] = None,
) -> List[TrainingWindow]:
    """Cut a sequence into non-overlapping windows paired with their IMU proxies."""
    starts = None
    if frame_states is not None:
        starts = frame_states[::window_size]
    windows = []
    for k, proxies in window_proxies(imu_samples, frame_timestamps, window_size, starts):
        first = k * window_size
        windows.append(TrainingWindow(k, list(images[first : first + window_size + 1]), proxies))
    return windows


def train(
    train_config: TrainConfig,
    windows: Sequence[TrainingWindow],
    model: Optional[AttentivePoseModel] = None,
    progress: Optional[bool] = None,
) -> TrainResult:
    """Adam over every window each epoch; history holds the per-epoch mean loss."""
    if not windows:
        raise InvalidArgumentError("Training needs at least one window")
    model = model or AttentivePoseModel(train_config)
    optimizer = Adam(
        model.parameters(), train_config.learning_rate, train_config.beta1, train_config.beta2, train_config.epsilon
    )
    show = config.progress_enabled() if progress is None else progress
    history: List[float] = []
    last_finite = None
    epochs = tqdm(range(train_config.epochs), desc="train", unit="epoch", disable=not show)
    for epoch in epochs:
        total = 0.0
        for window in windows:
            model.zero_grad()
            output = model.forward_window(window.images)
            loss = consistency_loss(output.poses, window.proxies)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, last_finite)
            loss.backward()
            optimizer.step()
            total += value
            logger.debug("epoch %d window %d loss %.6g", epoch, window.index, value)
        mean_loss = total / len(windows)
        if not math.isfinite(mean_loss):
            raise TrainingDivergedError(epoch, last_finite)
        last_finite = epoch
        history.append(mean_loss)
        epochs.set_postfix(loss=f"{mean_loss:.4g}")
        if train_config.log_every and (epoch % train_config.log_every == 0 or epoch == train_config.epochs - 1):
            logger.info("epoch %d/%d mean loss %.6g", epoch + 1, train_config.epochs, mean_loss)
    return TrainResult(model, history)


def evaluate_consistency(model: AttentivePoseModel, windows: Sequence[TrainingWindow]) -> Dict[str, float]:
    """Mean translation (m) and rotation (rad) gaps between PoseNet output and IMU proxies."""
    t_err, r_err = [], []
    for window in windows:
        for pred, proxy in zip(model.predict(window), window.proxies):
            estimate = pred.to_pose()
            t_err.append(float(np.linalg.norm(estimate.translation - proxy.translation)))
            r_err.append(rotation_angle(estimate.R.T @ proxy.R))
    if not t_err:
        raise InvalidArgumentError("No windows to evaluate")
    return {"translation_error": float(np.mean(t_err)), "rotation_error": float(np.mean(r_err)), "pairs": len(t_err)}


# --- masks ---


def extract_mask(scores, rho: float, block_size: int, grid_shape) -> BinaryMask:
    """Keep the ceil(rho * T) best-scoring blocks; equal scores keep the lower flat index."""
    if not 0.0 < rho <= 1.0:
        raise InvalidArgumentError(f"rho must be in (0, 1], got {rho}")
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64).reshape(-1)
    if s.size != grid_shape[0] * grid_shape[1]:
        raise InvalidArgumentError(f"{s.size} scores do not fill a {grid_shape} grid")
    keep = min(s.size, int(math.ceil(rho * s.size - 1e-9)))
    grid = np.zeros(s.size, dtype=bool)
    grid[np.argsort(-s, kind="stable")[:keep]] = True
    return BinaryMask(block_size, grid.reshape(grid_shape))


def infer_masks(model: AttentivePoseModel, images: Sequence[Image], rho: float, progress: Optional[bool] = None):
    """One mask per frame from the pair (i, i + 1); the last frame reuses the final pair.

    Returns (masks, scores) where scores are the raw per-pair token scores.
    """
    if len(images) < 2:
        raise InvalidArgumentError("Need at least two frames to infer masks")
    show = config.progress_enabled() if progress is None else progress
    masks, raw = [], []
    pairs = list(zip(images[:-1], images[1:]))
    for img_a, img_b in tqdm(pairs, desc="infer-mask", unit="pair", disable=not show):
        _, scores, grid = model.pair_scores(img_a, img_b)
        raw.append(scores.data.reshape(grid))
        masks.append(extract_mask(scores, rho, model.config.block_size, grid))
    masks.append(masks[-1])
    return masks, raw


# --- persistence ---


def save_checkpoint(path, model: AttentivePoseModel):
    named = model.named_parameters()
    header = {
        "names": [n for n, _ in named],
        "shapes": [list(p.shape) for _, p in named],
        "config": model.config.to_dict(),
        "seed": model.seed,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for _, p in named:
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    logger.info("Saved checkpoint with %d tensors to %s", len(named), path)


def load_checkpoint(path) -> AttentivePoseModel:
    path = str(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC or len(raw) < 12:
        raise ParseError("not an attentivo checkpoint", path=path)
    (length,) = struct.unpack("<Q", raw[4:12])
    try:
        header = json.loads(raw[12 : 12 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"bad checkpoint header: {e}", path=path) from e
    missing = [key for key in CHECKPOINT_HEADER_KEYS if not isinstance(header, dict) or key not in header]
    if missing:
        raise ParseError(f"checkpoint header is missing {missing}", path=path)
    if not isinstance(header["config"], dict):
        raise ParseError("checkpoint config must be a JSON object", path=path)
    model = AttentivePoseModel(TrainConfig.from_dict(header["config"]), seed=header.get("seed"))
    named = model.named_parameters()
    if [n for n, _ in named] != header["names"] or [list(p.shape) for _, p in named] != header["shapes"]:
        raise ParseError("checkpoint tensors do not match the configured architecture", path=path)
    offset = 12 + length
    for _, p in named:
        count = int(np.prod(p.shape))
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset) if offset + 8 * count <= len(raw) else None
        if values is None:
            raise ParseError("checkpoint data truncated", path=path)
        p.data = values.astype(np.float64).reshape(p.shape)
        offset += 8 * count
    if offset != len(raw):
        raise ParseError(f"{len(raw) - offset} trailing bytes in checkpoint", path=path)
    return model


def write_loss_history(path, history: Sequence[float]):
    pd.DataFrame({"epoch": np.arange(len(history)), "loss": list(history)}).to_csv(path, index=False)


def read_loss_history(path) -> List[float]:
    df = pd.read_csv(path, float_precision="round_trip")
    if list(df.columns) != ["epoch", "loss"]:
        raise ParseError(f"expected columns epoch,loss, got {','.join(df.columns)}", path=str(path), line=1)
    return df["loss"].astype(float).tolist()
