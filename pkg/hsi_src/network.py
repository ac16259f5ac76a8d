"""
光谱-空间 3D 卷积网络，反向传播手写实现

结构：``num_conv_layers`` 个 valid 3D 卷积（步长 1，每层后接 ReLU），再接稠密层
（隐藏层之间用 ReLU，输出层为原始得分）。损失为融合的 softmax 交叉熵，预测取得分的 argmax。

卷积核：缺省情况下每个卷积核在输入通道间共享，分别与每张输入特征图卷积后求和得到一张输出图。
卷积是线性的，所以等价于对通道和做一次卷积，这里就是这样计算的。``per_channel_kernels=True``
时改用常规的多通道卷积，每个输入通道有独立的卷积核切片。

卷积沿用深度学习的约定（互相关，卷积核不翻转）。特征栈为 (batch, channel, x, y, band)，
进入稠密层前按 (channel, x, y, band) 的字典序展平。
"""

from __future__ import annotations

import itertools
import logging
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import FormatError, LabelError, ShapeError
from .tensor_core import DTYPE_TRAIN, DTYPE_VERIFY, SeededRng, as_precision

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HGMODEL1"


@dataclass
class NetworkConfig:
    bands: int
    num_classes: int
    patch_width: int = 7
    patch_height: int = 7
    num_conv_layers: int = 3
    kernels_per_layer: int = 24
    kernel_extent: int = 3
    dense_widths: Tuple[int, ...] = (512, 256, 128)
    per_channel_kernels: bool = False

    def __post_init__(self):
        self.dense_widths = tuple(int(w) for w in self.dense_widths)
        self.validate()

    def validate(self) -> None:
        shrink = (self.kernel_extent - 1) * self.num_conv_layers
        if self.num_classes < 2:
            raise ShapeError(f"num_classes 必须 >= 2，当前为 {self.num_classes}")
        if self.kernel_extent < 1 or self.kernels_per_layer < 1 or self.num_conv_layers < 1:
            raise ShapeError("kernel_extent、kernels_per_layer 与 num_conv_layers 都必须 >= 1")
        for name, extent in (("patch_width", self.patch_width), ("patch_height", self.patch_height), ("bands", self.bands)):
            if extent - shrink < 1:
                raise ShapeError(
                    f"{name}={extent} 太小，放不下 {self.num_conv_layers} 层卷积核边长为 "
                    f"{self.kernel_extent} 的 valid 卷积"
                )
        if any(w < 1 for w in self.dense_widths):
            raise ShapeError(f"稠密层宽度必须为正，当前为 {self.dense_widths}")

    def conv_extents(self) -> List[Tuple[int, int, int]]:
        # 输入 patch 与每个卷积层输出的 (x, y, band) 尺寸
        shrink = self.kernel_extent - 1
        return [
            (self.patch_width - shrink * i, self.patch_height - shrink * i, self.bands - shrink * i)
            for i in range(self.num_conv_layers + 1)
        ]

    @property
    def flatten_size(self) -> int:
        x, y, l = self.conv_extents()[-1]
        return self.kernels_per_layer * x * y * l

    def to_text(self) -> str:
        """规范的 ``key = value`` 文本，按字段声明顺序每行一个"""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        raw: Dict[str, str] = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            if "=" not in line:
                raise FormatError(f"网络配置行格式错误: {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            raw[key] = value
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise FormatError(f"未知的网络配置键: {sorted(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            if key == "dense_widths":
                kwargs[key] = tuple(int(v) for v in value.split(",") if v)
            elif key == "per_channel_kernels":
                kwargs[key] = value.lower() == "true"
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


@dataclass
class Conv3DLayer:
    weights: np.ndarray  # 共享时为 (K, e, e, e)，逐通道时为 (K, C, e, e, e)
    biases: np.ndarray  # (K,)

    @property
    def channel_shared(self) -> bool:
        return self.weights.ndim == 4


@dataclass
class DenseLayer:
    weights: np.ndarray  # (in_features, out_features)
    biases: np.ndarray  # (out_features,)


@dataclass
class ModelParams:
    conv_layers: List[Conv3DLayer]
    dense_layers: List[DenseLayer]

    def arrays(self) -> List[np.ndarray]:
        """按声明顺序返回全部参数块（先卷积后稠密，先权重后偏置）"""
        out: List[np.ndarray] = []
        for layer in [*self.conv_layers, *self.dense_layers]:
            out.extend([layer.weights, layer.biases])
        return out

    def names(self) -> List[str]:
        out = []
        for i, _ in enumerate(self.conv_layers):
            out.extend([f"conv{i}.weights", f"conv{i}.biases"])
        for i, _ in enumerate(self.dense_layers):
            out.extend([f"dense{i}.weights", f"dense{i}.biases"])
        return out

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            [Conv3DLayer(l.weights.astype(dtype), l.biases.astype(dtype)) for l in self.conv_layers],
            [DenseLayer(l.weights.astype(dtype), l.biases.astype(dtype)) for l in self.dense_layers],
        )

    def copy(self) -> "ModelParams":
        return self.astype(self.conv_layers[0].weights.dtype)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: ModelParams, **hyper) -> "AdamState":
        arrays = params.arrays()
        return cls(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays], **hyper)


# ---------------------------------------------------------------- shapes / init

def param_shapes(cfg: NetworkConfig) -> List[Tuple[int, ...]]:
    e, k = cfg.kernel_extent, cfg.kernels_per_layer
    shapes: List[Tuple[int, ...]] = []
    for i in range(cfg.num_conv_layers):
        c_in = 1 if i == 0 else k
        w_shape = (k, c_in, e, e, e) if cfg.per_channel_kernels else (k, e, e, e)
        shapes.extend([w_shape, (k,)])
    widths = [cfg.flatten_size, *cfg.dense_widths, cfg.num_classes]
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        shapes.extend([(n_in, n_out), (n_out,)])
    return shapes


def param_count(cfg: NetworkConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg)))


def shape_trace(cfg: NetworkConfig) -> List[Tuple[int, int, int]]:
    # 卷积部分各层的输出形状，第一个是输入 patch
    return cfg.conv_extents()


def init_params(cfg: NetworkConfig, rng: SeededRng, dtype=DTYPE_TRAIN) -> ModelParams:
    """权重取 [-s, s] 上的均匀分布，s = sqrt(6 / fan_in)；偏置为 0"""
    e, k = cfg.kernel_extent, cfg.kernels_per_layer
    conv_layers = []
    for i in range(cfg.num_conv_layers):
        c_in = 1 if i == 0 else k
        fan_in = e ** 3 * c_in
        shape = (k, c_in, e, e, e) if cfg.per_channel_kernels else (k, e, e, e)
        scale = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-scale, scale, size=shape).astype(dtype)
        conv_layers.append(Conv3DLayer(w, np.zeros(k, dtype=dtype)))
    dense_layers = []
    widths = [cfg.flatten_size, *cfg.dense_widths, cfg.num_classes]
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        scale = np.sqrt(6.0 / n_in)
        w = rng.uniform(-scale, scale, size=(n_in, n_out)).astype(dtype)
        dense_layers.append(DenseLayer(w, np.zeros(n_out, dtype=dtype)))
    return ModelParams(conv_layers, dense_layers)


# ---------------------------------------------------------------- layers

def _batched(x: np.ndarray, rank: int) -> Tuple[np.ndarray, bool]:
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise ShapeError(f"需要 {rank - 1} 阶张量或带 batch 的 {rank} 阶张量，当前形状为 {x.shape}")
    return x, False


def _offsets(e: int):
    return itertools.product(range(e), repeat=3)


def conv3d_forward(inputs: np.ndarray, layer: Conv3DLayer) -> np.ndarray:
    """步长为 1 的 valid 3D 卷积：(N,) C×X×Y×Λ -> (N,) K×(X-e+1)×(Y-e+1)×(Λ-e+1)"""
    x, single = _batched(inputs, 5)
    n, c, sx, sy, sl = x.shape
    w = layer.weights
    k, e = w.shape[0], w.shape[-1]
    if min(sx, sy, sl) < e:
        raise ShapeError(f"输入尺寸 {(sx, sy, sl)} 小于卷积核边长 {e}")
    ox, oy, ol = sx - e + 1, sy - e + 1, sl - e + 1
    out = np.zeros((n, k, ox, oy, ol), dtype=np.result_type(x, w))
    if layer.channel_shared:
        s = x.sum(axis=1)
        for a, b, d in _offsets(e):
            out += w[None, :, a, b, d, None, None, None] * s[:, None, a:a + ox, b:b + oy, d:d + ol]
    else:
        if w.shape[1] != c:
            raise ShapeError(f"该层需要 {w.shape[1]} 个输入通道，当前为 {c}")
        for a, b, d in _offsets(e):
            out += np.einsum("ncxyz,kc->nkxyz", x[:, :, a:a + ox, b:b + oy, d:d + ol], w[:, :, a, b, d])
    out += layer.biases[None, :, None, None, None]
    return out[0] if single else out


def conv3d_backward(
    inputs: np.ndarray, layer: Conv3DLayer, upstream: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """:func:`conv3d_forward` 的精确梯度：(grad_input, grad_weights, grad_biases)"""
    x, single = _batched(inputs, 5)
    g, _ = _batched(upstream, 5)
    n, c, sx, sy, sl = x.shape
    w = layer.weights
    k, e = w.shape[0], w.shape[-1]
    ox, oy, ol = sx - e + 1, sy - e + 1, sl - e + 1
    if g.shape != (n, k, ox, oy, ol):
        raise ShapeError(f"上游梯度形状 {g.shape} 与前向输出 {(n, k, ox, oy, ol)} 不符")
    grad_b = g.sum(axis=(0, 2, 3, 4))
    grad_w = np.zeros_like(w)
    if layer.channel_shared:
        s = x.sum(axis=1)
        grad_s = np.zeros_like(s)
        for a, b, d in _offsets(e):
            window = s[:, a:a + ox, b:b + oy, d:d + ol]
            grad_w[:, a, b, d] = np.tensordot(g, window, axes=([0, 2, 3, 4], [0, 1, 2, 3]))
            grad_s[:, a:a + ox, b:b + oy, d:d + ol] += np.tensordot(g, w[:, a, b, d], axes=([1], [0]))
        grad_x = np.repeat(grad_s[:, None], c, axis=1)
    else:
        grad_x = np.zeros_like(x)
        for a, b, d in _offsets(e):
            window = x[:, :, a:a + ox, b:b + oy, d:d + ol]
            grad_w[:, :, a, b, d] = np.einsum("nkxyz,ncxyz->kc", g, window)
            grad_x[:, :, a:a + ox, b:b + oy, d:d + ol] += np.einsum("nkxyz,kc->ncxyz", g, w[:, :, a, b, d])
    return (grad_x[0] if single else grad_x), grad_w, grad_b


def relu(t: np.ndarray) -> np.ndarray:
    return np.maximum(t, 0)


def relu_backward(t: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # 0 处的次梯度取 0
    return np.where(t > 0, upstream, 0).astype(upstream.dtype, copy=False)


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    if x.shape[-1] != layer.weights.shape[0]:
        raise ShapeError(f"稠密层需要 {layer.weights.shape[0]} 个特征，当前为 {x.shape[-1]}")
    return x @ layer.weights + layer.biases


def dense_backward(
    x: np.ndarray, layer: DenseLayer, upstream: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    # y = xW + b 的 (grad_input, grad_weights, grad_biases)
    if x.shape[-1] != layer.weights.shape[0] or upstream.shape[-1] != layer.weights.shape[1]:
        raise ShapeError(f"形状 {x.shape} / {upstream.shape} 与层 {layer.weights.shape} 不匹配")
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(upstream)
    grad_w = x2.T @ g2
    grad_b = g2.sum(axis=0)
    grad_x = upstream @ layer.weights.T
    return grad_x, grad_w, grad_b


def softmax_cross_entropy(logits: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """
    批次上的平均交叉熵及其对 logits 的梯度

    ``labels`` 为从 0 计的类别下标。传入单个 logit 向量与标量标签时，返回该样本的损失与同形状的梯度。
    """
    z, single = (logits[None], True) if logits.ndim == 1 else (logits, False)
    y = np.atleast_1d(np.asarray(labels))
    n, num_classes = z.shape
    if y.shape != (n,):
        raise ShapeError(f"{n} 行 logits 对应了 {y.shape[0]} 个标签")
    if np.any(y < 0) or np.any(y >= num_classes):
        raise LabelError(f"标签必须在 [0, {num_classes}) 内，当前为 {y.min()}..{y.max()}")
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    probs = exp / total
    rows = np.arange(n)
    losses = np.log(total[:, 0]) - shifted[rows, y]
    grad = probs
    grad[rows, y] -= 1
    grad /= n
    loss = float(losses.mean())
    return loss, (grad[0] if single else grad)


# ---------------------------------------------------------------- model

@dataclass
class _ForwardCache:
    conv_inputs: List[np.ndarray]
    conv_outputs: List[np.ndarray]
    dense_inputs: List[np.ndarray]
    dense_outputs: List[np.ndarray]
    conv_shape: Tuple[int, ...]


def _check_patches(cfg: NetworkConfig, patches: np.ndarray) -> Tuple[np.ndarray, bool]:
    x, single = (patches[None], True) if patches.ndim == 3 else (patches, False)
    expected = (cfg.patch_width, cfg.patch_height, cfg.bands)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"patch 形状 {patches.shape} 与配置的 {expected} 不符")
    return x, single


def _forward(params: ModelParams, cfg: NetworkConfig, x: np.ndarray) -> Tuple[np.ndarray, _ForwardCache]:
    h = x[:, None]
    cache = _ForwardCache([], [], [], [], ())
    for layer in params.conv_layers:
        cache.conv_inputs.append(h)
        z = conv3d_forward(h, layer)
        cache.conv_outputs.append(z)
        h = relu(z)
    cache.conv_shape = h.shape
    flat = h.reshape(h.shape[0], -1)
    last = len(params.dense_layers) - 1
    for i, layer in enumerate(params.dense_layers):
        cache.dense_inputs.append(flat)
        z = dense_forward(flat, layer)
        cache.dense_outputs.append(z)
        flat = z if i == last else relu(z)
    return flat, cache


def forward(params: ModelParams, cfg: NetworkConfig, patch: np.ndarray) -> np.ndarray:
    """单个 patch（a×b×B）或一批 patch（N×a×b×B）的原始类别得分"""
    x, single = _check_patches(cfg, patch)
    scores, _ = _forward(params, cfg, x)
    return scores[0] if single else scores


def loss_and_gradients(
    params: ModelParams, cfg: NetworkConfig, patches: np.ndarray, labels: np.ndarray
) -> Tuple[float, List[np.ndarray]]:
    """
    一个批次的平均交叉熵以及每个参数块的梯度

    ``labels`` 从 0 计；梯度与 :meth:`ModelParams.arrays` 一一对应。
    """
    x, _ = _check_patches(cfg, patches)
    scores, cache = _forward(params, cfg, x)
    loss, grad = softmax_cross_entropy(scores, np.atleast_1d(labels))

    dense_grads: List[Tuple[np.ndarray, np.ndarray]] = []
    for i in reversed(range(len(params.dense_layers))):
        if i != len(params.dense_layers) - 1:
            grad = relu_backward(cache.dense_outputs[i], grad)
        grad, gw, gb = dense_backward(cache.dense_inputs[i], params.dense_layers[i], grad)
        dense_grads.append((gw, gb))
    grad = grad.reshape(cache.conv_shape)

    conv_grads: List[Tuple[np.ndarray, np.ndarray]] = []
    for i in reversed(range(len(params.conv_layers))):
        grad = relu_backward(cache.conv_outputs[i], grad)
        grad, gw, gb = conv3d_backward(cache.conv_inputs[i], params.conv_layers[i], grad)
        conv_grads.append((gw, gb))

    grads: List[np.ndarray] = []
    for gw, gb in [*reversed(conv_grads), *reversed(dense_grads)]:
        grads.extend([gw, gb])
    return loss, grads


def adam_step(params: ModelParams, grads: Sequence[np.ndarray], state: AdamState) -> Tuple[ModelParams, AdamState]:
    # 带偏差修正的 Adam，原地更新
    arrays = params.arrays()
    if not state.m:
        state.m = [np.zeros_like(a) for a in arrays]
        state.v = [np.zeros_like(a) for a in arrays]
    if len(grads) != len(arrays):
        raise ShapeError(f"{len(arrays)} 个参数块对应了 {len(grads)} 个梯度块")
    state.t += 1
    c1 = 1 - state.beta1 ** state.t
    c2 = 1 - state.beta2 ** state.t
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"梯度形状 {g.shape} 与参数形状 {p.shape} 不一致")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------- verification

TINY_CONFIG = dict(
    bands=9, num_classes=3, patch_width=5, patch_height=5,
    num_conv_layers=2, kernels_per_layer=2, dense_widths=(8, 4),
)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def central_difference(f: Callable[[], float], target: np.ndarray, index, eps: float) -> float:
    """对 ``target`` 的一个坐标求 (f(p+eps) - f(p-eps)) / (2 eps)，之后恢复原值"""
    original = target[index]
    target[index] = original + eps
    plus = f()
    target[index] = original - eps
    minus = f()
    target[index] = original
    return (plus - minus) / (2 * eps)


@dataclass
class GradientCheckResult:
    max_relative_error: float
    worst_block: str
    worst_index: Tuple[int, ...]
    analytic: float
    numeric: float
    coordinates_checked: int

    @property
    def passed(self) -> bool:
        return self.max_relative_error < 1e-4


def gradient_check(
    cfg: NetworkConfig,
    patch: np.ndarray,
    label: int,
    eps: float = 1e-5,
    params: Optional[ModelParams] = None,
    seed: int = 0,
) -> GradientCheckResult:
    """在 64 位精度下，把每个参数的解析梯度与中心差分比较"""
    if params is None:
        params = init_params(cfg, SeededRng(seed), dtype=DTYPE_VERIFY)
    params = params.astype(DTYPE_VERIFY)
    patch = as_precision(np.asarray(patch), DTYPE_VERIFY)
    labels = np.array([label])

    _, grads = loss_and_gradients(params, cfg, patch, labels)

    def loss_fn() -> float:
        return loss_and_gradients(params, cfg, patch, labels)[0]

    worst = GradientCheckResult(0.0, "", (), 0.0, 0.0, 0)
    checked = 0
    for name, block, grad in zip(params.names(), params.arrays(), grads):
        for index in np.ndindex(block.shape):
            numeric = central_difference(loss_fn, block, index, eps)
            analytic = float(grad[index])
            err = relative_error(analytic, numeric)
            checked += 1
            if err > worst.max_relative_error or not worst.worst_block:
                worst = GradientCheckResult(err, name, tuple(int(i) for i in index), analytic, numeric, 0)
    worst.coordinates_checked = checked
    logger.info(
        f"梯度检查: {checked} 个坐标，最大相对误差 {worst.max_relative_error:.3e}，"
        f"位于 {worst.worst_block}{list(worst.worst_index)}"
    )
    return worst


def canonical_gradient_check(seed: int = 0, eps: float = 1e-5) -> GradientCheckResult:
    """在标准小配置与带种子的随机样本上做梯度检查"""
    cfg = NetworkConfig(**TINY_CONFIG)
    rng = SeededRng(seed)
    params = init_params(cfg, rng.fork(1), dtype=DTYPE_VERIFY)
    sample_rng = rng.fork(2)
    patch = sample_rng.normal(size=(cfg.patch_width, cfg.patch_height, cfg.bands))
    label = int(sample_rng.integers(0, cfg.num_classes))
    return gradient_check(cfg, patch, label, eps=eps, params=params)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: Union[str, Path], params: ModelParams, cfg: NetworkConfig) -> Path:
    """依次写入标识、带长度前缀的配置文本、按声明顺序的小端 float32 参数块"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = cfg.to_text().encode("utf-8")
    with path.open("wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        for block, shape in zip(params.arrays(), param_shapes(cfg)):
            if block.shape != shape:
                raise ShapeError(f"参数块形状 {block.shape} 与配置推算的 {shape} 不符")
            f.write(np.ascontiguousarray(block, dtype="<f4").tobytes())
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelParams, NetworkConfig]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path} 不是模型文件（标识不符）")
    offset = len(CHECKPOINT_MAGIC)
    if len(data) < offset + 4:
        raise FormatError(f"{path}: 文件头不完整")
    (text_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    cfg = NetworkConfig.from_text(data[offset:offset + text_len].decode("utf-8"))
    offset += text_len
    blocks = []
    for shape in param_shapes(cfg):
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: 载荷短于配置声明的参数块")
        blocks.append(np.frombuffer(data, dtype="<f4", count=int(np.prod(shape)), offset=offset).reshape(shape).astype(np.float32))
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: 最后一个参数块之后多出 {len(data) - offset} 字节")
    conv = [Conv3DLayer(blocks[2 * i], blocks[2 * i + 1]) for i in range(cfg.num_conv_layers)]
    rest = blocks[2 * cfg.num_conv_layers:]
    dense = [DenseLayer(rest[2 * i], rest[2 * i + 1]) for i in range(len(rest) // 2)]
    return ModelParams(conv, dense), cfg
