"""Feature trunk, shared compression, residual spectral transform (RST),
identity head, domain detector, and the DPM / CpNN / raw-patch baselines.

Each sub-network is a ``dict[str, Parameter]`` keyed by short layer names;
the :class:`ModelBundle` groups them and owns the naming.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

DIRECTIONS = ("v_to_t", "t_to_v")
DOMAINS = ("vis", "thm")
# Compressed features are kept small so the tanh-bounded RST residual
# (|F(u)| < 1 per channel) can express offsets of the size of the features.
COMPRESSION_GAIN = 0.25

Params = dict[str, Parameter]


def dims_string(h: int, w: int, c: int) -> str:
    return f"{h}×{w}×{c}"


@dataclass(frozen=True)
class TrunkConfig:
    blocks: tuple[int, ...] = (32, 64, 128, 256)
    depth: int = 3
    input_size: int = 64

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if not 1 <= self.depth <= len(self.blocks):
            raise ValueError(f"truncation depth {self.depth} outside 1..{len(self.blocks)}")
        if self.input_size % (2**self.depth):
            raise ValueError(
                f"input size {self.input_size} not divisible by 2^{self.depth}={2**self.depth}"
            )

    @property
    def out_size(self) -> int:
        return self.input_size // 2**self.depth

    @property
    def channels(self) -> int:
        return self.blocks[self.depth - 1]

    @property
    def compressed_channels(self) -> int:
        return compressed_width(self.channels)

    def feature_dims(self) -> str:
        return dims_string(self.out_size, self.out_size, self.channels)


def compressed_width(c: int) -> int:
    """50% compression, rounding halves up."""
    return (c + 1) // 2


def _param(name: str, arr: np.ndarray, trainable: bool = True) -> Parameter:
    return Parameter(name, Tensor(arr), trainable)


def _normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))


# ---------------------------------------------------------------- trunk


def init_trunk(prefix: str, cfg: TrunkConfig, rng: np.random.Generator) -> Params:
    """Fan-in scaled normal weights, zero biases, ``cfg.depth`` blocks."""
    params: Params = {}
    cin = 1
    for b in range(cfg.depth):
        cout = cfg.blocks[b]
        for tag, ci in (("a", cin), ("b", cout)):
            key = f"block{b + 1}.conv_{tag}"
            params[f"{key}.weight"] = _param(
                f"{prefix}.{key}.weight", _normal(rng, (3, 3, ci, cout), 9 * ci, np.sqrt(2.0))
            )
            params[f"{key}.bias"] = _param(f"{prefix}.{key}.bias", np.zeros(cout))
        cin = cout
    return params


def trunk_blocks(params: Params) -> int:
    return sum(1 for k in params if k.endswith("conv_a.weight"))


def trunk_forward(x, params: Params, depth: int, return_all: bool = False):
    """``depth`` blocks of [3x3 conv, relu, 3x3 conv, relu, 2x2 max-pool]."""
    x = T.core.as_tensor(x)
    if depth < 1 or depth > trunk_blocks(params):
        raise ValueError(f"depth {depth} outside 1..{trunk_blocks(params)}")
    n = x.shape[-3]
    if n % (2**depth) or x.shape[-2] % (2**depth):
        raise ValueError(f"input extent {x.shape} not divisible by 2^{depth}")
    outs = []
    h = x
    for b in range(1, depth + 1):
        for tag in ("a", "b"):
            w = params[f"block{b}.conv_{tag}.weight"].tensor
            bias = params[f"block{b}.conv_{tag}.bias"].tensor
            if h.shape[-1] != w.shape[2]:
                raise ValueError(f"trunk block {b}: input channels {h.shape[-1]} != {w.shape[2]}")
            h = T.relu(T.add(T.conv2d(h, w, 1, "same"), bias))
        h = T.max_pool2d(h, 2)
        outs.append(h)
    return outs if return_all else h


# ---------------------------------------------------------------- 1x1 layers


def _pointwise(prefix: str, key: str, cin: int, cout: int, w: np.ndarray | None, rng, gain=1.0) -> Params:
    if w is None:
        w = _normal(rng, (1, 1, cin, cout), cin, gain)
    return {
        f"{key}.weight": _param(f"{prefix}.{key}.weight", w.reshape(1, 1, cin, cout)),
        f"{key}.bias": _param(f"{prefix}.{key}.bias", np.zeros(cout)),
    }


def _apply_pointwise(h: Tensor, params: Params, key: str) -> Tensor:
    w = params[f"{key}.weight"].tensor
    if h.shape[-1] != w.shape[2]:
        raise ValueError(f"{key}: input has {h.shape[-1]} channels, layer expects {w.shape[2]}")
    return T.add(T.conv2d(h, w, 1, "valid"), params[f"{key}.bias"].tensor)


def init_compression(
    prefix: str, channels: int, rng: np.random.Generator, identity: bool = False, gain: float = 1.0
) -> Params:
    """``gain`` scales the random init and hence the compressed feature scale."""
    c_out = compressed_width(channels)
    w = None
    if identity:
        w = np.zeros((channels, c_out))
        w[:c_out, :c_out] = np.eye(c_out)
    return _pointwise(prefix, "proj", channels, c_out, w, rng, gain)


def compress(f, params: Params) -> Tensor:
    """Shared linear 1x1 projection to half the channels."""
    return _apply_pointwise(T.core.as_tensor(f), params, "proj")


def init_rst(prefix: str, channels: int, rng: np.random.Generator, hidden: int = 200) -> Params:
    params = {}
    params.update(_pointwise(prefix, "conv1", channels, hidden, None, rng))
    params.update(_pointwise(prefix, "conv2", hidden, hidden, None, rng))
    # Zero final layer: F(u) = tanh(0) = 0, so RST starts as the identity.
    params.update(_pointwise(prefix, "conv3", hidden, channels, np.zeros((hidden, channels)), rng))
    return params


def rst_forward(u, params: Params) -> Tensor:
    """RST(u) = F(u) + u with F three tanh-activated 1x1 convolutions."""
    u = T.core.as_tensor(u)
    h = T.tanh(_apply_pointwise(u, params, "conv1"))
    h = T.tanh(_apply_pointwise(h, params, "conv2"))
    h = T.tanh(_apply_pointwise(h, params, "conv3"))
    return T.add(h, u)


# ---------------------------------------------------------------- heads


def init_head(prefix: str, in_dim: int, n_classes: int, rng: np.random.Generator) -> Params:
    return {
        "weight": _param(f"{prefix}.weight", _normal(rng, (in_dim, n_classes), in_dim)),
        "bias": _param(f"{prefix}.bias", np.zeros(n_classes)),
    }


def classify_identity(f, params: Params) -> Tensor:
    """Flatten, one dense layer, softmax over training identities."""
    f = T.core.as_tensor(f)
    flat = T.flatten(f)
    w = params["weight"].tensor
    if flat.shape[-1] != w.shape[0]:
        raise ValueError(f"head expects {w.shape[0]} features, got {flat.shape[-1]}")
    return T.softmax(T.dense(flat, w, params["bias"].tensor), axis=-1)


def init_detector(prefix: str, channels: int, rng: np.random.Generator, hidden: int = 16) -> Params:
    params = _pointwise(prefix, "conv", channels, hidden, None, rng, np.sqrt(2.0))
    params["fc.weight"] = _param(f"{prefix}.fc.weight", _normal(rng, (hidden, 2), hidden))
    params["fc.bias"] = _param(f"{prefix}.fc.bias", np.zeros(2))
    return params


def domain_detect(f, params: Params) -> Tensor:
    """``[P(vis|h), P(thm|h)]``: 1x1 conv + relu, global average pool, dense, softmax."""
    f = T.core.as_tensor(f)
    h = T.relu(_apply_pointwise(f, params, "conv"))
    h = T.flatten(T.global_avg_pool(h))
    return T.softmax(T.dense(h, params["fc.weight"].tensor, params["fc.bias"].tensor), axis=-1)


# ---------------------------------------------------------------- baselines


def init_dpm(prefix: str, channels: int, rng: np.random.Generator, identity_scale: float | None = None) -> Params:
    """Three per-position dense layers of widths 2C, 2C, C.

    With ``identity_scale=e`` the layers are initialized so the network is
    the identity up to O(e^2): tanh runs in its linear regime.
    """
    c2 = 2 * channels
    if identity_scale is None:
        params = _pointwise(prefix, "fc1", channels, c2, None, rng)
        params.update(_pointwise(prefix, "fc2", c2, c2, None, rng))
        params.update(_pointwise(prefix, "fc3", c2, channels, None, rng))
        return params
    e = identity_scale
    w1 = np.zeros((channels, c2))
    w1[:, :channels] = e * np.eye(channels)
    w2 = np.eye(c2)
    w3 = np.zeros((c2, channels))
    w3[:channels, :] = np.eye(channels) / e
    params = _pointwise(prefix, "fc1", channels, c2, w1, rng)
    params.update(_pointwise(prefix, "fc2", c2, c2, w2, rng))
    params.update(_pointwise(prefix, "fc3", c2, channels, w3, rng))
    return params


def dpm_forward(v, params: Params) -> Tensor:
    v = T.core.as_tensor(v)
    h = T.tanh(_apply_pointwise(v, params, "fc1"))
    h = T.tanh(_apply_pointwise(h, params, "fc2"))
    return _apply_pointwise(h, params, "fc3")


def cpnn_forward(v_img, t_img, params_f: Params, params_g: Params, depth: int) -> tuple[Tensor, Tensor]:
    """Two unshared trunks of identical architecture, one per domain."""
    v_img, t_img = T.core.as_tensor(v_img), T.core.as_tensor(t_img)
    if v_img.shape != t_img.shape:
        raise ValueError(f"CpNN inputs differ in shape: {v_img.shape} vs {t_img.shape}")
    shapes_f = [p.data.shape for p in params_f.values()]
    shapes_g = [p.data.shape for p in params_g.values()]
    if shapes_f != shapes_g:
        raise ValueError("CpNN encoders must share one architecture")
    return trunk_forward(v_img, params_f, depth), trunk_forward(t_img, params_g, depth)


def patch_grid_starts(extent: int, patch: int, stride: int | None = None, grid: int | None = None) -> np.ndarray:
    if patch < 1 or patch > extent:
        raise ValueError(f"patch size {patch} must lie in [1, {extent}]")
    if grid is not None:
        if grid < 1:
            raise ValueError(f"grid size must be >= 1, got {grid}")
        return np.rint(np.linspace(0, extent - patch, grid)).astype(int)
    if stride is None or stride < 1:
        raise ValueError(f"degenerate patch stride {stride}")
    return np.arange(0, extent - patch + 1, stride)


def patch_features(image: np.ndarray, patch_size: int, stride: int | None = None, grid: int | None = None) -> np.ndarray:
    """Raw overlapping patches as a ``gh x gw x patch_size^2`` map.

    Either a ``stride`` or a target ``grid`` size (evenly spread starts) is given.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.ndim != 2:
        raise ValueError(f"expected a grayscale image, got shape {image.shape}")
    rows = patch_grid_starts(img.shape[0], patch_size, stride, grid)
    cols = patch_grid_starts(img.shape[1], patch_size, stride, grid)
    win = np.lib.stride_tricks.sliding_window_view(img, (patch_size, patch_size))
    return win[np.ix_(rows, cols)].reshape(len(rows), len(cols), patch_size * patch_size).copy()


# ---------------------------------------------------------------- bundle


@dataclass
class ModelBundle:
    """Both trunks, the shared compression, RST, identity head and detector.

    ``direction`` picks the target domain, which owns the classifier head:
    ``v_to_t`` (scenario 1) maps visible features into thermal space at
    enrollment; ``t_to_v`` (scenario 2) maps thermal probes into visible space.
    """

    trunk_config: TrunkConfig
    n_classes: int
    direction: str = "v_to_t"
    rst_hidden: int = 200
    detector_hidden: int = 16
    trunk_v: Params = field(default_factory=dict)
    trunk_t: Params = field(default_factory=dict)
    compression: Params = field(default_factory=dict)
    rst: Params = field(default_factory=dict)
    head: Params = field(default_factory=dict)
    detector: Params = field(default_factory=dict)
    dpm: Params = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        trunk_config: TrunkConfig,
        n_classes: int,
        direction: str = "v_to_t",
        seed: int = 0,
        rst_hidden: int = 200,
        detector_hidden: int = 16,
        detector_seed: int | None = None,
        compression_gain: float = COMPRESSION_GAIN,
    ) -> "ModelBundle":
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {direction!r}")
        rng = np.random.default_rng(seed)
        cfg = trunk_config
        b = cls(cfg, n_classes, direction, rst_hidden, detector_hidden)
        b.trunk_t = init_trunk("trunk_t", cfg, rng)
        b.trunk_v = init_trunk("trunk_v", cfg, rng)
        c = cfg.channels
        cc = compressed_width(c)
        b.compression = init_compression("compression", c, rng, gain=compression_gain)
        b.rst = init_rst("rst", cc, rng, rst_hidden)
        b.head = init_head("head", cfg.out_size**2 * cc, n_classes, rng)
        det_rng = rng if detector_seed is None else np.random.default_rng(detector_seed)
        b.detector = init_detector("detector", cc, det_rng, detector_hidden)
        return b

    # -- parameter groups

    @property
    def target_domain(self) -> str:
        return "thm" if self.direction == "v_to_t" else "vis"

    @property
    def source_domain(self) -> str:
        return "vis" if self.direction == "v_to_t" else "thm"

    def trunk(self, domain: str) -> Params:
        if domain == "vis":
            return self.trunk_v
        if domain == "thm":
            return self.trunk_t
        raise ValueError(f"unknown domain {domain!r}")

    def groups(self) -> dict[str, Params]:
        return {
            "trunk_v": self.trunk_v,
            "trunk_t": self.trunk_t,
            "compression": self.compression,
            "rst": self.rst,
            "head": self.head,
            "detector": self.detector,
            "dpm": self.dpm,
        }

    def parameters(self) -> list[Parameter]:
        seen: dict[str, Parameter] = {}
        for group in self.groups().values():
            for p in group.values():
                if p.name in seen and seen[p.name] is not p:
                    raise ValueError(f"duplicate parameter name {p.name!r}")
                seen[p.name] = p
        return list(seen.values())

    def theta(self) -> list[Parameter]:
        """Target-domain trunk, shared compression and identity head."""
        return [*self.trunk(self.target_domain).values(), *self.compression.values(), *self.head.values()]

    def phi(self) -> list[Parameter]:
        return list(self.rst.values())

    def detector_params(self) -> list[Parameter]:
        return list(self.detector.values())

    def copy_target_trunk_to_source(self) -> None:
        """Initialise the source trunk from the (pretrained) target trunk."""
        src, dst = self.trunk(self.target_domain), self.trunk(self.source_domain)
        for k, p in src.items():
            dst[k].tensor.data = p.data.copy()

    # -- forward paths

    def features(self, x, domain: str) -> Tensor:
        return compress(trunk_forward(x, self.trunk(domain), self.trunk_config.depth), self.compression)

    def gallery_representation(self, v_images) -> Tensor:
        f = self.features(v_images, "vis")
        return rst_forward(f, self.rst) if self.direction == "v_to_t" else f

    def probe_representation(self, t_images) -> Tensor:
        f = self.features(t_images, "thm")
        return rst_forward(f, self.rst) if self.direction == "t_to_v" else f
