"""Network: conv backbone, part updater, transformer encoder, localization head.

All parameters live in a flat name -> Tensor dict so the optimizer,
checkpoints, and freeze schedules can address them uniformly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import RngState, Tensor
from .geometry import TargetMask

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and inference hyperparameters; stored in checkpoints."""

    channels: int = 64          # part feature dimension
    heads: int = 8
    encoder_layers: int = 4
    ff_mult: int = 2            # feed-forward width = ff_mult * channels
    template_size: int = 128
    search_size: int = 256
    stride: int = 16
    exclude_masked_keys: bool = False
    template_context: float = 2.0   # crop side = factor * sqrt(w*h)
    search_context: float = 4.0
    sigma: float = 3.0
    tau: float = 1.0
    bbox_scale_formula: str = "std"

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ValueError("channels must be divisible by heads")
        if self.channels % 4 != 0:
            raise ValueError("channels must be divisible by 4 for 2D sinusoids")
        if self.template_size % self.stride or self.search_size % self.stride:
            raise ValueError("patch sizes must be divisible by the stride")

    @property
    def template_grid(self) -> int:
        return self.template_size // self.stride

    @property
    def search_grid(self) -> int:
        return self.search_size // self.stride

    @property
    def n_template(self) -> int:
        return self.template_grid ** 2

    @property
    def n_search(self) -> int:
        return self.search_grid ** 2


@dataclass
class PartSet:
    """Row-major grid of part feature vectors."""

    features: Tensor  # (grid_h * grid_w, C)
    grid_h: int
    grid_w: int
    source: str = "search"  # template | pseudo | search


def backbone_channels(cfg: ModelConfig) -> list[int]:
    """Channel ramp of the four stride-2 blocks, ending at cfg.channels."""
    return [max(4, cfg.channels >> (3 - k)) for k in range(3)] + [cfg.channels]


def init_params(cfg: ModelConfig, rng: RngState) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def param(name, array):
        params[name] = Tensor(array, requires_grad=True)

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    def glorot(shape):
        fan_in, fan_out = shape[0], shape[1]
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape)

    c_in = 3
    for i, c_out in enumerate(backbone_channels(cfg)):
        param(f"backbone.{i}.w", he((3, 3, c_in, c_out), 9 * c_in))
        param(f"backbone.{i}.gamma", np.ones(c_out))
        param(f"backbone.{i}.beta", np.zeros(c_out))
        c_in = c_out

    c = cfg.channels
    param("pos_z", rng.normal(0.0, 0.02, size=(cfg.n_template, c)))
    for w in ("wq", "wk", "wv", "wo"):
        param(f"updater.{w}", glorot((c, c)))

    f = cfg.ff_mult * c
    for i in range(cfg.encoder_layers):
        for w in ("wq", "wk", "wv", "wo"):
            param(f"enc.{i}.attn.{w}", glorot((c, c)))
        param(f"enc.{i}.ln1.gamma", np.ones(c))
        param(f"enc.{i}.ln1.beta", np.zeros(c))
        param(f"enc.{i}.ff.w1", he((c, f), c))
        param(f"enc.{i}.ff.b1", np.zeros(f))
        param(f"enc.{i}.ff.w2", glorot((f, c)))
        param(f"enc.{i}.ff.b2", np.zeros(c))
        param(f"enc.{i}.ln2.gamma", np.ones(c))
        param(f"enc.{i}.ln2.beta", np.zeros(c))

    param("head.w1", he((c, c), c))
    param("head.b1", np.zeros(c))
    param("head.w2", glorot((c, 2)))
    param("head.b2", np.zeros(2))
    return params


def extract_features(image, params: dict[str, Tensor], cfg: ModelConfig,
                     source: str = "search") -> PartSet:
    """Run the 4-block backbone (total stride 16) over an HWC image patch.

    The same weights serve template, pseudo template, and search patches.
    """
    x = ad.as_tensor(image)
    h, w = x.shape[0], x.shape[1]
    if h % cfg.stride or w % cfg.stride:
        raise ValueError(f"image side {h}x{w} not divisible by stride {cfg.stride}")
    for i in range(4):
        x = ad.conv2d(x, params[f"backbone.{i}.w"], stride=2, padding=1)
        x = ad.relu(x)
        x = ad.layer_norm(x)
        x = ad.add(ad.mul(x, params[f"backbone.{i}.gamma"]),
                   params[f"backbone.{i}.beta"])
    gh, gw = h // cfg.stride, w // cfg.stride
    return PartSet(ad.reshape(x, (gh * gw, cfg.channels)), gh, gw, source)


def sinusoidal_pos(grid_h: int, grid_w: int, channels: int) -> np.ndarray:
    """Parameter-free 2D sine/cosine position table, (grid_h*grid_w, channels).

    First half of the channels encodes the column index, second half the
    row index; within each half sin/cos alternate over geometrically
    spaced frequencies.
    """
    if channels % 4 != 0:
        raise ValueError("channels must be divisible by 4")
    d = channels // 2

    def encode(coord):  # coord: (N,)
        i = np.arange(d)
        denom = np.power(10000.0, 2.0 * (i // 2) / d)
        angles = coord[:, None] / denom[None, :]
        out = np.empty((coord.size, d))
        out[:, 0::2] = np.sin(angles[:, 0::2])
        out[:, 1::2] = np.cos(angles[:, 1::2])
        return out

    cols, rows = np.meshgrid(np.arange(grid_w), np.arange(grid_h))
    return np.concatenate(
        [encode(cols.ravel().astype(np.float64)),
         encode(rows.ravel().astype(np.float64))], axis=1)


def multi_head_attention(x_q: Tensor, x_kv: Tensor, params: dict[str, Tensor],
                         prefix: str, heads: int, key_mask=None) -> Tensor:
    """Standard multi-head attention with bias-free projections.

    Bias-free so that all-zero values yield an exactly zero output, which
    the part updater's residual identity relies on.
    """
    q = ad.matmul(x_q, params[f"{prefix}.wq"])
    k = ad.matmul(x_kv, params[f"{prefix}.wk"])
    v = ad.matmul(x_kv, params[f"{prefix}.wv"])
    c = q.shape[-1]
    d = c // heads
    outs = []
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        outs.append(ad.attention(q[:, sl], k[:, sl], v[:, sl],
                                 scale=1.0 / np.sqrt(d), key_mask=key_mask))
    return ad.matmul(ad.concat(outs, axis=1), params["%s.wo" % prefix])


def update_parts(f_z: PartSet, f_y: PartSet, params: dict[str, Tensor],
                 cfg: ModelConfig) -> PartSet:
    """Dynamic part representation: template parts attend into the pseudo
    template and fuse what they find, plus a learnable positional table.

    Template parts are the queries; a misaligned pseudo template can then
    still be recovered. Zero pseudo features leave exactly f_z + pos.
    """
    if f_z.features.shape[1] != f_y.features.shape[1]:
        raise ValueError("template and pseudo features must share channels")
    fused = multi_head_attention(f_z.features, f_y.features, params,
                                 "updater", cfg.heads)
    feats = ad.add(ad.add(f_z.features, params["pos_z"]), fused)
    return PartSet(feats, f_z.grid_h, f_z.grid_w, "template")


def encoder_layer(x: Tensor, params: dict[str, Tensor], prefix: str,
                  heads: int, key_mask=None) -> Tensor:
    attn = multi_head_attention(x, x, params, f"{prefix}.attn", heads, key_mask)
    x = ad.add(x, attn)
    x = ad.add(ad.mul(ad.layer_norm(x), params[f"{prefix}.ln1.gamma"]),
               params[f"{prefix}.ln1.beta"])
    ff = ad.matmul(ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.ff.w1"]),
                                  params[f"{prefix}.ff.b1"])),
                   params[f"{prefix}.ff.w2"])
    ff = ad.add(ff, params[f"{prefix}.ff.b2"])
    x = ad.add(x, ff)
    return ad.add(ad.mul(ad.layer_norm(x), params[f"{prefix}.ln2.gamma"]),
                  params[f"{prefix}.ln2.beta"])


def encode(search: PartSet, dyn_template: PartSet, mask: TargetMask,
           params: dict[str, Tensor], cfg: ModelConfig,
           add_search_pos: bool = True) -> tuple[Tensor, Tensor]:
    """Joint encoding of search and (masked) template parts.

    Background template rows are zeroed before concatenation; they stay
    in the sequence unless cfg.exclude_masked_keys removes them from the
    attention keys.
    """
    sx = search.features
    if add_search_pos:
        pos = sinusoidal_pos(search.grid_h, search.grid_w, cfg.channels)
        sx = ad.add(sx, ad.constant(pos))
    tz = ad.mul(dyn_template.features, ad.constant(mask.values.reshape(-1, 1)))
    seq = ad.concat([sx, tz], axis=0)

    key_mask = None
    if cfg.exclude_masked_keys:
        key_mask = np.concatenate([np.ones(search.features.shape[0]), mask.values])
    for i in range(cfg.encoder_layers):
        seq = encoder_layer(seq, params, f"enc.{i}", cfg.heads, key_mask)

    n_x = search.features.shape[0]
    return seq[:n_x], seq[n_x:]


def localize(h_z: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Per-part location in the search region, sigmoid-bounded to [0, 1]^2.

    Two linear layers with shared weights across parts.
    """
    hidden = ad.relu(ad.add(ad.matmul(h_z, params["head.w1"]), params["head.b1"]))
    return ad.sigmoid(ad.add(ad.matmul(hidden, params["head.w2"]), params["head.b2"]))


def hard_attention(h_z: Tensor, h_x: Tensor, tau: float,
                   rng: RngState | None, sample: bool = True) -> Tensor:
    """One-hot attention from each template part to its best search part.

    Logits are raw (unscaled) dot products. With sample=True rows are
    Gumbel-softmax draws with straight-through gradients; otherwise a
    plain argmax one-hot with no gradient (inference).
    """
    logits = ad.matmul(h_z, ad.transpose(h_x))
    if not sample:
        return ad.argmax_one_hot(logits)
    if rng is None:
        raise ValueError("sampling hard attention requires an rng")
    return ad.gumbel_softmax(logits, tau=tau, hard=True, rng=rng)


def forward_parts(params: dict[str, Tensor], cfg: ModelConfig, f_z: PartSet,
                  mask: TargetMask, pseudo_img, search_img,
                  no_updater: bool = False):
    """Template parts + raw pseudo/search patches -> (h_x, h_z, locations)."""
    f_y = extract_features(pseudo_img, params, cfg, "pseudo")
    f_x = extract_features(search_img, params, cfg, "search")
    if no_updater:
        feats = ad.add(f_z.features, params["pos_z"])
        dyn = PartSet(feats, f_z.grid_h, f_z.grid_w, "template")
    else:
        dyn = update_parts(f_z, f_y, params, cfg)
    h_x, h_z = encode(f_x, dyn, mask, params, cfg)
    return h_x, h_z, localize(h_z, params)


def search_part_coords(cfg: ModelConfig) -> np.ndarray:
    """Normalized (x, y) centers of the search-grid cells, (2, N_x)."""
    g = cfg.search_grid
    cols, rows = np.meshgrid(np.arange(g), np.arange(g))
    return np.stack([(cols.ravel() + 0.5) / g, (rows.ravel() + 0.5) / g])


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, Tensor],
                    extras: dict[str, np.ndarray] | None = None):
    """Versioned container: config header + named float64 parameter arrays."""
    arrays = {f"param/{k}": v.data for k, v in params.items()}
    if extras:
        arrays.update({f"extra/{k}": np.asarray(v) for k, v in extras.items()})
    header = {"version": CHECKPOINT_VERSION, "config": asdict(cfg)}
    np.savez(path, __header__=np.frombuffer(
        json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Load (config, params, extras); mismatched config is a hard error."""
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        cfg = ModelConfig(**header["config"])
        if expect is not None and cfg != expect:
            raise ValueError(
                f"checkpoint config {cfg} does not match expected {expect}")
        params, extras = {}, {}
        for key in z.files:
            if key.startswith("param/"):
                params[key[6:]] = Tensor(z[key].copy(), requires_grad=True)
            elif key.startswith("extra/"):
                extras[key[6:]] = z[key].copy()
    return cfg, params, extras


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    """Inference-precision copy of the parameter dict (e.g. float32)."""
    return {k: Tensor(v.data.astype(dtype)) for k, v in params.items()}
