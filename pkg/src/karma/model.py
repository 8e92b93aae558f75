"""Forecasting model assembly.

Pipeline per window (L x D in, T x D out):

  normalize -> trend/seasonal split (attention) -> per-channel embeddings
  -> seasonal: wavelet split + N refinement blocks + inverse, head E_s->T
  -> trend:    one global state-space block,            head E_t->T
  -> additive fusion -> denormalize.

All learnable state lives in this module's parameter records; forward logic
is pure functions over them so independent windows can run concurrently.
"""

import struct
from dataclasses import dataclass, fields as dc_fields
from math import ceil, sqrt
from typing import Optional

import numpy as np

from .decomposition import (AtcdParams, FreqComponents, WaveletFilter,
                            atcd_forward, hftd_decompose, hftd_inverse,
                            init_atcd, make_wavelet)
from .errors import ConfigError, KarmaError, ShapeError
from .rng import Rng
from .ssm import SsmParams, init_ssm, mamba_forward
from .tensor import (Tensor, add, add_row_vec, flip_axis0, matmul,
                     mul_row_vec, reciprocal, rmsnorm, scale, transpose)


@dataclass
class KarmaConfig:
    channels: int
    lookback: int = 96
    horizon: int = 96
    e_s: int = 64
    e_t: int = 64
    n_blocks: int = 2
    inner: int = 64
    heads: int = 4
    p_drop: float = 0.1
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    wavelet: str = "haar"
    use_atcd: bool = True
    use_hftd: bool = True
    share_temporal_mamba: bool = True
    norm_affine: bool = False
    seed: int = 0

    def validate(self) -> "KarmaConfig":
        positive = ("channels", "lookback", "horizon", "e_s", "e_t", "n_blocks",
                    "inner", "heads", "d_state", "d_conv", "expand")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lookback < 2:
            raise ConfigError("lookback must be >= 2 (window statistics need it)")
        if self.e_s % 2 != 0:
            raise ConfigError(f"e_s must be even for the wavelet split, got {self.e_s}")
        if self.inner % self.heads != 0:
            raise ConfigError(f"inner width {self.inner} not divisible by "
                              f"{self.heads} heads")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError(f"p_drop must lie in [0, 1), got {self.p_drop}")
        make_wavelet(self.wavelet)  # rejects unknown names
        return self


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray   # already clamped from below by eps
    eps: float


def instance_normalize(x: Tensor, eps: float = 1e-5) -> tuple[Tensor, NormStats]:
    """Per-channel z-scoring over the window (population std, eps-clamped).

    Statistics are treated as constants of the window: gradients w.r.t.
    model parameters are exact, which is all training needs.
    """
    if x.ndim != 2 or x.shape[0] < 2:
        raise ShapeError(f"need a window with >= 2 rows to normalize, got {x.shape}")
    if eps <= 0:
        raise ConfigError("normalization eps must be > 0")
    mean = x.data.mean(axis=0)
    std = np.maximum(np.sqrt(((x.data - mean) ** 2).mean(axis=0)), eps)
    x_norm = mul_row_vec(add_row_vec(x, Tensor(-mean)), Tensor(1.0 / std))
    return x_norm, NormStats(mean=mean, std=std, eps=eps)


def instance_denormalize(y: Tensor, stats: NormStats) -> Tensor:
    if y.ndim != 2 or y.shape[1] != stats.mean.shape[0]:
        raise ShapeError(f"output {y.shape} does not match {stats.mean.shape[0]} "
                         f"normalization channels")
    return add_row_vec(mul_row_vec(y, Tensor(stats.std)), Tensor(stats.mean))


@dataclass
class BlockParams:
    mamba_hf: Optional[SsmParams]
    mamba_lf: Optional[SsmParams]
    mamba_t: SsmParams
    mamba_t2: Optional[SsmParams]  # None -> both temporal passes share mamba_t
    gain: Tensor                   # rmsnorm gain inside the residual update

    def named(self, prefix: str):
        if self.mamba_hf is not None:
            yield from self.mamba_hf.named(f"{prefix}.hf")
            yield from self.mamba_lf.named(f"{prefix}.lf")
        yield from self.mamba_t.named(f"{prefix}.t")
        if self.mamba_t2 is not None:
            yield from self.mamba_t2.named(f"{prefix}.t2")
        yield f"{prefix}.gain", self.gain


class KarmaModel:
    def __init__(self, config: KarmaConfig, atcd, embed, hftd_gain, blocks,
                 global_mamba, heads, norm_affine_params):
        self.config = config
        self.atcd: Optional[AtcdParams] = atcd
        (self.w_embed_s, self.b_embed_s, self.w_embed_t, self.b_embed_t) = embed
        self.hftd_gain: Tensor = hftd_gain
        self.blocks: list[BlockParams] = blocks
        self.global_mamba: SsmParams = global_mamba
        (self.w_head_s, self.b_head_s, self.w_head_t, self.b_head_t) = heads
        self.norm_gain, self.norm_bias = norm_affine_params
        self.filt: Optional[WaveletFilter] = (
            make_wavelet(config.wavelet) if config.use_hftd else None)
        self.scan_mode = "sequential"

    def named_parameters(self):
        if self.atcd is not None:
            yield from self.atcd.named("atcd")
        yield "embed.w_s", self.w_embed_s
        yield "embed.b_s", self.b_embed_s
        yield "embed.w_t", self.w_embed_t
        yield "embed.b_t", self.b_embed_t
        yield "hftd.gain", self.hftd_gain
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"blocks.{i}")
        yield from self.global_mamba.named("global")
        yield "head.w_s", self.w_head_s
        yield "head.b_s", self.b_head_s
        yield "head.w_t", self.w_head_t
        yield "head.b_t", self.b_head_t
        if self.norm_gain is not None:
            yield "norm.gain", self.norm_gain
            yield "norm.bias", self.norm_bias

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def forward(self, x: Tensor, rng: Optional[Rng] = None,
                training: bool = False) -> Tensor:
        return karma_forward(x, self, rng, training)


def init_parameters(config: KarmaConfig, rng: Rng) -> KarmaModel:
    config.validate()
    cf = config

    def uni(r, fan_in, shape):
        bound = 1.0 / sqrt(fan_in)
        return Tensor(r.uniform(-bound, bound, shape), requires_grad=True)

    atcd = None
    if cf.use_atcd:
        atcd = init_atcd(cf.lookback, cf.inner, cf.heads, cf.p_drop, rng.spawn(0))

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    r_emb = rng.spawn(1)
    embed = (uni(r_emb.spawn(0), cf.lookback, (cf.lookback, cf.e_s)),
             zeros(cf.e_s),
             uni(r_emb.spawn(2), cf.lookback, (cf.lookback, cf.e_t)),
             zeros(cf.e_t))

    hftd_gain = Tensor(np.ones(cf.e_s), requires_grad=True)

    r_blocks = rng.spawn(2)
    blocks = []
    for i in range(cf.n_blocks):
        rb = r_blocks.spawn(i)
        hf = lf = None
        if cf.use_hftd:
            half = cf.e_s // 2
            hf = init_ssm(half, cf.d_state, cf.d_conv, cf.expand, rb.spawn(0))
            lf = init_ssm(half, cf.d_state, cf.d_conv, cf.expand, rb.spawn(1))
        t1 = init_ssm(cf.e_s, cf.d_state, cf.d_conv, cf.expand, rb.spawn(2))
        t2 = None
        if not cf.share_temporal_mamba:
            t2 = init_ssm(cf.e_s, cf.d_state, cf.d_conv, cf.expand, rb.spawn(3))
        blocks.append(BlockParams(hf, lf, t1, t2,
                                  Tensor(np.ones(cf.e_s), requires_grad=True)))

    global_mamba = init_ssm(cf.e_t, cf.d_state, cf.d_conv, cf.expand, rng.spawn(3))

    r_head = rng.spawn(4)
    heads = (uni(r_head.spawn(0), cf.e_s, (cf.e_s, cf.horizon)),
             zeros(cf.horizon),
             uni(r_head.spawn(2), cf.e_t, (cf.e_t, cf.horizon)),
             zeros(cf.horizon))

    affine = (None, None)
    if cf.norm_affine:
        affine = (Tensor(np.ones(cf.channels), requires_grad=True),
                  Tensor(np.zeros(cf.channels), requires_grad=True))
    return KarmaModel(cf, atcd, embed, hftd_gain, blocks, global_mamba, heads,
                      affine)


def parameter_count(config: KarmaConfig) -> int:
    """Closed-form size of the parameter vector for a config.

    Must equal KarmaModel.parameter_count() for every valid config; the
    test suite asserts this against an independently counted model.
    """
    cf = config
    L, T, E_s, E_t, I = cf.lookback, cf.horizon, cf.e_s, cf.e_t, cf.inner

    def ssm_size(d_in):
        di = cf.expand * d_in
        r = ceil(d_in / 16)
        return (d_in * 2 * di + di * cf.d_conv + di + di * 2 * cf.d_state
                + di * r + r * di + di + di * cf.d_state + di + di * d_in)

    total = 0
    if cf.use_atcd:
        total += L * I + I + 3 * I * I + I * I + 2 * I * L
    total += L * E_s + E_s + L * E_t + E_t          # embeddings
    total += E_s                                     # hftd gain
    per_block = ssm_size(E_s) + E_s
    if cf.use_hftd:
        per_block += 2 * ssm_size(E_s // 2)
    if not cf.share_temporal_mamba:
        per_block += ssm_size(E_s)
    total += cf.n_blocks * per_block
    total += ssm_size(E_t)                           # global trend block
    total += E_s * T + T + E_t * T + T               # heads
    if cf.norm_affine:
        total += 2 * cf.channels
    return total


def embed_components(x_s: Tensor, x_t: Tensor, model: KarmaModel) -> tuple[Tensor, Tensor]:
    """Project each channel's L samples to the embedding widths.

    Returns (seasonal D x E_s, trend D x E_t); one shared linear map per
    component, applied to the transposed (channels-as-rows) window.
    """
    cf = model.config
    if x_s.shape != (cf.lookback, cf.channels) or x_t.shape != x_s.shape:
        raise ShapeError(f"component shapes {x_s.shape}/{x_t.shape} do not match "
                         f"window ({cf.lookback}, {cf.channels})")
    se = add_row_vec(matmul(transpose(x_s), model.w_embed_s), model.b_embed_s)
    te = add_row_vec(matmul(transpose(x_t), model.w_embed_t), model.b_embed_t)
    return se, te


def karma_block(f: FreqComponents, block: BlockParams,
                scan_mode: str = "sequential") -> FreqComponents:
    """One refinement step over the frequency/temporal quadruple.

    Frequency halves pass their own blocks; the temporal stream gets a
    residual update from a shared block applied to its normalized self and
    to the channel-flipped copy.
    """
    f_h = f_l = None
    if f.f_h is not None:
        f_h = mamba_forward(f.f_h, block.mamba_hf, scan_mode)
        f_l = mamba_forward(f.f_l, block.mamba_lf, scan_mode)
    second = block.mamba_t if block.mamba_t2 is None else block.mamba_t2
    t_f = add(add(mamba_forward(rmsnorm(f.t_f, block.gain), block.mamba_t, scan_mode),
                  mamba_forward(f.t_b, second, scan_mode)),
              f.t_f)
    return FreqComponents(f_h, f_l, t_f, flip_axis0(t_f), f.m)


def _stage(name, fn):
    try:
        return fn()
    except KarmaError as err:
        raise type(err)(f"{name}: {err}") from err


def karma_forward(x: Tensor, model: KarmaModel, rng: Optional[Rng] = None,
                  training: bool = False) -> Tensor:
    """Forecast one window: (L x D) -> (T x D)."""
    cf = model.config
    if x.shape != (cf.lookback, cf.channels):
        raise ShapeError(f"input {x.shape} does not match configured window "
                         f"({cf.lookback}, {cf.channels})")

    def normalize():
        x_norm, stats = instance_normalize(x)
        if model.norm_gain is not None:
            x_norm = add_row_vec(mul_row_vec(x_norm, model.norm_gain),
                                 model.norm_bias)
        return x_norm, stats

    x_norm, stats = _stage("normalize", normalize)

    def split():
        if model.atcd is not None:
            return atcd_forward(x_norm, model.atcd, rng, training)
        return Tensor(np.zeros(x_norm.shape)), x_norm

    x_t, x_s = _stage("trend-seasonal split", split)
    se, te = _stage("embedding", lambda: embed_components(x_s, x_t, model))

    def seasonal_path():
        comps = hftd_decompose(se, model.filt, model.hftd_gain)
        for blk in model.blocks:
            comps = karma_block(comps, blk, model.scan_mode)
        inner = hftd_inverse(comps, model.filt)
        return transpose(add_row_vec(matmul(inner, model.w_head_s),
                                     model.b_head_s))

    def trend_path():
        refined = mamba_forward(te, model.global_mamba, model.scan_mode)
        return transpose(add_row_vec(matmul(refined, model.w_head_t),
                                     model.b_head_t))

    y_season = _stage("seasonal path", seasonal_path)
    y_trend = _stage("trend path", trend_path)

    def fuse():
        y = add(y_season, y_trend)
        if model.norm_gain is not None:
            y = mul_row_vec(add_row_vec(y, scale(model.norm_bias, -1.0)),
                            reciprocal(model.norm_gain))
        return instance_denormalize(y, stats)

    return _stage("fusion", fuse)


# -- checkpoint format ---------------------------------------------------------------

_MAGIC = b"KARMA1"


def _config_to_strings(config: KarmaConfig) -> dict[str, str]:
    out = {}
    for f in dc_fields(config):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            out[f.name] = "true" if v else "false"
        elif isinstance(v, float):
            out[f.name] = repr(v)
        else:
            out[f.name] = str(v)
    return out


def _config_from_strings(entries: dict[str, str]) -> KarmaConfig:
    kwargs = {}
    for f in dc_fields(KarmaConfig):
        if f.name not in entries:
            raise ConfigError(f"checkpoint config misses key {f.name!r}")
        raw = entries[f.name]
        if f.type in (bool, "bool"):
            kwargs[f.name] = raw == "true"
        elif f.type in (int, "int"):
            kwargs[f.name] = int(raw)
        elif f.type in (float, "float"):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return KarmaConfig(**kwargs)


def _write_tensor(fh, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(path, model: KarmaModel, extras: Optional[dict] = None):
    """Binary snapshot: magic, config key/value block, named fp64 tensors.

    extras (e.g. dataset scaler arrays) are stored after the parameters
    under an 'extra.' prefix and returned as a dict by load_checkpoint.
    """
    entries = _config_to_strings(model.config)
    params = list(model.named_parameters())
    extras = extras or {}
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for key in sorted(entries):
            kb, vb = key.encode("utf-8"), entries[key].encode("utf-8")
            fh.write(struct.pack("<H", len(kb)))
            fh.write(kb)
            fh.write(struct.pack("<H", len(vb)))
            fh.write(vb)
        fh.write(struct.pack("<I", len(params) + len(extras)))
        for name, tensor in params:
            _write_tensor(fh, name, tensor.data)
        for key in sorted(extras):
            _write_tensor(fh, f"extra.{key}", np.asarray(extras[key], dtype=np.float64))


def load_checkpoint(path) -> tuple[KarmaModel, dict, KarmaConfig]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:6] != _MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    at = 6

    def take(fmt):
        nonlocal at
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, blob, at)
        at += size
        return vals[0] if len(vals) == 1 else vals

    def take_bytes(n):
        nonlocal at
        out = blob[at:at + n]
        if len(out) != n:
            raise ConfigError(f"{path}: truncated checkpoint")
        at += n
        return out

    entries = {}
    for _ in range(take("<I")):
        key = take_bytes(take("<H")).decode("utf-8")
        entries[key] = take_bytes(take("<H")).decode("utf-8")
    config = _config_from_strings(entries)
    model = init_parameters(config, Rng(config.seed))

    loaded = {}
    for _ in range(take("<I")):
        name = take_bytes(take("<H")).decode("utf-8")
        rank = take("<B")
        shape = tuple(take("<I") for _ in range(rank))
        count = 1
        for d in shape:
            count *= d
        arr = np.frombuffer(take_bytes(count * 8), dtype="<f8").reshape(shape).copy()
        loaded[name] = arr

    extras = {}
    for name, tensor in model.named_parameters():
        if name not in loaded:
            raise ConfigError(f"checkpoint misses parameter {name!r}")
        arr = loaded.pop(name)
        if arr.shape != tensor.data.shape:
            raise ShapeError(f"checkpoint {name}: shape {arr.shape} != "
                             f"{tensor.data.shape}")
        tensor.data = arr
    for name, arr in loaded.items():
        if not name.startswith("extra."):
            raise ConfigError(f"checkpoint holds unknown tensor {name!r}")
        extras[name[len("extra."):]] = arr
    return model, extras, config
