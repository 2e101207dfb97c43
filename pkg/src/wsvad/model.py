"""The three modality streams, the magnitude-based top-k nominator,
gated attention fusion, and the causal classifier head.

A :class:`Detector` owns the per-stream parameter records and wires one
video's features through:

    rgb:   proj -> TCA -> (conv+relu+dropout || clip proj) -> concat
           -> dual-memory block + residual -> conv/gelu/dropout x2
    flow:  linear+relu -> transformer block
    audio: linear -> transformer block
    fuse:  per-stream sigmoid gates -> concat -> multi-head attention
    score: causal conv -> sigmoid

Ablation toggles replace individual blocks with identity (or zero the
branch a backbone feeds) so the surrounding wiring stays intact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import (MultiHeadParams, TcaParams, multi_head, tca_forward,
                        transformer_block, TransformerBlockParams)
from .autodiff import Linear, Tensor
from .errors import ConfigError, ContractError, DimensionError
from .memory import UrdmuAux, UrdmuParams, urdmu_forward

STREAMS = ("rgb", "flow", "audio")
TOGGLES = ("i3d", "tca", "clip", "topk", "mhsa", "dmu", "pel", "mc", "ss")

STREAM_INPUTS = {
    "rgb": ("rgb_i3d", "clip"),
    "flow": ("flow_i3d",),
    "audio": ("audio_vggish",),
}


@dataclass
class ModelConfig:
    """Everything needed to rebuild a model deterministically."""

    streams: tuple[str, ...]
    input_dims: dict[str, int]
    d_model: int = 128
    heads: int = 4
    radius: int = 8
    dropout: float = 0.1
    topk_ratio: float = 0.3
    noise_std: float = 0.1
    # present + one past observation; wider causal kernels let the
    # classifier learn a window-OR that wrecks frame-level localization
    clf_kernel: int = 2
    mem_slots: int = 60
    ffn_mult: int = 4
    disabled: tuple[str, ...] = ()

    def __post_init__(self):
        self.streams = tuple(self.streams)
        self.disabled = tuple(self.disabled)
        if not self.streams or any(s not in STREAMS for s in self.streams):
            raise ConfigError(f"streams must be a non-empty subset of {STREAMS}")
        if "rgb" not in self.streams:
            raise ConfigError("the rgb stream is required")
        for s in self.streams:
            for key in STREAM_INPUTS[s]:
                if key not in self.input_dims:
                    raise ConfigError(f"stream {s!r} needs input dim for {key!r}")
        if self.d_model % 2 != 0 or self.d_model % self.heads != 0:
            raise ConfigError("d_model must be even and divisible by the head count")
        if self.heads % 2 != 0:
            raise ConfigError("head count must be even (half global, half local)")
        if not 0.0 < self.topk_ratio <= 1.0:
            raise ConfigError(f"topk_ratio must be in (0, 1], got {self.topk_ratio}")
        if self.clf_kernel < 1:
            raise ConfigError("classifier kernel must be >= 1")
        unknown = set(self.disabled) - set(TOGGLES)
        if unknown:
            raise ConfigError(f"unknown ablation toggles: {sorted(unknown)}")

    def uses(self, block: str) -> bool:
        return block not in self.disabled

    def to_dict(self) -> dict:
        return {"streams": list(self.streams), "input_dims": dict(self.input_dims),
                "d_model": self.d_model, "heads": self.heads, "radius": self.radius,
                "dropout": self.dropout, "topk_ratio": self.topk_ratio,
                "noise_std": self.noise_std, "clf_kernel": self.clf_kernel,
                "mem_slots": self.mem_slots, "ffn_mult": self.ffn_mult,
                "disabled": list(self.disabled)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["streams"] = tuple(d["streams"])
        d["disabled"] = tuple(d.get("disabled", ()))
        return cls(**d)


# ----------------------------------------------------------------------
# nomination
# ----------------------------------------------------------------------

def topk_nominate(clip_feats: Tensor, ratio: float, noise_std: float,
                  rng: np.random.Generator, training: bool) -> tuple[np.ndarray, Tensor]:
    """Rank snippets by the L2 magnitude of a noised clone and pick the
    top k = max(1, round(ratio*T)).

    Noise perturbs only the ranking (train mode); gradients flow through
    the un-noised selected rows.  Ties resolve to the lowest index and
    indices come back sorted ascending.
    """
    t = clip_feats.shape[0]
    if t < 1:
        raise ContractError("cannot nominate from an empty sequence")
    k = max(1, int(ratio * t + 0.5))
    if k > t:
        raise ContractError(f"nomination count {k} exceeds T={t}")
    clone = clip_feats.data.astype(np.float64)
    if training and noise_std > 0.0:
        clone = clone + rng.normal(0.0, noise_std, size=clone.shape)
    magnitudes = np.sqrt((clone ** 2).sum(axis=1))
    idx = ad.top_k_indices(magnitudes, k)
    return idx, ad.gather_rows(clip_feats, idx)


# ----------------------------------------------------------------------
# parameter records
# ----------------------------------------------------------------------

@dataclass
class RgbStreamParams:
    proj_i3d: Linear
    tca: TcaParams
    reduce_kernel: Tensor        # (1, d, d/2) pointwise conv
    reduce_bias: Tensor
    proj_clip: Linear
    stage2_in: Linear
    xc_proj: Linear
    dmu: UrdmuParams
    conv1_kernel: Tensor         # (1, d, d)
    conv1_bias: Tensor
    conv2_kernel: Tensor
    conv2_bias: Tensor

    @classmethod
    def init(cls, rng, cfg: ModelConfig, dtype=np.float32) -> "RgbStreamParams":
        d = cfg.d_model
        half = d // 2
        conv = lambda d_in, d_out: ad.param(rng, (1, d_in, d_out), scale=1.0 / np.sqrt(d_in), dtype=dtype)
        return cls(
            proj_i3d=Linear.init(rng, cfg.input_dims["rgb_i3d"], d, dtype),
            tca=TcaParams.init(rng, d, cfg.radius, dtype),
            reduce_kernel=conv(d, half),
            reduce_bias=ad.zeros_param((half,), dtype),
            proj_clip=Linear.init(rng, cfg.input_dims["clip"], half, dtype),
            stage2_in=Linear.init(rng, d, d, dtype),
            xc_proj=Linear.init(rng, d, d, dtype),
            dmu=UrdmuParams.init(rng, d, cfg.heads, cfg.radius, cfg.mem_slots, dtype),
            conv1_kernel=conv(d, d), conv1_bias=ad.zeros_param((d,), dtype),
            conv2_kernel=conv(d, d), conv2_bias=ad.zeros_param((d,), dtype))

    def named(self, prefix):
        yield from self.proj_i3d.named(f"{prefix}.proj_i3d")
        yield from self.tca.named(f"{prefix}.tca")
        yield f"{prefix}.reduce_kernel", self.reduce_kernel
        yield f"{prefix}.reduce_bias", self.reduce_bias
        yield from self.proj_clip.named(f"{prefix}.proj_clip")
        yield from self.stage2_in.named(f"{prefix}.stage2_in")
        yield from self.xc_proj.named(f"{prefix}.xc_proj")
        yield from self.dmu.named(f"{prefix}.dmu")
        yield f"{prefix}.conv1_kernel", self.conv1_kernel
        yield f"{prefix}.conv1_bias", self.conv1_bias
        yield f"{prefix}.conv2_kernel", self.conv2_kernel
        yield f"{prefix}.conv2_bias", self.conv2_bias


@dataclass
class SeqStreamParams:
    """Shared shape of the flow and audio streams: projection + one
    transformer block."""

    proj: Linear
    block: TransformerBlockParams

    @classmethod
    def init(cls, rng, d_in: int, cfg: ModelConfig, dtype=np.float32) -> "SeqStreamParams":
        return cls(proj=Linear.init(rng, d_in, cfg.d_model, dtype),
                   block=TransformerBlockParams.init(rng, cfg.d_model, cfg.heads,
                                                     cfg.ffn_mult, dtype))

    def named(self, prefix):
        yield from self.proj.named(f"{prefix}.proj")
        yield from self.block.named(f"{prefix}.block")


@dataclass
class FusionParams:
    """Per-stream scalar gates, the attention block over the gated
    concatenation, and the causal classifier weights."""

    order: tuple[str, ...]
    gates: dict[str, Linear]
    attn: MultiHeadParams
    clf_kernel: Tensor           # (clf_kernel, D_f, 1)
    clf_bias: Tensor

    @classmethod
    def init(cls, rng, cfg: ModelConfig, dtype=np.float32) -> "FusionParams":
        d = cfg.d_model
        d_f = d * len(cfg.streams)
        gates = {s: Linear.init(rng, d, 1, dtype) for s in cfg.streams}
        return cls(order=cfg.streams, gates=gates,
                   attn=MultiHeadParams.init(rng, d_f, cfg.heads, dtype),
                   clf_kernel=ad.param(rng, (cfg.clf_kernel, d_f, 1),
                                       scale=1.0 / np.sqrt(cfg.clf_kernel * d_f), dtype=dtype),
                   clf_bias=ad.zeros_param((1,), dtype))

    def named(self, prefix):
        for s in self.order:
            yield from self.gates[s].named(f"{prefix}.gate_{s}")
        yield from self.attn.named(f"{prefix}.attn")
        yield f"{prefix}.clf_kernel", self.clf_kernel
        yield f"{prefix}.clf_bias", self.clf_bias


# ----------------------------------------------------------------------
# stream forwards
# ----------------------------------------------------------------------

def rgb_stage1(clip_feats: Tensor, i3d_feats: Tensor, p: RgbStreamParams,
               cfg: ModelConfig, rng: np.random.Generator,
               training: bool) -> tuple[Tensor, Tensor]:
    """Stage 1: clip projection concatenated with the temporally
    aggregated + reduced i3d branch.  Returns (stage-1 features, the
    aggregated i3d features the stage-2 residual needs)."""
    t = i3d_feats.shape[0]
    half = cfg.d_model // 2
    x = p.proj_i3d(i3d_feats)
    x_tca = tca_forward(x, p.tca) if cfg.uses("tca") else x
    if cfg.uses("i3d"):
        reduced = ad.relu(ad.add(ad.conv1d(x_tca, p.reduce_kernel), p.reduce_bias))
        reduced = ad.dropout(reduced, cfg.dropout, training, rng)
    else:
        reduced = ad.tensor(np.zeros((t, half)), dtype=i3d_feats.data.dtype)
    if cfg.uses("clip"):
        clip_branch = p.proj_clip(clip_feats)
    else:
        clip_branch = ad.tensor(np.zeros((t, half)), dtype=i3d_feats.data.dtype)
    if clip_branch.shape[0] != t:
        raise DimensionError("clip and i3d branches disagree on snippet count")
    return ad.concat([clip_branch, reduced], axis=1), x_tca


def rgb_stage2(f1: Tensor, x_c: Tensor, p: RgbStreamParams, cfg: ModelConfig,
               rng: np.random.Generator, training: bool) -> tuple[Tensor, UrdmuAux | None]:
    """Stage 2: memory-augmented features added to the aggregated
    stream.  ``x_c`` must already be at model width."""
    projected = p.stage2_in(f1)
    if cfg.uses("dmu"):
        enhanced, aux = urdmu_forward(projected, p.dmu, rng, training,
                                      use_attention=cfg.uses("mhsa"))
    else:
        enhanced, aux = projected, None
    return ad.add(enhanced, x_c), aux


def rgb_stage3(f2: Tensor, p: RgbStreamParams, cfg: ModelConfig,
               rng: np.random.Generator, training: bool) -> Tensor:
    """Stage 3: two rounds of pointwise conv -> GELU -> dropout."""
    h = ad.dropout(ad.gelu(ad.add(ad.conv1d(f2, p.conv1_kernel), p.conv1_bias)),
                   cfg.dropout, training, rng)
    return ad.dropout(ad.gelu(ad.add(ad.conv1d(h, p.conv2_kernel), p.conv2_bias)),
                      cfg.dropout, training, rng)


def flow_stream(flow_feats: Tensor, p: SeqStreamParams) -> Tensor:
    return transformer_block(ad.relu(p.proj(flow_feats)), p.block)


def audio_stream(audio_feats: Tensor, p: SeqStreamParams) -> Tensor:
    return transformer_block(p.proj(audio_feats), p.block)


def gated_fuse(streams: dict[str, Tensor], p: FusionParams) -> Tensor:
    """Scale each stream by a per-time-step sigmoid gate, concatenate
    along features, and add one multi-head attention pass over time.

    The attention rides on a residual: a bare attention output is close
    to a uniform time-average at init, which erases the per-snippet
    structure frame-level scoring depends on.

    ``streams`` must carry exactly the streams the params were built
    for; degrading to fewer modalities happens at model build time.
    """
    if not streams:
        raise ContractError("gated fusion needs at least one stream")
    if set(streams) != set(p.order):
        raise ContractError(
            f"fusion built for streams {p.order}, got {tuple(sorted(streams))}")
    gated = []
    for name in p.order:
        feats = streams[name]
        gate = ad.sigmoid(p.gates[name](feats))   # (T, 1), in (0, 1)
        gated.append(ad.mul(feats, gate))
    merged = ad.concat(gated, axis=1)
    return ad.add(merged, multi_head(merged, p.attn))


def classify(fused: Tensor, p: FusionParams) -> Tensor:
    """Causal conv over the fused features -> one sigmoid score per
    snippet, shape (T,)."""
    logits = ad.add(ad.conv1d(fused, p.clf_kernel, causal=True), p.clf_bias)
    return ad.reshape(ad.sigmoid(logits), (fused.shape[0],))


# ----------------------------------------------------------------------
# the assembled detector
# ----------------------------------------------------------------------

@dataclass
class VideoForward:
    """One video's forward outputs plus the hooks training needs."""

    scores: Tensor                       # (T,) in [0, 1]
    fused: Tensor                        # (T, D_f)
    dm_aux: UrdmuAux | None
    selected_idx: np.ndarray             # nominated snippet indices


@dataclass
class Detector:
    cfg: ModelConfig
    rgb: RgbStreamParams
    flow: SeqStreamParams | None
    audio: SeqStreamParams | None
    fusion: FusionParams

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int, dtype=np.float32) -> "Detector":
        rng = np.random.default_rng(seed)
        rgb = RgbStreamParams.init(rng, cfg, dtype)
        flow = (SeqStreamParams.init(rng, cfg.input_dims["flow_i3d"], cfg, dtype)
                if "flow" in cfg.streams else None)
        audio = (SeqStreamParams.init(rng, cfg.input_dims["audio_vggish"], cfg, dtype)
                 if "audio" in cfg.streams else None)
        return cls(cfg=cfg, rgb=rgb, flow=flow, audio=audio,
                   fusion=FusionParams.init(rng, cfg, dtype))

    def named_params(self):
        yield from self.rgb.named("rgb")
        if self.flow is not None:
            yield from self.flow.named("flow")
        if self.audio is not None:
            yield from self.audio.named("audio")
        yield from self.fusion.named("fusion")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        """Per-stream groups so the trainer can run one learning rate
        each; fusion and classifier weights ride in 'head'."""
        groups = {"rgb": [t for _, t in self.rgb.named("rgb")],
                  "head": [t for _, t in self.fusion.named("fusion")]}
        if self.flow is not None:
            groups["flow"] = [t for _, t in self.flow.named("flow")]
        if self.audio is not None:
            groups["audio"] = [t for _, t in self.audio.named("audio")]
        return groups

    def _check_features(self, feats: dict[str, np.ndarray]) -> int:
        t = None
        for stream in self.cfg.streams:
            for key in STREAM_INPUTS[stream]:
                if key not in feats:
                    raise ContractError(f"forward pass needs {key!r} features")
                arr = feats[key]
                if arr.ndim != 2 or arr.shape[1] != self.cfg.input_dims[key]:
                    raise DimensionError(
                        f"{key}: expected (T, {self.cfg.input_dims[key]}), got {arr.shape}")
                if t is None:
                    t = arr.shape[0]
                elif arr.shape[0] != t:
                    raise DimensionError("modalities disagree on snippet count")
        return t

    def forward_video(self, feats: dict[str, np.ndarray], training: bool,
                      rng: np.random.Generator) -> VideoForward:
        """Score one video given raw (T, D) float arrays per modality."""
        t = self._check_features(feats)
        dtype = self.rgb.proj_i3d.w.data.dtype
        as_input = lambda key: ad.tensor(feats[key], dtype=dtype)

        clip_feats = as_input("clip")
        if training and self.cfg.uses("topk"):
            selected_idx, _ = topk_nominate(clip_feats, self.cfg.topk_ratio,
                                            self.cfg.noise_std, rng, training)
        else:
            selected_idx = np.arange(t)

        f1, x_tca = rgb_stage1(clip_feats, as_input("rgb_i3d"), self.rgb,
                               self.cfg, rng, training)
        x_c = self.rgb.xc_proj(x_tca) if self.cfg.uses("i3d") else \
            ad.tensor(np.zeros((t, self.cfg.d_model)), dtype=dtype)
        f2, dm_aux = rgb_stage2(f1, x_c, self.rgb, self.cfg, rng, training)
        streams = {"rgb": rgb_stage3(f2, self.rgb, self.cfg, rng, training)}
        if self.flow is not None:
            streams["flow"] = flow_stream(as_input("flow_i3d"), self.flow)
        if self.audio is not None:
            streams["audio"] = audio_stream(as_input("audio_vggish"), self.audio)

        fused = gated_fuse(streams, self.fusion)
        scores = classify(fused, self.fusion)
        return VideoForward(scores=scores, fused=fused, dm_aux=dm_aux,
                            selected_idx=selected_idx)
