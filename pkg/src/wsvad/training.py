"""Training loop: half/half video batches, per-stream Adam groups,
ablation toggles, checkpoints, optional distillation teacher.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as ls
from .errors import ContractError, FormatError
from .features import VideoBag, collapse_crops
from .memory import DualMemoryScores, default_top_k, dual_memory_loss
from .model import Detector, ModelConfig, STREAM_INPUTS, STREAMS

log = logging.getLogger(__name__)

CKPT_FORMAT = "wsvad-checkpoint"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    """Optimizer and batching knobs.  The flow and audio streams train
    faster than the rgb stream by default; ``lr_uniform`` overrides all
    groups when set."""

    lr_rgb: float = 1e-6
    lr_flow: float = 3e-5
    lr_audio: float = 3e-5
    lr_uniform: float | None = None
    batch_videos: int = 32
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.batch_videos < 2 or self.batch_videos % 2 != 0:
            raise ContractError("batch_videos must be an even count >= 2")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")

    def group_lr(self, group: str) -> float:
        if self.lr_uniform is not None:
            return self.lr_uniform
        return {"rgb": self.lr_rgb, "flow": self.lr_flow, "audio": self.lr_audio,
                "head": self.lr_flow}[group]


@dataclass
class TrainResult:
    model: Detector
    history: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def model_config_for(bags: list[VideoBag], d_model: int = 128, heads: int = 4,
                     radius: int = 8, disabled=(), **overrides) -> ModelConfig:
    """Derive a model configuration from the modalities every given bag
    provides (audio-less datasets build a two-stream model)."""
    if not bags:
        raise ContractError("need at least one video to derive a model config")
    common = set.intersection(*(set(b.modalities) for b in bags))
    streams = tuple(s for s in STREAMS
                    if all(k in common for k in STREAM_INPUTS[s]))
    if "rgb" not in streams:
        raise ContractError(f"rgb_i3d and clip features are required; found {sorted(common)}")
    dims = {}
    probe = bags[0]
    for s in streams:
        for key in STREAM_INPUTS[s]:
            dims[key] = probe.features(key).dim
    return ModelConfig(streams=streams, input_dims=dims, d_model=d_model,
                       heads=heads, radius=radius, disabled=tuple(disabled), **overrides)


def video_feature_arrays(bag: VideoBag, crop: int | None = None) -> dict[str, np.ndarray]:
    """(T, D) float arrays per modality; ``crop`` picks one crop, None
    averages them (the evaluation convention)."""
    out = {}
    for modality in bag.modalities:
        seq = bag.features(modality)
        if crop is None:
            out[modality] = collapse_crops(seq, "mean").data[:, 0, :]
        else:
            out[modality] = seq.data[:, crop, :]
    return out


def _make_batches(normal: list[int], abnormal: list[int], batch_videos: int,
                  rng: np.random.Generator) -> list[list[int]]:
    """Half-normal/half-abnormal batches; the leftover tail forms one
    smaller batch when both halves are non-empty."""
    half = batch_videos // 2
    n_order = [normal[i] for i in rng.permutation(len(normal))]
    a_order = [abnormal[i] for i in rng.permutation(len(abnormal))]
    batches = []
    pos = 0
    while pos < min(len(n_order), len(a_order)):
        n_chunk = n_order[pos:pos + half]
        a_chunk = a_order[pos:pos + half]
        if not n_chunk or not a_chunk:
            break
        batches.append(n_chunk + a_chunk)
        pos += half
    return batches


def _teacher_series(teacher: Detector | None, feats: dict[str, np.ndarray],
                    rng: np.random.Generator) -> np.ndarray | None:
    if teacher is None:
        return None
    needed = {k for s in teacher.cfg.streams for k in STREAM_INPUTS[s]}
    subset = {k: v for k, v in feats.items() if k in needed}
    return teacher.forward_video(subset, training=False, rng=rng).scores.data.copy()


def train(bags: list[VideoBag], model_cfg: ModelConfig, train_cfg: TrainConfig,
          weights: ls.LossWeights | None = None, teacher: Detector | None = None,
          epoch_hook=None) -> TrainResult:
    """Train a detector on the train split of ``bags``.

    Deterministic for a fixed seed: batch order, dropout, nomination
    noise and the uncertainty sampler all draw from one seeded stream.
    ``epoch_hook(epoch, model)`` runs after each epoch (used for eval
    logging by the CLI).
    """
    weights = weights or ls.LossWeights()
    train_bags = [b for b in bags if b.split == "train"]
    normal = [i for i, b in enumerate(train_bags) if b.label == 0]
    abnormal = [i for i, b in enumerate(train_bags) if b.label == 1]
    if not normal or not abnormal:
        raise ContractError("training needs both labels in the train split")
    if "pel" in model_cfg.disabled:
        log.warning("the 'pel' toggle maps to prompt-based losses outside this "
                    "model; it is accepted but has no effect")

    model = Detector.build(model_cfg, seed=train_cfg.seed)
    groups = model.parameter_groups()
    states: dict[str, ad.AdamState] | None = None  # built after the first backward
    rng = np.random.default_rng(train_cfg.seed + 1)
    use_mc = model_cfg.uses("mc") and weights.lam_mc > 0.0
    has_teacher = teacher is not None

    # training samples: one entry per (video, crop) so 5-crop features
    # contribute five samples sharing the video label
    samples: dict[int, list[int]] = {}
    for i, bag in enumerate(train_bags):
        crops = bag.features(bag.modalities[0]).crops
        samples[i] = list(range(crops))

    history = []
    for epoch in range(train_cfg.epochs):
        batches = _make_batches(normal, abnormal, train_cfg.batch_videos, rng)
        epoch_parts: dict[str, float] = {}
        step_totals: list[float] = []
        for batch in batches:
            mil_terms, kd_terms, kl_terms = [], [], []
            dm_scores = DualMemoryScores()
            normal_feats, abnormal_feats = [], []
            for i in batch:
                bag = train_bags[i]
                for crop in samples[i]:
                    feats = video_feature_arrays(bag, crop=crop)
                    out = model.forward_video(feats, training=True, rng=rng)
                    # nomination gates the abnormal-bag pool; normal bags
                    # keep the full series so every snippet is suppressed
                    pool = out.selected_idx if bag.label == 1 else None
                    pool_size = len(pool) if pool is not None else bag.snippets
                    bag_topk = min(default_top_k(bag.snippets), pool_size)
                    mil_terms.append(ls.mil_bag_loss(out.scores, bag.label,
                                                     bag_topk=bag_topk, pool_idx=pool))
                    kd_terms.append(ls.distill_loss(
                        out.scores, _teacher_series(teacher, feats, rng)))
                    if out.dm_aux is not None:
                        if bag.label == 0:
                            dm_scores.s_nn.append(out.dm_aux.sims_normal)
                            dm_scores.s_na.append(out.dm_aux.sims_abnormal)
                            kl_terms.append(out.dm_aux.kl)
                        else:
                            dm_scores.s_an.append(out.dm_aux.sims_normal)
                            dm_scores.s_aa.append(out.dm_aux.sims_abnormal)
                    (normal_feats if bag.label == 0 else abnormal_feats).append(out.fused)

            mil = _mean_of(mil_terms)
            kd = _mean_of(kd_terms)
            dm = dual_memory_loss(dm_scores) if model_cfg.uses("dmu") else ad.tensor(0.0)
            kl = _mean_of(kl_terms) if kl_terms else ad.tensor(0.0)
            if use_mc:
                mc = ls.magnitude_contrast_loss(ad.concat(normal_feats, axis=0),
                                                ad.concat(abnormal_feats, axis=0),
                                                k=weights.mc_top_k,
                                                margin=weights.mc_margin)
            else:
                mc = ad.tensor(0.0)
            batch_weights = weights if use_mc else _without_mc(weights)
            total, parts = ls.total_loss(mil, kd, mc, dm, kl, batch_weights,
                                         has_teacher=has_teacher)
            ad.backward(total)
            if states is None:
                # disabled blocks leave their parameters outside the graph;
                # prune to what the loss actually reaches
                groups = {g: [p for p in params if p.grad is not None]
                          for g, params in groups.items()}
                groups = {g: params for g, params in groups.items() if params}
                states = {g: ad.adam_init(params, lr=train_cfg.group_lr(g))
                          for g, params in groups.items()}
            for g, params in groups.items():
                ad.adam_step(params, states[g])
            for key, val in parts.items():
                epoch_parts[key] = epoch_parts.get(key, 0.0) + val / len(batches)
            step_totals.append(parts["total"])

        record = {"epoch": epoch, **epoch_parts, "step_totals": step_totals}
        if epoch_hook is not None:
            extra = epoch_hook(epoch, model)
            if extra:
                record.update(extra)
        history.append(record)

    return TrainResult(model=model, history=history,
                       config={"train": vars(train_cfg).copy(),
                               "model": model_cfg.to_dict(),
                               "weights": vars(weights).copy()})


def _mean_of(terms: list[ad.Tensor]) -> ad.Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def _without_mc(weights: ls.LossWeights) -> ls.LossWeights:
    return ls.LossWeights(lam_kd=weights.lam_kd, lam_mc=0.0, lam_dm=weights.lam_dm,
                          lam_kl=weights.lam_kl, mc_margin=weights.mc_margin,
                          mc_top_k=weights.mc_top_k, bag_topk=weights.bag_topk)


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

def save_checkpoint(path, model: Detector, extra: dict | None = None) -> None:
    """Write every named parameter plus a JSON config echo into one
    .npz container."""
    meta = {"format": CKPT_FORMAT, "version": CKPT_VERSION,
            "model": model.cfg.to_dict(), "extra": extra or {}}
    arrays = {f"param::{name}": t.data for name, t in model.named_params()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[Detector, dict]:
    """Rebuild the detector a checkpoint describes; returns (model, meta)."""
    try:
        with np.load(path) as data:
            if "__meta__" not in data:
                raise FormatError(f"{path}: not a checkpoint (missing metadata)")
            meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
            if meta.get("format") != CKPT_FORMAT:
                raise FormatError(f"{path}: unknown checkpoint format {meta.get('format')!r}")
            if meta.get("version") != CKPT_VERSION:
                raise FormatError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
            cfg = ModelConfig.from_dict(meta["model"])
            model = Detector.build(cfg, seed=0)
            stored = {k: data[k] for k in data.files if k.startswith("param::")}
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint: {exc}") from exc
    for name, tensor in model.named_params():
        key = f"param::{name}"
        if key not in stored:
            raise FormatError(f"{path}: checkpoint is missing parameter {name!r}")
        arr = stored.pop(key)
        if arr.shape != tensor.data.shape:
            raise FormatError(f"{path}: parameter {name!r} has shape {arr.shape}, "
                              f"expected {tensor.data.shape}")
        tensor.data = arr.astype(tensor.data.dtype)
    if stored:
        raise FormatError(f"{path}: checkpoint carries unknown parameters {sorted(stored)[:3]}")
    return model, meta
