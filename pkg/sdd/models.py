"""
Constructors for the mono-modal and multi-modal autoencoders and their
reconstruction contract.

Every variant shares the same encoder stage layout (conv stride 2, batchnorm,
ReLU with 256/128/64 filters) so each modality's latent is 64x4x4 on 32x32
spectrograms; variants differ only in how those latents are fused.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import torch
from pydantic import ValidationError

from sdd.cwt import SampleTensor, stack_samples
from sdd.engine import ModelGraph, Objective, layer_count, parameter_count, serialized_size
from sdd.exceptions import ConfigError, InvalidArgumentError
from sdd.losses import get_loss, kl_divergence, reconstruction_loss, sparsity_term
from sdd.schemas import FusionConfig, LayerSpec

logger = logging.getLogger(__name__)

MODALITIES = ("acc", "aud")


class ModelId(str, Enum):
    """
    Model ids accepted on the command line.
    """
    MACC = "macc"
    MAUD = "maud"
    MAA1 = "maa1"
    MAA2 = "maa2"
    MAA3 = "maa3"
    MATTEN = "matten"
    MBOTF = "mbotf"
    CVAE = "cvae"
    RESIDUAL = "residual"


VARIANT_BY_ID: Dict[ModelId, str] = {
    ModelId.MACC: "mono_acc",
    ModelId.MAUD: "mono_aud",
    ModelId.MAA1: "maa1_joint",
    ModelId.MAA2: "maa2_conv",
    ModelId.MAA3: "maa3_pool",
    ModelId.MATTEN: "matten",
    ModelId.MBOTF: "mbotf",
    ModelId.CVAE: "cvae",
    ModelId.RESIDUAL: "residual",
}

MODEL_IDS = [m.value for m in ModelId]


@dataclass(frozen=True)
class ReconstructionOutput:
    accel_recon: Optional[np.ndarray]  # (3, S, S); None for mono_aud
    audio_recon: Optional[np.ndarray]  # (1, S, S); None for mono_acc
    latent: np.ndarray
    aux: Optional[float] = None  # KL term (cvae)


def model_config_for(model_id: Union[str, ModelId], **overrides: Any) -> FusionConfig:
    try:
        variant = VARIANT_BY_ID[ModelId(model_id)]
    except ValueError:
        raise ConfigError(f"Unknown model id '{model_id}'; expected one of {MODEL_IDS}") from None
    try:
        return FusionConfig(variant=variant, **overrides)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration for {model_id}: {e.errors()[0]['msg']}") from e


# =============================================================================
# GRAPH CONSTRUCTION
# =============================================================================

class _GraphBuilder:
    def __init__(self, cfg: FusionConfig):
        self.cfg = cfg
        self.layers: List[LayerSpec] = []

    def add(self, name: str, kind: str, inputs: List[str], **params: Any) -> str:
        self.layers.append(LayerSpec(name=name, kind=kind, inputs=inputs, params=params))
        return name

    def conv_bn_relu(self, prefix: str, x: str, width: int, stride: int = 1, kernel: int = 3) -> str:
        c = self.add(f"{prefix}_conv", "conv2d", [x], out_channels=width, kernel=kernel, stride=stride)
        n = self.add(f"{prefix}_bn", "batchnorm", [c])
        return self.add(f"{prefix}_relu", "relu", [n])

    def encoder_stage(self, modality: str, stage: int, x: str, residual: bool) -> str:
        width = self.cfg.filters[stage - 1]
        if residual:
            return self.add(f"{modality}_enc{stage}_res", "residual_block", [x], out_channels=width, stride=2)
        return self.conv_bn_relu(f"{modality}_enc{stage}", x, width, stride=2)

    def encoder(self, modality: str, residual: bool = False) -> str:
        x = modality
        for stage in (1, 2, 3):
            x = self.encoder_stage(modality, stage, x, residual)
        return x

    def decoder(self, modality: str, z: str, residual: bool = False) -> str:
        """Mirror of the encoder: nearest upsample + conv per stage, sigmoid output."""
        out_channels = self.cfg.accel_channels if modality == "acc" else self.cfg.audio_channels
        x = z
        for stage, width in ((1, self.cfg.filters[1]), (2, self.cfg.filters[0])):
            up = self.add(f"{modality}_dec{stage}_up", "upsample2d", [x], factor=2)
            if residual:
                x = self.add(f"{modality}_dec{stage}_res", "residual_block", [up], out_channels=width, stride=1)
            else:
                x = self.conv_bn_relu(f"{modality}_dec{stage}", up, width)
        up = self.add(f"{modality}_dec3_up", "upsample2d", [x], factor=2)
        conv = self.add(f"{modality}_dec3_conv", "conv2d", [up], out_channels=out_channels, kernel=3)
        return self.add(f"{modality}_recon", "sigmoid", [conv])

    def joint(self, z_acc: str, z_aud: str) -> str:
        if self.cfg.fusion_op == "sum":
            return self.add("joint", "add", [z_acc, z_aud])
        return self.add("joint", "concat", [z_acc, z_aud])

    def shared(self, x: str) -> str:
        return self.conv_bn_relu("shared", x, self.cfg.latent_channels, kernel=1)


def _mono(b: _GraphBuilder, modality: str) -> Dict[str, str]:
    z = b.encoder(modality)
    return {"latent": z, f"{modality}_recon": b.decoder(modality, z)}


def _fused(b: _GraphBuilder, fused: str, residual: bool = False) -> Dict[str, str]:
    return {
        "latent": fused,
        "acc_recon": b.decoder("acc", fused, residual),
        "aud_recon": b.decoder("aud", fused, residual),
    }


def _maa(b: _GraphBuilder, level: int, residual: bool = False) -> Dict[str, str]:
    """level 1: joint + shared 1x1; 2: plus k x k fusion conv; 3: plus 2x2 pooling and upsampling."""
    z = b.shared(b.joint(b.encoder("acc", residual), b.encoder("aud", residual)))
    if level >= 2:
        z = b.conv_bn_relu("fusion", z, b.cfg.latent_channels, kernel=b.cfg.fusion_kernel)
    if level >= 3:
        pooled = b.add("pool", "maxpool2d", [z], kernel=2, stride=2, mode=b.cfg.pool)
        roles = _fused(b, b.add("unpool", "upsample2d", [pooled], factor=2), residual)
        roles["latent"] = pooled
        return roles
    return _fused(b, z, residual)


def _matten(b: _GraphBuilder) -> Dict[str, str]:
    attended = b.add("attention", "attention", [b.encoder("acc"), b.encoder("aud")], heads=b.cfg.attention_heads)
    return _fused(b, b.shared(b.joint(f"{attended}[0]", f"{attended}[1]")))


def _mbotf(b: _GraphBuilder) -> Dict[str, str]:
    acc, aud = "acc", "aud"
    for stage in (1, 2, 3):
        acc = b.encoder_stage("acc", stage, acc, residual=False)
        aud = b.encoder_stage("aud", stage, aud, residual=False)
        if stage < 3:
            unit = b.add(f"exchange{stage}", "bottleneck_exchange", [acc, aud],
                         heads=b.cfg.attention_heads, tokens=b.cfg.bottleneck_tokens)
            acc, aud = f"{unit}[0]", f"{unit}[1]"
    return _fused(b, b.shared(b.joint(acc, aud)))


def _cvae(b: _GraphBuilder) -> Dict[str, str]:
    grid = b.cfg.input_size // 8
    flat = b.add("flatten", "flatten", [b.joint(b.encoder("acc"), b.encoder("aud"))])
    mu = b.add("mu", "dense", [flat], units=b.cfg.vae_latent)
    logvar = b.add("logvar", "dense", [flat], units=b.cfg.vae_latent)
    z = b.add("z", "sampling", [mu, logvar])
    expand = b.add("expand", "dense", [z], units=b.cfg.latent_channels * grid * grid)
    expand_relu = b.add("expand_relu", "relu", [expand])
    grid_latent = b.add("unflatten", "reshape", [expand_relu], shape=[b.cfg.latent_channels, grid, grid])
    roles = _fused(b, grid_latent)
    roles.update(latent=z, mu=mu, logvar=logvar)
    return roles


def build_model(cfg: Union[FusionConfig, Mapping[str, Any]]) -> ModelGraph:
    """Build the ModelGraph for one fusion variant; the graph's roles name its reconstructions and latent."""
    if not isinstance(cfg, FusionConfig):
        try:
            cfg = FusionConfig.model_validate(cfg)
        except ValidationError as e:
            raise ConfigError(f"Invalid model configuration: {e.errors()[0]['msg']}") from e

    b = _GraphBuilder(cfg)
    size = cfg.input_size
    entries = {"acc": (cfg.accel_channels, size, size), "aud": (cfg.audio_channels, size, size)}
    if cfg.variant == "mono_acc":
        roles, entries = _mono(b, "acc"), {"acc": entries["acc"]}
    elif cfg.variant == "mono_aud":
        roles, entries = _mono(b, "aud"), {"aud": entries["aud"]}
    elif cfg.variant == "maa1_joint":
        roles = _maa(b, 1)
    elif cfg.variant == "maa2_conv":
        roles = _maa(b, 2)
    elif cfg.variant == "maa3_pool":
        roles = _maa(b, 3)
    elif cfg.variant == "matten":
        roles = _matten(b)
    elif cfg.variant == "mbotf":
        roles = _mbotf(b)
    elif cfg.variant == "cvae":
        roles = _cvae(b)
    elif cfg.variant == "residual":
        roles = _maa(b, 3, residual=True)
    else:
        raise ConfigError(f"Unknown variant '{cfg.variant}'")

    outputs = [roles[f"{m}_recon"] for m in MODALITIES if f"{m}_recon" in roles]
    graph = ModelGraph(entries, b.layers, outputs, roles=roles, seed=cfg.seed)
    logger.debug(f"Built {cfg.variant}: {parameter_count(graph)} parameters, {layer_count(graph)} layers")
    return graph


def graph_modalities(graph: ModelGraph) -> List[str]:
    return [m for m in MODALITIES if m in graph.entries]


def model_stats(graph: ModelGraph) -> Dict[str, int]:
    return {
        "param_count": parameter_count(graph),
        "layer_count": layer_count(graph),
        "model_bytes": serialized_size(graph),
    }


# =============================================================================
# RECONSTRUCTION
# =============================================================================

def reconstruction_objective(loss_id: str, sparsity_weight: float = 0.0, kl_weight: float = 1.0) -> Objective:
    """
    Training objective: mean per-sample reconstruction loss summed over the
    graph's modalities, plus the L1 latent penalty and the weighted KL term when
    the graph has a variational latent.
    """
    get_loss(loss_id)

    def objective(graph: ModelGraph, batch: Dict[str, torch.Tensor], acts: Dict[str, torch.Tensor]) -> torch.Tensor:
        total = torch.zeros((), dtype=graph.dtype)
        for modality in graph_modalities(graph):
            recon = acts[graph.roles[f"{modality}_recon"]]
            total = total + reconstruction_loss(loss_id, batch[modality], recon).mean()
        if sparsity_weight > 0 and "latent" in graph.roles:
            total = total + sparsity_term(acts[graph.roles["latent"]], sparsity_weight)
        if "mu" in graph.roles and kl_weight > 0:
            total = total + kl_weight * kl_divergence(acts[graph.roles["mu"]], acts[graph.roles["logvar"]]).mean()
        return total

    return objective


def reconstruct_batch(
    graph: ModelGraph,
    inputs: Mapping[str, np.ndarray],
    loss_id: str,
    batch_size: int = 64,
) -> Dict[str, np.ndarray]:
    """Per-sample reconstruction loss for every modality the graph reconstructs."""
    modalities = graph_modalities(graph)
    missing = [m for m in modalities if m not in inputs]
    if missing:
        raise InvalidArgumentError(f"Inputs lack modalities {missing} required by this model")
    n = len(inputs[modalities[0]])
    losses: Dict[str, List[np.ndarray]] = {m: [] for m in modalities}
    graph.eval()
    with torch.no_grad():
        for start in range(0, n, batch_size):
            batch = {m: torch.as_tensor(np.asarray(inputs[m][start:start + batch_size]), dtype=graph.dtype)
                     for m in modalities}
            acts = graph(batch)
            for m in modalities:
                per_sample = reconstruction_loss(loss_id, batch[m], acts[graph.roles[f"{m}_recon"]])
                losses[m].append(per_sample.double().numpy())
    return {m: np.concatenate(parts) if parts else np.zeros(0) for m, parts in losses.items()}


def reconstruct(graph: ModelGraph, sample: SampleTensor, loss_id: str) -> Tuple[ReconstructionOutput, Dict[str, float]]:
    """Reconstruct one sample; losses are computed per modality (3 accel channels, 1 audio channel)."""
    arrays = stack_samples([sample])
    modalities = graph_modalities(graph)
    graph.eval()
    with torch.no_grad():
        acts = graph({m: arrays[m] for m in modalities})
        losses = {
            m: float(reconstruction_loss(loss_id, torch.as_tensor(arrays[m], dtype=graph.dtype),
                                         acts[graph.roles[f"{m}_recon"]])[0])
            for m in modalities
        }
        aux = None
        if "mu" in graph.roles:
            aux = float(kl_divergence(acts[graph.roles["mu"]], acts[graph.roles["logvar"]])[0])
        output = ReconstructionOutput(
            accel_recon=acts[graph.roles["acc_recon"]][0].numpy() if "acc" in modalities else None,
            audio_recon=acts[graph.roles["aud_recon"]][0].numpy() if "aud" in modalities else None,
            latent=acts[graph.roles["latent"]][0].numpy(),
            aux=aux,
        )
    return output, losses
