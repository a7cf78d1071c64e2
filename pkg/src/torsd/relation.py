"""Relation networks, auxiliary classifiers and the logit relation block.

A relation network at depth i is ``RIB(FPL([f_a; f_b]))``: the FPL projects a
channel-concatenated feature pair to a D-vector, the RIB maps that vector to
a single unconstrained scalar. All modules here are deterministic (no
normalisation or dropout), so train and eval behave identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from .backbone import BlockSpec, TappedBackbone, TappedFeatures, init_weights
from .config import TorsdConfig
from .errors import ConfigValidationError, ShapeError


def concat_pair(f_a: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
    """Stack two depth-i maps along channels, anchor first."""
    if f_a.shape != f_b.shape:
        raise ShapeError("pair features must have equal shapes", expected=tuple(f_a.shape), actual=tuple(f_b.shape))
    return torch.cat([f_a, f_b], dim=-3)


class FeatureProjection(nn.Module):
    """Stride-2 3x3 convs until the map is at most 2x2, then 1x1 to D and GAP."""

    def __init__(self, in_channels: int, height: int, width: int, embed_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(in_channels // 2, 1)
        layers, c, h, w = [], in_channels, height, width
        while h > 2 or w > 2:
            layers += [nn.Conv2d(c, hidden, 3, stride=2, padding=1), nn.ReLU()]
            c, h, w = hidden, (h + 1) // 2, (w + 1) // 2
        self.convs = nn.Sequential(*layers)
        self.proj = nn.Conv2d(c, embed_dim, 1)
        self.in_channels = in_channels

    def forward(self, pair: torch.Tensor) -> torch.Tensor:
        if pair.shape[-3] != self.in_channels:
            raise ShapeError("pair channel width", expected=self.in_channels, actual=pair.shape[-3])
        return self.proj(self.convs(pair)).mean(dim=(-2, -1))


class RelationBlock(nn.Module):
    """Two fully connected layers: in -> in/2 -> 1."""

    def __init__(self, in_dim: int):
        super().__init__()
        hidden = max(in_dim // 2, 1)
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        self.in_dim = in_dim

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.in_dim:
            raise ShapeError("relation block input width", expected=self.in_dim, actual=z.shape[-1])
        return self.fc2(torch.relu(self.fc1(z))).squeeze(-1)


class RelationNetwork(nn.Module):
    def __init__(self, spec: BlockSpec, embed_dim: int):
        super().__init__()
        self.depth = spec.index
        self.fpl = FeatureProjection(2 * spec.channels, spec.height, spec.width, embed_dim,
                                     hidden=spec.channels)
        self.rib = RelationBlock(embed_dim)

    def forward(self, pair: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.fpl(pair)
        return z, self.rib(z)


def project(rn: RelationNetwork, pair: torch.Tensor) -> torch.Tensor:
    return rn.fpl(pair)


def relate(rn: RelationNetwork, z: torch.Tensor) -> torch.Tensor:
    return rn.rib(z)


class AuxClassifierPair(nn.Module):
    def __init__(self, embed_dim: int, num_classes: int):
        super().__init__()
        self.pos = nn.Linear(embed_dim, num_classes)
        self.neg = nn.Linear(embed_dim, num_classes)


def aux_logits(head: nn.Linear, z: torch.Tensor) -> torch.Tensor:
    if z.shape[-1] != head.in_features:
        raise ShapeError("auxiliary head input width", expected=head.in_features, actual=z.shape[-1])
    return head(z)


def logit_relation(lrib: RelationBlock, logits_a: torch.Tensor, logits_b: torch.Tensor) -> torch.Tensor:
    if logits_a.shape != logits_b.shape:
        raise ShapeError("logit widths differ", expected=tuple(logits_a.shape), actual=tuple(logits_b.shape))
    return lrib(torch.cat([logits_a, logits_b], dim=-1))


@dataclass
class RelationBundle:
    z_p: list[torch.Tensor] = field(default_factory=list)
    z_n: list[torch.Tensor] = field(default_factory=list)
    r_p: list[torch.Tensor] = field(default_factory=list)
    r_n: list[torch.Tensor] = field(default_factory=list)
    logit_r_p: torch.Tensor | None = None
    logit_r_n: torch.Tensor | None = None

    @property
    def depth(self) -> int:
        return len(self.r_p)

    def is_empty(self) -> bool:
        return not self.r_p and self.logit_r_p is None


class TorsdModel(nn.Module):
    """Backbone plus every training-only head.

    Parameter names follow the checkpoint contract: ``backbone.*``,
    ``rn.{i}.fpl.*``, ``rn.{i}.rib.*``, ``aux.{i}.pos.*``, ``aux.{i}.neg.*``,
    ``logit_rib.*`` with 1-based depth i.
    """

    def __init__(self, backbone: TappedBackbone, cfg: TorsdConfig):
        super().__init__()
        self.backbone = backbone
        specs = backbone.block_specs()
        self.k = len(specs)
        self.rn = nn.ModuleDict()
        self.aux = nn.ModuleDict()
        self.logit_rib = None
        if cfg.enable_rn:
            for spec in specs:
                self.rn[str(spec.index)] = RelationNetwork(spec, cfg.embed_dim)
        if cfg.enable_ac:
            for spec in specs:
                self.aux[str(spec.index)] = AuxClassifierPair(cfg.embed_dim, backbone.num_classes)
        if cfg.enable_ld:
            self.logit_rib = RelationBlock(2 * backbone.num_classes)

    @property
    def relation_networks(self) -> list[RelationNetwork]:
        return [self.rn[str(i)] for i in range(1, self.k + 1)] if len(self.rn) else []

    @property
    def pos_heads(self) -> list[nn.Linear]:
        return [self.aux[str(i)].pos for i in range(1, self.k + 1)] if len(self.aux) else []

    @property
    def neg_heads(self) -> list[nn.Linear]:
        return [self.aux[str(i)].neg for i in range(1, self.k + 1)] if len(self.aux) else []

    def forward(self, x):
        return self.backbone(x)


def build_model(backbone: TappedBackbone, cfg: TorsdConfig) -> TorsdModel:
    """Attach heads to ``backbone``; head init is seeded from ``cfg.seed``.

    The backbone's own weights are untouched, so with every toggle off the
    bundle is exactly the backbone.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed + 1)
        model = TorsdModel(backbone, cfg)
        for name in ("rn", "aux"):
            init_weights(getattr(model, name))
        if model.logit_rib is not None:
            init_weights(model.logit_rib)
    return model


def forward_relations(features: TappedFeatures, model: TorsdModel) -> RelationBundle:
    bundle = RelationBundle()
    rns = model.relation_networks
    if rns:
        if len(rns) != features.depth:
            raise ConfigValidationError("depth", f"{features.depth} tapped depths but {len(rns)} relation networks")
        for i, rn in enumerate(rns):
            z_p, r_p = rn(concat_pair(features.f_o[i], features.f_p[i]))
            z_n, r_n = rn(concat_pair(features.f_o[i], features.f_n[i]))
            bundle.z_p.append(z_p)
            bundle.z_n.append(z_n)
            bundle.r_p.append(r_p)
            bundle.r_n.append(r_n)
    if model.logit_rib is not None:
        bundle.logit_r_p = logit_relation(model.logit_rib, features.logits_o, features.logits_p)
        bundle.logit_r_n = logit_relation(model.logit_rib, features.logits_o, features.logits_n)
    return bundle


def head_groups(model: TorsdModel) -> dict[str, Sequence[nn.Parameter]]:
    """Trainable parameters grouped as backbone / rn.i / aux.i / logit_rib."""
    groups: dict[str, list] = {}
    for name, param in model.named_parameters():
        parts = name.split(".")
        key = parts[0] if parts[0] in ("backbone", "logit_rib") else ".".join(parts[:2])
        groups.setdefault(key, []).append(param)
    return groups
