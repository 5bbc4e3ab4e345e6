"""The full localization network: three attention U-Nets, the learnable
blend, the feature refiner, the mask-space encoder, and one shared
predictor head serving every probability readout."""

from __future__ import annotations

import torch
import torch.nn as nn

from .backbones import ATTENTION_KINDS, AttentionUNet, BackboneConfig
from .fusion import FusionLayer
from .reasoning import MaskEncoder, PredictorHead, ReasoningNet


class TamperModel(nn.Module):
    def __init__(self, depth: int = 3, blocks_per_scale: int = 1,
                 base_channels: int = 8, reasoning_depth: int = 1,
                 in_channels: int = 3):
        super().__init__()
        self.backbones = nn.ModuleList([
            AttentionUNet(BackboneConfig(depth=depth,
                                         blocks_per_scale=blocks_per_scale,
                                         base_channels=base_channels,
                                         attention_kind=kind,
                                         in_channels=in_channels))
            for kind in ATTENTION_KINDS
        ])
        self.fusion = FusionLayer()
        self.reasoning = ReasoningNet(base_channels, depth=reasoning_depth)
        self.mask_encoder = MaskEncoder(base_channels)
        self.head = PredictorHead(base_channels)

    def extract(self, x: torch.Tensor):
        return tuple(net(x) for net in self.backbones)

    def predicted_distribution(self, feat: torch.Tensor) -> torch.Tensor:
        """Shared-head Bernoulli map for a (blended) feature, (B,1,H,W)."""
        return self.head(feat)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Inference path: probability map from the refined fused feature."""
        f1, f2, f3 = self.extract(x)
        fused = self.fusion(f1, f2, f3)
        return self.head(self.reasoning(fused))

    def training_forward(self, x: torch.Tensor,
                         noisy_mask: torch.Tensor,
                         need_loo: bool = True,
                         need_mask_branch: bool = True) -> dict:
        """Everything one optimization step consumes.

        Returns main prediction, full and leave-one-out distribution maps,
        the refined feature, the mask embedding and the auxiliary
        prediction; the two optional groups can be skipped when their loss
        weights are zero.
        """
        f1, f2, f3 = self.extract(x)
        fused = self.fusion(f1, f2, f3)
        z = self.reasoning(fused)
        out = {
            "pred": self.head(z),
            "z": z,
            "gamma": self.fusion.gamma,
        }
        if need_loo:
            out["p_full"] = self.head(fused)
            out["p_loo"] = [
                self.head(self.fusion.leave_one_out(f1, f2, f3, i))
                for i in (1, 2, 3)
            ]
        if need_mask_branch:
            embedding = self.mask_encoder(noisy_mask)
            out["mask_embedding"] = embedding
            out["aux_pred"] = self.head(embedding)
        return out
