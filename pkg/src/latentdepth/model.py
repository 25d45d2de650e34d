"""Full depth-estimation pipeline wiring the four sub-networks together.

Data flow: RGB -> frozen latent encoder -> latent z; RGB -> semantic encoder
-> embedding s; (z, s) -> denoising UNet features -> depth decoder -> metric
depth. The latent encoder and the semantic backbone/query transformer stand
in for pretrained components and stay frozen; the enhancements (DC, SA), the
UNet and the depth decoder train.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .core_types import ModelConfig, RgbImage
from .denoising_unet import DenoisingUNet, build_schedule, forward_diffuse
from .depth_decoder import DepthDecoder
from .digests import parameter_digest
from .latent_codec import FrozenLatentEncoder, FrozenWeights, init_frozen_encoder
from .param_init import seeded_init_
from .semantic_encoder import DC_ATTR, SA_ATTR, ImageSemanticEncoder

GROUP_LATENT = "latent_encoder"
GROUP_SEMANTIC = "semantic_encoder"
GROUP_DC = "dilated_conv"
GROUP_SA = "spatial_attention"
GROUP_UNET = "denoising_unet"
GROUP_DECODER = "depth_decoder"

FROZEN_GROUPS = (GROUP_LATENT, GROUP_SEMANTIC)
TRAINABLE_GROUPS = (GROUP_DC, GROUP_SA, GROUP_UNET, GROUP_DECODER)
ALL_GROUPS = FROZEN_GROUPS + TRAINABLE_GROUPS


class DepthEstimationModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.check()
        self.config = config
        self.seed = seed
        self.latent_encoder = FrozenLatentEncoder(config)
        self.semantic = ImageSemanticEncoder(config)
        self.unet = DenoisingUNet(config)
        self.depth_decoder = DepthDecoder(config)
        self.schedule = build_schedule(config.diffusion_T, config.beta_start, config.beta_end)

        frozen = init_frozen_encoder(seed, config)
        self.latent_encoder.load_state_dict(frozen.state)
        gen = torch.Generator().manual_seed(seed + 1)
        # a fixed submodule order plus draw-free zero inits keeps shared
        # parameters identical across ablation configs with the same seed
        seeded_init_(self.semantic, gen)
        seeded_init_(self.unet, gen)
        seeded_init_(self.depth_decoder, gen)

        for name, p in self.named_parameters():
            if self._group_of(name) in FROZEN_GROUPS:
                p.requires_grad_(False)

    @property
    def pad_multiple(self) -> int:
        return self.config.latent_downsample

    @property
    def frozen_weights(self) -> FrozenWeights:
        state = {k: v.detach().clone() for k, v in self.latent_encoder.state_dict().items()}
        return FrozenWeights(
            state=state, digest=parameter_digest(state), seed=self.seed,
            latent_downsample=self.config.latent_downsample,
            latent_channels=self.config.latent_channels,
        )

    def _group_of(self, name: str) -> str:
        if name.startswith("latent_encoder."):
            return GROUP_LATENT
        if name.startswith("semantic."):
            if f".{DC_ATTR}." in name:
                return GROUP_DC
            if f".{SA_ATTR}." in name:
                return GROUP_SA
            return GROUP_SEMANTIC
        if name.startswith("unet."):
            return GROUP_UNET
        if name.startswith("depth_decoder."):
            return GROUP_DECODER
        return "_unassigned"

    def parameter_groups(self) -> dict[str, list[str]]:
        """Parameter names per freeze group; '_unassigned' flags strays."""
        groups: dict[str, list[str]] = {g: [] for g in ALL_GROUPS}
        for name, _ in self.named_parameters():
            groups.setdefault(self._group_of(name), []).append(name)
        return groups

    def group_digests(self, groups: tuple[str, ...] = FROZEN_GROUPS) -> dict[str, str]:
        params = dict(self.named_parameters())
        out = {}
        for g in groups:
            named = [(n, params[n]) for n in self.parameter_groups()[g]]
            out[g] = parameter_digest(named)
        return out

    def encode(self, x01: torch.Tensor) -> torch.Tensor:
        """Frozen latent encoding of [0, 1] RGB; gradients never flow here."""
        with torch.no_grad():
            return self.latent_encoder(x01 * 2.0 - 1.0)

    def compute(self, x01: torch.Tensor, t=None, eps: torch.Tensor | None = None
                ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Depth for a batch; optionally a noisy diffusion pass.

        With t (and matching eps) given, the UNet runs at the sampled
        timestep and eps_pred is returned for the diffusion loss. Otherwise
        the deterministic t_feat feature pass is used and eps_pred is None.
        """
        z = self.encode(x01)
        s = self.semantic(x01 * 2.0 - 1.0)
        if t is None:
            feats = self.unet.extract_features(z, s, self.schedule)
            eps_pred = None
        else:
            if eps is None:
                raise ValueError("eps must be provided when t is given")
            z_t = forward_diffuse(z, t, eps, self.schedule)
            eps_pred, feats = self.unet(z_t, t, s)
        depth = self.depth_decoder(feats, (int(x01.shape[-2]), int(x01.shape[-1])))
        return depth, eps_pred

    def forward(self, x01: torch.Tensor) -> torch.Tensor:
        return self.compute(x01)[0]

    @torch.no_grad()
    def predict(self, image: RgbImage) -> np.ndarray:
        """Predict metric depth for one image, padding to the model stride."""
        data = image.data
        h, w = data.shape[1], data.shape[2]
        m = self.pad_multiple
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            data = np.pad(data, ((0, 0), (0, ph), (0, pw)), mode="edge")
        x = torch.from_numpy(np.ascontiguousarray(data)).unsqueeze(0)
        depth = self.forward(x)[0, :h, :w]
        return depth.numpy().astype(np.float32)
