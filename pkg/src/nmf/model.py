"""Trainable scene: factored field + material decoder + gain network + env map."""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .envmap import EnvironmentMap
from .grid import FactorGrid
from .materials import GainNetwork, MaterialDecoder, MaterialSample


class SceneModel(nn.Module):
    """Everything the renderer queries, bundled with its parameters.

    Learning-rate groups: the grid factors train at the spatial rate, the
    decoder/gain/env parameters at the network rate.
    """

    def __init__(
        self,
        grid: FactorGrid,
        decoder: MaterialDecoder,
        gain: GainNetwork,
        env: EnvironmentMap,
    ):
        super().__init__()
        self.grid = grid
        self.decoder = decoder
        self.gain = gain
        self.env = env

    def density(self, p: Tensor) -> Tensor:
        return self.grid.sample_density(p)

    def material(self, p: Tensor) -> MaterialSample:
        return self.decoder(self.grid.sample_feature(p))

    def normal(self, p: Tensor) -> tuple[Tensor, Tensor]:
        return self.grid.normal_at(p)

    @property
    def gain_net(self) -> GainNetwork:
        return self.gain

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        spatial = list(self.grid.parameters())
        network = (
            list(self.decoder.parameters())
            + list(self.gain.parameters())
            + list(self.env.parameters())
        )
        return {"spatial": spatial, "network": network}

    def replace_grid(self, grid: FactorGrid) -> None:
        self.grid = grid

    @staticmethod
    def create(
        resolution=(32, 32, 32),
        density_rank: int = 8,
        feature_rank: int = 24,
        feature_dim: int = 16,
        bbox=((-1.4, -1.4, -1.4), (1.4, 1.4, 1.4)),
        env_height: int = 512,
        env_width: int = 1024,
        gain_mode: str = "neural",
        dtype: torch.dtype = torch.float32,
        seed: int = 0,
    ) -> "SceneModel":
        gen = torch.Generator().manual_seed(seed)
        grid = FactorGrid(
            resolution,
            density_rank=density_rank,
            feature_rank=feature_rank,
            feature_dim=feature_dim,
            bbox=bbox,
            dtype=dtype,
            generator=gen,
        )
        decoder = MaterialDecoder(feature_dim)
        gain = GainNetwork(feature_dim, mode=gain_mode)
        with torch.no_grad():
            for m in list(decoder.modules()) + list(gain.modules()):
                if isinstance(m, nn.Linear):
                    w = torch.empty_like(m.weight)
                    w.uniform_(-0.1, 0.1, generator=gen)
                    m.weight.copy_(w)
                    m.bias.zero_()
        decoder.to(dtype)
        gain.to(dtype)
        env = EnvironmentMap(env_height, env_width, dtype=dtype)
        return SceneModel(grid, decoder, gain, env)
