"""Residual feed-forward denoiser with timestep and condition embeddings."""
from __future__ import annotations

import math

import torch
from torch import nn


def sinusoidal_embedding(x: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = x.float().reshape(-1, 1) * freqs.reshape(1, -1)
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class ResidualBlock(nn.Module):
    def __init__(self, width: int, emb_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, width)
        self.emb = nn.Linear(emb_dim, width)
        self.fc2 = nn.Linear(width, width)
        self.act = nn.SiLU()

    def forward(self, h, emb):
        x = self.fc1(self.act(self.norm(h))) + self.emb(emb)
        return h + self.fc2(self.act(x))


class Denoiser(nn.Module):
    """Predicts the noise added to a ``dim``-vector at timestep n under condition alpha.

    The condition pathway embeds alpha continuously (so unseen levels are
    valid inputs); the unconditional case uses a learned null embedding.
    ``cond_scale`` multiplies alpha before the sinusoidal features.
    """

    def __init__(self, dim: int = 6, width: int = 256, n_blocks: int = 4, emb_dim: int = 128,
                 timesteps: int = 1000, cond_scale: float = 10.0):
        super().__init__()
        self.dim = dim
        self.width = width
        self.n_blocks = n_blocks
        self.emb_dim = emb_dim
        self.timesteps = timesteps
        self.cond_scale = cond_scale
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(),
                                      nn.Linear(emb_dim, emb_dim))
        self.cond_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(),
                                      nn.Linear(emb_dim, emb_dim))
        self.null_embedding = nn.Parameter(torch.zeros(1, emb_dim))
        self.inp = nn.Linear(dim, width)
        self.blocks = nn.ModuleList(ResidualBlock(width, emb_dim) for _ in range(n_blocks))
        self.out_norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def shapes(self) -> dict:
        return dict(dim=self.dim, width=self.width, n_blocks=self.n_blocks, emb_dim=self.emb_dim,
                    timesteps=self.timesteps, cond_scale=self.cond_scale)

    def forward(self, z, n, cond, uncond_mask=None):
        """``uncond_mask`` (bool, per row) selects the null embedding for that row."""
        t_emb = self.time_mlp(sinusoidal_embedding(n.float() * (1000.0 / self.timesteps),
                                                   self.emb_dim))
        c_emb = self.cond_mlp(sinusoidal_embedding(cond.float() * self.cond_scale, self.emb_dim))
        if uncond_mask is not None:
            c_emb = torch.where(uncond_mask.reshape(-1, 1), self.null_embedding.expand_as(c_emb),
                                c_emb)
        emb = t_emb + c_emb
        h = self.inp(z)
        for block in self.blocks:
            h = block(h, emb)
        return self.out(torch.nn.functional.silu(self.out_norm(h)))
