"""Multi-appliance encoder/decoder with temporal and appliance-wise attention.

Tensor layout inside the decoder is ``(batch, appliance, time, feature)``.
Per-branch parameters carry a leading appliance axis and are applied with
one batched matmul over groups, so all branches run in one pass.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Optional, Sequence, Tuple

import torch
from torch import nn
from torch.nn import functional as F


@dataclass(frozen=True)
class ModelConfig:
    n_appliances: int
    input_len: int
    output_len: int
    encoder_variant: str = "conv"
    n_blocks: int = 3
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    head_hidden: int = 64
    conv_channels: Tuple[int, ...] = (30, 30, 40, 50, 50)
    conv_kernels: Tuple[int, ...] = (10, 8, 6, 5, 5)
    rnn_hidden: int = 32
    rnn_layers: int = 5
    multi_task: bool = True
    temporal_attention: bool = True
    appliance_attention: bool = True
    tie_temporal: bool = False

    def __post_init__(self):
        if self.encoder_variant not in ("conv", "recurrent"):
            raise ValueError(f"unknown encoder variant {self.encoder_variant!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_blocks < 1 or self.n_appliances < 1:
            raise ValueError("need n_blocks >= 1 and n_appliances >= 1")
        if not 0 < self.output_len <= self.input_len or (self.input_len - self.output_len) % 2:
            raise ValueError("input_len - output_len must be a non-negative even number")
        if len(self.conv_channels) != len(self.conv_kernels):
            raise ValueError("conv_channels and conv_kernels differ in length")
        if self.appliance_attention and not self.multi_task:
            raise ValueError("appliance attention requires the multi-task setup")
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "conv_kernels", tuple(self.conv_kernels))

    @property
    def margin(self) -> int:
        return (self.input_len - self.output_len) // 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["conv_kernels"] = list(self.conv_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("conv_channels", "conv_kernels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def configure_ablation(config: ModelConfig, mt: bool = True, ta: bool = True, aa: bool = True) -> ModelConfig:
    """Switch the multi-task (MT), temporal (TA) and appliance (AA) attention parts."""
    if aa and not mt:
        raise ValueError("AA requires MT")
    return replace(config, multi_task=mt, temporal_attention=ta, appliance_attention=aa)


class ModelOutput(NamedTuple):
    power: torch.Tensor   # p_hat, (B, n, out)
    on_prob: torch.Tensor  # o_hat, (B, n, out)
    y_hat: torch.Tensor    # power * on_prob


# ---------------------------------------------------------------- attention


def group_matmul(x, w):
    """``x @ w`` where ``w`` is ``(d, e)`` or a per-group stack ``(n, d, e)``.

    With a stack, ``x`` is ``(B, n, L, d)``; the product runs as one batched
    matmul over groups instead of a broadcast over ``B``.
    """
    if w.dim() == 2:
        return x @ w
    B, n, L, d = x.shape
    out = x.transpose(0, 1).reshape(n, B * L, d) @ w
    return out.reshape(n, B, L, w.shape[-1]).transpose(0, 1)


SMALL_KEYS = 8


def scaled_dot_attention(q, k, v):
    """Returns ``(output, weights)``; softmax runs over the key axis."""
    d_k = q.shape[-1]
    if k.shape[-2] <= SMALL_KEYS:
        # few tokens: elementwise products beat thousands of tiny matmuls
        scores = (q.unsqueeze(-2) * k.unsqueeze(-3)).sum(-1) / math.sqrt(d_k)
        weights = torch.softmax(scores, dim=-1)
        return (weights.unsqueeze(-1) * v.unsqueeze(-3)).sum(-2), weights
    scores = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


def multi_head_attention(q, k, v, w_q, w_k, w_v, w_o, n_heads: int, return_weights: bool = False):
    """Multi-head attention over the second-to-last axis.

    ``q, k, v``: ``(..., L, d)``. Projections are ``(d, d)``, or a stack of
    per-branch weights ``(n, d, d)`` for inputs shaped ``(B, n, L, d)``.
    Head ``i`` uses columns ``i*d_k:(i+1)*d_k`` of each projection.
    """
    d = q.shape[-1]
    d_k = d // n_heads

    def split(t):
        return t.reshape(*t.shape[:-1], n_heads, d_k).transpose(-3, -2)

    qh, kh, vh = split(group_matmul(q, w_q)), split(group_matmul(k, w_k)), split(group_matmul(v, w_v))
    out, weights = scaled_dot_attention(qh, kh, vh)
    out = group_matmul(out.transpose(-3, -2).reshape(*q.shape[:-1], d), w_o)
    if return_weights:
        return out, weights
    return out


def _linear_init(*shape, fan_in: int):
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(torch.empty(*shape).uniform_(-bound, bound))


class GroupLayerNorm(nn.Module):
    """LayerNorm over the last axis with ``groups`` independent affine sets."""

    def __init__(self, d: int, groups: Optional[int] = None, eps: float = 1e-5):
        super().__init__()
        shape = (groups, 1, d) if groups else (d,)
        self.weight = nn.Parameter(torch.ones(shape))
        self.bias = nn.Parameter(torch.zeros(shape))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, x.shape[-1:], eps=self.eps) * self.weight + self.bias


class AttentionSublayer(nn.Module):
    """``LayerNorm(h + MH(h, h, h))``; per-group weights when ``groups`` is set."""

    def __init__(self, d_model: int, n_heads: int, groups: Optional[int] = None):
        super().__init__()
        shape = (groups, d_model, d_model) if groups else (d_model, d_model)
        self.n_heads = n_heads
        self.w_q = _linear_init(*shape, fan_in=d_model)
        self.w_k = _linear_init(*shape, fan_in=d_model)
        self.w_v = _linear_init(*shape, fan_in=d_model)
        self.w_o = _linear_init(*shape, fan_in=d_model)
        self.norm = GroupLayerNorm(d_model, groups)

    def attend(self, h, return_weights=False):
        return multi_head_attention(h, h, h, self.w_q, self.w_k, self.w_v, self.w_o, self.n_heads, return_weights)

    def forward(self, h):
        return self.norm(h + self.attend(h))


class BranchFFN(nn.Module):
    """``LayerNorm(h + max(0, h W1 + b1) W2 + b2)`` with per-branch weights."""

    def __init__(self, n: int, d_model: int, d_ff: int):
        super().__init__()
        self.w1 = _linear_init(n, d_model, d_ff, fan_in=d_model)
        self.b1 = nn.Parameter(torch.zeros(n, 1, d_ff))
        self.w2 = _linear_init(n, d_ff, d_model, fan_in=d_ff)
        self.b2 = nn.Parameter(torch.zeros(n, 1, d_model))
        self.norm = GroupLayerNorm(d_model, n)

    def forward(self, h):
        return self.norm(h + group_matmul(torch.relu(group_matmul(h, self.w1) + self.b1), self.w2) + self.b2)


class DecoderBlock(nn.Module):
    """Temporal attention, appliance attention, then feed-forward.

    The last block replaces the single feed-forward sublayer with separate
    classification and regression sublayers and returns both.
    """

    def __init__(self, cfg: ModelConfig, n: int, last: bool):
        super().__init__()
        self.last = last
        self.temporal = (
            AttentionSublayer(cfg.d_model, cfg.n_heads, None if cfg.tie_temporal else n)
            if cfg.temporal_attention else None
        )
        self.appliance = (
            AttentionSublayer(cfg.d_model, cfg.n_heads) if cfg.appliance_attention else None
        )
        if last:
            self.ffn_c = BranchFFN(n, cfg.d_model, cfg.d_ff)
            self.ffn_r = BranchFFN(n, cfg.d_model, cfg.d_ff)
        else:
            self.ffn = BranchFFN(n, cfg.d_model, cfg.d_ff)

    def two_dim_attention(self, h):
        if self.temporal is not None:
            h = self.temporal(h)  # attends over time within each branch
        if self.appliance is not None:
            # tokens are the branches at each time step
            h = self.appliance(h.transpose(1, 2)).transpose(1, 2)
        return h

    def forward(self, h):
        phi = self.two_dim_attention(h)
        if self.last:
            return self.ffn_c(phi), self.ffn_r(phi)
        return self.ffn(phi)


# ---------------------------------------------------------------- encoders


class ConvEncoder(nn.Module):
    """Stacked 1-D convolutions, then a time-mixing layer onto the output span.

    The time-mixing layer maps all ``T`` input positions to each of the
    ``T - 2w`` output positions, so the whole context margin is visible.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers = []
        c_in = 1
        for c, k in zip(cfg.conv_channels, cfg.conv_kernels):
            conv = nn.Conv1d(c_in, c, k, padding="same")
            bound = 1.0 / math.sqrt(c_in * k)
            nn.init.uniform_(conv.weight, -bound, bound)
            nn.init.zeros_(conv.bias)
            layers += [conv, nn.ReLU()]
            c_in = c
        self.convs = nn.Sequential(*layers)
        self.time_mix = _linear_init(cfg.input_len, cfg.output_len, fan_in=cfg.input_len)
        self.time_bias = nn.Parameter(torch.zeros(cfg.output_len))
        self.proj = _linear_init(c_in, cfg.d_model, fan_in=c_in)
        self.proj_bias = nn.Parameter(torch.zeros(cfg.d_model))
        self.input_len = cfg.input_len

    def forward(self, x):
        if x.shape[-1] != self.input_len:
            raise ValueError(f"expected input length {self.input_len}, got {x.shape[-1]}")
        z = self.convs(x.unsqueeze(1))                   # B, C, T
        z = torch.relu(z @ self.time_mix + self.time_bias)  # B, C, out
        return torch.relu(z.transpose(1, 2) @ self.proj + self.proj_bias)  # B, out, d


class RecurrentEncoder(nn.Module):
    """Bidirectional LSTM stack, two affine layers, then margin crop."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.rnn = nn.LSTM(1, cfg.rnn_hidden, num_layers=cfg.rnn_layers, bidirectional=True, batch_first=True)
        for name, p in self.rnn.named_parameters():
            if "weight_hh" in name:
                for i in range(4):
                    nn.init.orthogonal_(p.data[i * cfg.rnn_hidden : (i + 1) * cfg.rnn_hidden])
            elif "weight_ih" in name:
                bound = 1.0 / math.sqrt(p.shape[1])
                nn.init.uniform_(p, -bound, bound)
            else:
                nn.init.zeros_(p)
        self.fc1 = _linear_init(2 * cfg.rnn_hidden, cfg.rnn_hidden, fan_in=2 * cfg.rnn_hidden)
        self.b1 = nn.Parameter(torch.zeros(cfg.rnn_hidden))
        self.fc2 = _linear_init(cfg.rnn_hidden, cfg.d_model, fan_in=cfg.rnn_hidden)
        self.b2 = nn.Parameter(torch.zeros(cfg.d_model))
        self.input_len = cfg.input_len
        self.margin = cfg.margin

    def forward(self, x):
        if x.shape[-1] != self.input_len:
            raise ValueError(f"expected input length {self.input_len}, got {x.shape[-1]}")
        z, _ = self.rnn(x.unsqueeze(-1))
        z = torch.relu(z @ self.fc1 + self.b1) @ self.fc2 + self.b2
        return z[:, self.margin : self.input_len - self.margin]


def make_encoder(cfg: ModelConfig) -> nn.Module:
    return ConvEncoder(cfg) if cfg.encoder_variant == "conv" else RecurrentEncoder(cfg)


# ---------------------------------------------------------------- network


class OutputHeads(nn.Module):
    """Per-branch regression and classification heads.

    power   = ReLU(ReLU(h_r W_r + a_r) V_r + c_r)
    on_prob = Sigmoid(ReLU(h_c W_c + a_c) V_c + c_c)
    """

    def __init__(self, n: int, d_model: int, hidden: int):
        super().__init__()
        self.w_r = _linear_init(n, d_model, hidden, fan_in=d_model)
        self.a_r = nn.Parameter(torch.zeros(n, 1, hidden))
        self.v_r = _linear_init(n, hidden, 1, fan_in=hidden)
        self.c_r = nn.Parameter(torch.zeros(n, 1, 1))
        self.w_c = _linear_init(n, d_model, hidden, fan_in=d_model)
        self.a_c = nn.Parameter(torch.zeros(n, 1, hidden))
        self.v_c = _linear_init(n, hidden, 1, fan_in=hidden)
        self.c_c = nn.Parameter(torch.zeros(n, 1, 1))

    def forward(self, h_c, h_r):
        power = torch.relu(group_matmul(torch.relu(group_matmul(h_r, self.w_r) + self.a_r), self.v_r) + self.c_r)
        logit = group_matmul(torch.relu(group_matmul(h_c, self.w_c) + self.a_c), self.v_c) + self.c_c
        return power.squeeze(-1), torch.sigmoid(logit).squeeze(-1)


class MATNilm(nn.Module):
    """Shared encoder, ``n_blocks`` decoder blocks with ``n_appliances`` branches."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        n = cfg.n_appliances
        self.encoder = make_encoder(cfg)
        self.blocks = nn.ModuleList(
            DecoderBlock(cfg, n, last=(i == cfg.n_blocks - 1)) for i in range(cfg.n_blocks)
        )
        self.heads = OutputHeads(n, cfg.d_model, cfg.head_hidden)

    def encode(self, x):
        return self.encoder(x)

    def decode(self, shared):
        # every branch starts from the same shared representation
        h = shared.unsqueeze(1).expand(-1, self.config.n_appliances, -1, -1)
        for block in self.blocks[:-1]:
            h = block(h)
        h_c, h_r = self.blocks[-1](h)
        return h_c, h_r

    def forward(self, x) -> ModelOutput:
        h_c, h_r = self.decode(self.encode(x))
        power, on_prob = self.heads(h_c, h_r)
        return ModelOutput(power, on_prob, power * on_prob)


class IndependentModels(nn.Module):
    """One single-branch network per appliance (multi-task switched off)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        single = replace(cfg, n_appliances=1, multi_task=True, appliance_attention=False)
        self.members = nn.ModuleList(MATNilm(single) for _ in range(cfg.n_appliances))

    def forward(self, x) -> ModelOutput:
        outs = [m(x) for m in self.members]
        return ModelOutput(*(torch.cat(parts, dim=1) for parts in zip(*outs)))


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> nn.Module:
    if seed is not None:
        torch.manual_seed(seed)
    return MATNilm(cfg) if cfg.multi_task else IndependentModels(cfg)
