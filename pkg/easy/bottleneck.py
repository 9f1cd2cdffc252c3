"""Residual vector quantization with EMA codebooks."""

import logging
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import nn

from .errors import BottleneckError

logger = logging.getLogger(__name__)

_EPS = 1e-12


class VectorQuantizer(nn.Module):

    def __init__(self, codebook_size: int, dim: int):
        super().__init__()
        self.codebook_size = codebook_size
        self.dim = dim
        self.register_buffer("codebook", torch.zeros(codebook_size, dim))
        self.register_buffer("ema_count", torch.ones(codebook_size))
        self.register_buffer("ema_sum", torch.zeros(codebook_size, dim))
        self.register_buffer("unused_steps", torch.zeros(codebook_size, dtype=torch.long))
        self.register_buffer("initialized", torch.tensor(False))

    def set_codebook(self, centroids: torch.Tensor):
        if centroids.shape != self.codebook.shape:
            raise BottleneckError(
                f"codebook shape {tuple(centroids.shape)} != {tuple(self.codebook.shape)}"
            )
        self.codebook.copy_(centroids)
        self.ema_sum.copy_(centroids)
        self.ema_count.fill_(1.0)
        self.unused_steps.zero_()
        self.initialized.fill_(True)

    def nearest(self, x: torch.Tensor, chunk: int = 256) -> torch.Tensor:
        """Code of the nearest centroid for each row of ``x``; ties go to the lowest index."""
        codebook = self.codebook.to(x.dtype)
        codes = torch.empty(x.shape[0], dtype=torch.long, device=x.device)
        for start in range(0, x.shape[0], chunk):
            block = x[start:start + chunk]
            dist = ((block[:, None, :] - codebook[None]) ** 2).sum(-1)
            codes[start:start + chunk] = dist.argmin(dim=1)
        return codes

    def lookup(self, codes: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
        return self.codebook.to(dtype)[codes]


@dataclass
class QuantizerState:
    codes: torch.Tensor  # (N, ..., T)
    quantized: list[torch.Tensor]  # q_1..q_N, each (..., T, d)
    residuals: list[torch.Tensor]  # x_1..x_N, x_1 = r1

    @property
    def num_layers(self) -> int:
        return len(self.quantized)


class ResidualVQ(nn.Module):

    def __init__(self, num_quantizers: int, codebook_size: int, dim: int, seed: int = 0):
        super().__init__()
        if num_quantizers < 1:
            raise BottleneckError("residual VQ needs at least one quantizer")
        self.dim = dim
        self.layers = nn.ModuleList(
            VectorQuantizer(codebook_size, dim) for _ in range(num_quantizers)
        )
        self.generator = torch.Generator().manual_seed(seed)

    @property
    def num_quantizers(self) -> int:
        return len(self.layers)

    @property
    def codebook_size(self) -> int:
        return self.layers[0].codebook_size

    @property
    def initialized(self) -> bool:
        return all(bool(layer.initialized) for layer in self.layers)

    def get_extra_state(self):
        return {"rng": self.generator.get_state()}

    def set_extra_state(self, state):
        self.generator.set_state(state["rng"])

    def _sample_rows(self, x: torch.Tensor, n: int) -> torch.Tensor:
        if x.shape[0] >= n:
            idx = torch.randperm(x.shape[0], generator=self.generator)[:n]
        else:
            idx = torch.randint(x.shape[0], (n,), generator=self.generator)
        return x[idx]

    @torch.no_grad()
    def initialize(self, r1: torch.Tensor):
        """Seed every codebook from frames of its own residual, layer by layer."""
        x = r1.detach().reshape(-1, self.dim).to(self.layers[0].codebook.dtype)
        for i, layer in enumerate(self.layers):
            layer.set_codebook(self._sample_rows(x, layer.codebook_size))
            x = x - layer.lookup(layer.nearest(x), x.dtype)
        logger.info(
            f"Initialized {self.num_quantizers} codebooks of {self.codebook_size} codes from "
            f"{r1.reshape(-1, self.dim).shape[0]} frames"
        )

    def forward(self, r1: torch.Tensor) -> QuantizerState:
        return rvq_quantize(r1, self)


def rvq_quantize(r1: torch.Tensor, books: ResidualVQ) -> QuantizerState:
    if r1.shape[-1] != books.dim:
        raise BottleneckError(f"input width {r1.shape[-1]} != codebook width {books.dim}")
    if not books.initialized:
        raise BottleneckError("codebooks are not initialized; the model is untrained")
    lead = r1.shape[:-1]
    x = r1
    codes, quantized, residuals = [], [], []
    for layer in books.layers:
        flat = x.detach().reshape(-1, books.dim)
        code = layer.nearest(flat)
        q = layer.lookup(code, x.dtype).reshape(x.shape)
        residuals.append(x)
        quantized.append(q)
        codes.append(code.reshape(lead))
        x = x - q
    return QuantizerState(torch.stack(codes), quantized, residuals)


_RANGE = re.compile(r"^\s*(\d+)\s*(?::\s*(\d+))?\s*$")


def parse_layer_spec(spec: str | Iterable[int], num_layers: int) -> list[int]:
    """'1' -> [1], '2:8' -> [2..8], '1,3' -> [1, 3]; layers are 1-based."""
    if isinstance(spec, str):
        layers: set[int] = set()
        for part in spec.split(","):
            m = _RANGE.match(part)
            if not m:
                raise BottleneckError(f"invalid layer spec {spec!r}")
            lo = int(m.group(1))
            hi = int(m.group(2)) if m.group(2) else lo
            if hi < lo:
                raise BottleneckError(f"empty layer range in {spec!r}")
            layers.update(range(lo, hi + 1))
    else:
        layers = {int(i) for i in spec}
    if not layers:
        raise BottleneckError("layer subset must be non-empty")
    bad = [i for i in layers if not 1 <= i <= num_layers]
    if bad:
        raise BottleneckError(f"layer index {bad[0]} outside 1..{num_layers}")
    return sorted(layers)


def reconstruct_layers(st: QuantizerState, layers: str | Iterable[int]) -> torch.Tensor:
    selected = parse_layer_spec(layers, st.num_layers)
    out = st.quantized[selected[0] - 1]
    for i in selected[1:]:
        out = out + st.quantized[i - 1]
    return out


def commitment_loss(st: QuantizerState) -> torch.Tensor:
    """Sum over layers of the frame-averaged squared distance ||x_i - sg(q_i)||^2."""
    total = st.residuals[0].new_zeros(())
    for x, q in zip(st.residuals, st.quantized):
        total = total + ((x - q.detach()) ** 2).sum(-1).mean()
    return total


class _StraightThrough(torch.autograd.Function):

    @staticmethod
    def forward(ctx, source, value):
        return value.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(st: QuantizerState, layers: str | Sequence[int] | None = None) -> torch.Tensor:
    """Forward value is the sum of the selected q_i; the gradient goes unchanged to
    the residual entering the lowest selected layer (r1 when layer 1 is selected)."""
    selected = parse_layer_spec(layers, st.num_layers) if layers else list(range(1, st.num_layers + 1))
    value = reconstruct_layers(st, selected).detach()
    return _StraightThrough.apply(st.residuals[selected[0] - 1], value)


@torch.no_grad()
def update_codebooks(
    books: ResidualVQ,
    st: QuantizerState,
    decay: float,
    dead_code_threshold: float = 1e-2,
    reseed_after: int = 50,
) -> int:
    """EMA codebook update; returns the number of reseeded codes."""
    reseeded = 0
    for i, layer in enumerate(books.layers):
        dtype = layer.codebook.dtype
        x = st.residuals[i].detach().reshape(-1, books.dim).to(dtype)
        codes = st.codes[i].reshape(-1)
        counts = torch.bincount(codes, minlength=layer.codebook_size).to(dtype)
        sums = torch.zeros_like(layer.ema_sum).index_add_(0, codes, x)

        layer.ema_count.mul_(decay).add_(counts, alpha=1.0 - decay)
        layer.ema_sum.mul_(decay).add_(sums, alpha=1.0 - decay)
        live = layer.ema_count > _EPS
        layer.codebook[live] = layer.ema_sum[live] / layer.ema_count[live].unsqueeze(1)

        layer.unused_steps.add_(1)
        layer.unused_steps[counts > 0] = 0
        dead = (layer.unused_steps >= reseed_after) | (layer.ema_count < dead_code_threshold)
        n_dead = int(dead.sum())
        if n_dead:
            rows = books._sample_rows(x, n_dead)
            layer.codebook[dead] = rows
            layer.ema_sum[dead] = rows
            layer.ema_count[dead] = 1.0
            layer.unused_steps[dead] = 0
            reseeded += n_dead
            logger.debug(f"Reseeded {n_dead} dead codes in layer {i + 1}")
    return reseeded


def quantization_error(r1: torch.Tensor, st: QuantizerState) -> torch.Tensor:
    return ((r1 - reconstruct_layers(st, range(1, st.num_layers + 1))) ** 2).sum(-1).mean()
