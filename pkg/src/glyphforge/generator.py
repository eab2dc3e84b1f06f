"""Symbol index + noise -> stroke actions.

An embedding row for the symbol is concatenated with a noise vector and sent
through a two-layer MLP; a sigmoid squashes the output into the normalized
action space of the rasterizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .raster import N_FIELDS

EMBED_DIM = 16
NOISE_DIM = 16
HIDDEN_DIM = 32


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorParams:
    embedding: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @property
    def n_symbols(self) -> int:
        return self.embedding.shape[0]

    @property
    def n_strokes(self) -> int:
        return self.mlp_w2.shape[1] // N_FIELDS

    def named(self) -> dict[str, Tensor]:
        return {
            "gen.embedding": self.embedding,
            "gen.mlp_w1": self.mlp_w1,
            "gen.mlp_b1": self.mlp_b1,
            "gen.mlp_w2": self.mlp_w2,
            "gen.mlp_b2": self.mlp_b2,
        }


@dataclass(frozen=True)
class SampleConfig:
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")


def kaiming_uniform(rng, fan_in: int, shape, dtype=None) -> np.ndarray:
    # std of U(-b, b) is b/sqrt(3) = sqrt(2/fan_in)
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype or ad.get_default_dtype())


def init_generator(n_symbols: int, n_strokes: int = 3, seed=0) -> GeneratorParams:
    if n_symbols < 2:
        raise ConfigError(f"need at least 2 symbols, got {n_symbols}")
    if n_strokes < 1:
        raise ConfigError(f"need at least 1 stroke, got {n_strokes}")
    rng = np.random.default_rng(seed)
    dt = ad.get_default_dtype()
    d_in, d_out = EMBED_DIM + NOISE_DIM, n_strokes * N_FIELDS
    return GeneratorParams(
        embedding=Tensor(rng.standard_normal((n_symbols, EMBED_DIM)).astype(dt), requires_grad=True),
        mlp_w1=Tensor(kaiming_uniform(rng, d_in, (d_in, HIDDEN_DIM)), requires_grad=True),
        mlp_b1=Tensor(np.zeros(HIDDEN_DIM, dtype=dt), requires_grad=True),
        mlp_w2=Tensor(kaiming_uniform(rng, HIDDEN_DIM, (HIDDEN_DIM, d_out)), requires_grad=True),
        mlp_b2=Tensor(np.zeros(d_out, dtype=dt), requires_grad=True),
    )


def sample_noise(batch: int, temperature: float, rng: np.random.Generator) -> Tensor:
    """``batch x NOISE_DIM`` draws from Normal(0, temperature^2).

    The standard-normal draw is made even at temperature 0, so one rng state
    yields noise that scales exactly linearly with temperature.
    """
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    z = rng.standard_normal((batch, NOISE_DIM))
    return Tensor(z * temperature)


def generate_actions(indices, noise: Tensor, params: GeneratorParams) -> Tensor:
    """Actions ``[batch, strokes, 8]`` with every field in (0, 1)."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if noise.ndim != 2 or noise.shape != (idx.shape[0], NOISE_DIM):
        raise ad.DimensionError(f"noise must be [{idx.shape[0]}, {NOISE_DIM}], got {noise.shape}")
    z = ad.concat([ad.embedding(params.embedding, idx), noise], axis=1)
    h = ad.relu(ad.affine_bias(ad.matmul(z, params.mlp_w1), params.mlp_b1))
    raw = ad.affine_bias(ad.matmul(h, params.mlp_w2), params.mlp_b2)
    return ad.reshape(ad.sigmoid(raw), (idx.shape[0], params.n_strokes, N_FIELDS))
