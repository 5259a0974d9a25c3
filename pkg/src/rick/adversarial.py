"""GAN objective and single-network update steps."""

from __future__ import annotations

import contextlib
from typing import Callable

import numpy as np

from . import tensor as T
from .models import GANPair, Network, generate
from .tensor import Tensor

PROB_CLAMP = 1e-7


def d_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """-mean(log D(x)) - mean(log(1 - D(G(z)))), probabilities clamped."""
    lo, hi = PROB_CLAMP, 1.0 - PROB_CLAMP
    real_term = T.tmean(T.log(T.clamp(d_real, lo, hi)))
    fake_term = T.tmean(T.log(T.clamp(1.0 - d_fake, lo, hi)))
    return -(real_term + fake_term)


def g_loss(d_fake: Tensor, saturating: bool = False) -> Tensor:
    """Non-saturating ``-mean(log D(G(z)))`` by default.

    ``saturating=True`` gives the literal minimax form ``mean(log(1 - D(G(z))))``.
    """
    lo, hi = PROB_CLAMP, 1.0 - PROB_CLAMP
    if saturating:
        return T.tmean(T.log(T.clamp(1.0 - d_fake, lo, hi)))
    return -T.tmean(T.log(T.clamp(d_fake, lo, hi)))


@contextlib.contextmanager
def frozen(net: Network):
    """Keep ``net`` out of the graph for the duration of the block."""
    flags = [p.requires_grad for p in net.params()]
    net.set_requires_grad(False)
    try:
        yield
    finally:
        for p, f in zip(net.params(), flags):
            p.requires_grad = f


def sample_real(data: np.ndarray, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a real batch; with replacement only when ``batch`` exceeds the pool."""
    n = data.shape[0]
    if n == 0:
        raise ValueError("empty real data")
    if batch > n:
        idx = rng.integers(0, n, size=batch)
    else:
        idx = rng.choice(n, size=batch, replace=False)
    return data[idx]


Hook = Callable[[Network], None]


def d_backward(gan: GANPair, real: np.ndarray, z: np.ndarray) -> float:
    fake = generate(gan.g, z)
    gan.d.zero_grad()
    loss = d_loss(gan.d(Tensor(real)), gan.d(Tensor(fake)))
    loss.backward()
    return loss.item()


def g_backward(gan: GANPair, z: np.ndarray, saturating: bool = False) -> float:
    gan.g.zero_grad()
    with frozen(gan.d):
        loss = g_loss(gan.d(gan.g(Tensor(z))), saturating)
        loss.backward()
    return loss.item()


def train_step_d(gan: GANPair, real: np.ndarray, z: np.ndarray, optimizer, iteration: int, total_iters: int,
                 masks=None, extra_grads=None, hook: Hook | None = None) -> float:
    """One discriminator update; G is only run forward."""
    loss = d_backward(gan, real, z)
    if hook is not None:
        hook(gan.d)
    optimizer.step(iteration, total_iters, masks, extra_grads)
    return loss


def train_step_g(gan: GANPair, z: np.ndarray, optimizer, iteration: int, total_iters: int,
                 masks=None, extra_grads=None, hook: Hook | None = None, saturating: bool = False) -> float:
    """One generator update through a frozen D."""
    loss = g_backward(gan, z, saturating)
    if hook is not None:
        hook(gan.g)
    optimizer.step(iteration, total_iters, masks, extra_grads)
    return loss


def warmup_d(gan: GANPair, target_data: np.ndarray, n_warmup: int, optimizer, rng: np.random.Generator,
             total_iters: int, batch_size: int = 4, masks=None, extra_grads_fn=None) -> list[float]:
    """Run exactly ``n_warmup`` D-only steps at iterations 1..n_warmup."""
    if n_warmup < 0:
        raise ValueError("n_warmup must be >= 0")
    losses = []
    for it in range(1, n_warmup + 1):
        real = sample_real(target_data, batch_size, rng)
        z = rng.standard_normal((batch_size, gan.g.dz))
        extra = extra_grads_fn(gan.d) if extra_grads_fn is not None else None
        losses.append(train_step_d(gan, real, z, optimizer, it - 1, total_iters, masks, extra))
    return losses
