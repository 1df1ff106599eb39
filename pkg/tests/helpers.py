"""Shared fixtures-by-hand for the test modules."""

import numpy as np

from vfe_stream.model import ModelParams, StateSpace, build_hmm

BIG = 30.0  # +-30 logits realize near-deterministic rows within 1e-12


def near_identity_params(K: int) -> ModelParams:
    """Square logits whose softmax rows are near point masses on the
    diagonal (exact identity is outside the softmax image)."""
    at = np.full((K, K), -BIG)
    bt = np.full((K, K), -BIG)
    for i in range(K):
        at[i, i] = 0.0 if i == 0 else BIG
        bt[i, i] = 0.0 if i == 0 else BIG
        at[i, 0] = 0.0
        bt[i, 0] = 0.0
    return ModelParams(alpha_tilde=at, beta_tilde=bt)


def random_hmm(K: int, M: int, seed: int, scale: float = 2.0):
    rng = np.random.default_rng(seed)
    mu = rng.dirichlet(np.ones(K))
    return build_hmm(mu, ModelParams.random(StateSpace(K, M), seed=seed, scale=scale))


def random_obs(M: int, tau: int, seed: int) -> list:
    rng = np.random.default_rng(1000 + seed)
    return [int(rng.integers(1, M + 1)) for _ in range(tau)]
