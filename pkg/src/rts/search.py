"""Coarse-to-fine alternating search over latents on the reward landscape.

Rounds are 1-indexed. Odd rounds are coarse: move the base by the greedy
relocation rule (adopt the previous round's best candidate only when it
strictly beats the previous base reward, otherwise resample), then draw
random spherical neighbors and estimate a surrogate gradient from their
rewards. Even rounds are fine: keep the base and re-form the neighborhood by
blending the stored perturbations with the gradient direction. The gradient
used by a fine round always comes from the immediately preceding coarse
round and is never carried across cycle boundaries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .core import (
    DegenerateGradientError,
    Latent,
    PreconditionError,
    RewardScore,
    RngStream,
    as_latent,
    sample_gaussian,
)
from .sphere import guided_spherical_sample, random_spherical_sample
from .surrogate import SurrogateGradient, estimate_gradient

logger = logging.getLogger(__name__)

# An evaluator maps a latent to its reward. Calls may consume NFEs through a
# denoiser; results must be deterministic functions of the latent so that
# candidate scoring is order-independent.
Evaluator = Callable[[Latent], RewardScore]

_STREAM_RESAMPLE = 0
_STREAM_NEIGHBORS = 1


@dataclass(frozen=True)
class SearchConfig:
    """Knobs of the alternating search.

    ``rounds = 0`` is allowed so that pipelines can disable a phase outright;
    ``run_search`` itself requires at least one round. With
    ``track_global_best`` the search returns the best latent seen anywhere,
    otherwise it returns the argmax over the final round's candidates only.
    """

    n_neighbors: int = 3
    rounds: int = 4
    tau: float = 0.9
    alpha: float = 0.7
    track_global_best: bool = True

    def __post_init__(self) -> None:
        if self.n_neighbors < 1:
            raise PreconditionError(f"n_neighbors must be >= 1, got {self.n_neighbors}")
        if self.rounds < 0:
            raise PreconditionError(f"rounds must be >= 0, got {self.rounds}")
        if not (0.0 <= self.tau <= 1.0):
            raise PreconditionError(f"tau must lie in [0, 1], got {self.tau}")
        if not (0.0 <= self.alpha <= 1.0):
            raise PreconditionError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class RoundSummary:
    round: int
    kind: str
    base_reward: float
    best_candidate_reward: float
    best_so_far: float
    guided_fallback: bool = False


@dataclass(frozen=True)
class SearchState:
    """Bookkeeping between rounds: base, gradient, last candidates, best yet.

    ``round`` is the 1-indexed number of the next round to execute.
    ``seed_base`` preempts the fresh Gaussian in round 1; ``resample_base``
    replaces the fresh Gaussian in every later no-relocation branch. Both
    default to None, meaning standard normal resampling.
    """

    dim: int
    round: int = 1
    base: Latent | None = None
    base_reward: float = float("-inf")
    last_gradient: SurrogateGradient | None = None
    last_perturbations: np.ndarray | None = None
    last_candidates: np.ndarray | None = None
    last_rewards: np.ndarray | None = None
    global_best: Latent | None = None
    global_best_reward: float = float("-inf")
    seed_base: Latent | None = None
    resample_base: Latent | None = None
    history: tuple[RoundSummary, ...] = field(default_factory=tuple)


def _score_candidates(candidates: np.ndarray, evaluate: Evaluator) -> np.ndarray:
    return np.array([float(evaluate(candidates[i])) for i in range(candidates.shape[0])])


def _fold_best(state_best: Latent | None, state_reward: float, latents, rewards) -> tuple[Latent | None, float]:
    """Running maximum under strict improvement, so earlier ties win."""
    best, best_reward = state_best, state_reward
    for latent, reward in zip(latents, rewards):
        if reward > best_reward:
            best, best_reward = latent, float(reward)
    return best, best_reward


def coarse_round(state: SearchState, cfg: SearchConfig, evaluate: Evaluator, stream: RngStream) -> SearchState:
    """Relocate or resample the base, then explore random spherical neighbors."""
    if state.round % 2 != 1:
        raise PreconditionError(f"coarse rounds run at odd round numbers, got {state.round}")
    if state.last_rewards is not None and float(np.max(state.last_rewards)) > state.base_reward:
        best_idx = int(np.argmax(state.last_rewards))
        base = state.last_candidates[best_idx]
    elif state.round == 1 and state.seed_base is not None:
        base = state.seed_base
    elif state.round > 1 and state.resample_base is not None:
        base = state.resample_base
    else:
        base = sample_gaussian(stream.child(_STREAM_RESAMPLE), state.dim)

    base_reward = float(evaluate(base))
    neighbors = random_spherical_sample(base, cfg.n_neighbors, cfg.tau, stream.child(_STREAM_NEIGHBORS))
    rewards = _score_candidates(neighbors.candidates, evaluate)
    gradient = estimate_gradient(base_reward, neighbors.with_rewards(rewards))

    best, best_reward = _fold_best(state.global_best, state.global_best_reward, [base], [base_reward])
    best, best_reward = _fold_best(best, best_reward, neighbors.candidates, rewards)
    summary = RoundSummary(
        round=state.round,
        kind="coarse",
        base_reward=base_reward,
        best_candidate_reward=float(np.max(rewards)),
        best_so_far=best_reward,
    )
    return replace(
        state,
        round=state.round + 1,
        base=base,
        base_reward=base_reward,
        last_gradient=gradient,
        last_perturbations=neighbors.perturbations,
        last_candidates=neighbors.candidates,
        last_rewards=rewards,
        global_best=best,
        global_best_reward=best_reward,
        history=state.history + (summary,),
    )


def fine_round(state: SearchState, cfg: SearchConfig, evaluate: Evaluator, stream: RngStream) -> SearchState:
    """Exploit the stored gradient around the unchanged base."""
    if state.round % 2 != 0:
        raise PreconditionError(f"fine rounds run at even round numbers, got {state.round}")
    if state.last_gradient is None or state.last_perturbations is None:
        raise PreconditionError("fine round requires the preceding coarse round's gradient")

    fallback = False
    try:
        neighbors = guided_spherical_sample(
            state.base,
            cfg.n_neighbors,
            cfg.tau,
            cfg.alpha,
            state.last_gradient.g,
            state.last_perturbations,
            stream.child(_STREAM_NEIGHBORS),
        )
    except DegenerateGradientError:
        logger.info("round %d: degenerate gradient, falling back to random sampling", state.round)
        fallback = True
        neighbors = random_spherical_sample(state.base, cfg.n_neighbors, cfg.tau, stream.child(_STREAM_NEIGHBORS))
    rewards = _score_candidates(neighbors.candidates, evaluate)

    best, best_reward = _fold_best(state.global_best, state.global_best_reward, neighbors.candidates, rewards)
    summary = RoundSummary(
        round=state.round,
        kind="fine",
        base_reward=state.base_reward,
        best_candidate_reward=float(np.max(rewards)),
        best_so_far=best_reward,
        guided_fallback=fallback,
    )
    return replace(
        state,
        round=state.round + 1,
        last_gradient=None,
        last_perturbations=neighbors.perturbations,
        last_candidates=neighbors.candidates,
        last_rewards=rewards,
        global_best=best,
        global_best_reward=best_reward,
        history=state.history + (summary,),
    )


def run_search(
    z0: Latent,
    cfg: SearchConfig,
    evaluate: Evaluator,
    stream: RngStream,
    *,
    start_from_z0: bool = False,
    resample_to_z0: bool = False,
) -> tuple[Latent, RewardScore, tuple[RoundSummary, ...]]:
    """Alternate coarse and fine rounds for ``cfg.rounds`` rounds.

    ``z0`` fixes the dimension. By default round 1 samples a fresh Gaussian
    base; ``start_from_z0`` adopts ``z0`` as the round-1 base instead, and
    ``resample_to_z0`` pins later no-relocation branches to ``z0`` rather
    than fresh noise (both used by the intermediate-noise phase).

    Exactly ``rounds * n_neighbors`` candidate evaluations plus one base
    evaluation per coarse round are performed.
    """
    if cfg.rounds < 1:
        raise PreconditionError(f"run_search needs at least one round, got {cfg.rounds}")
    z0 = as_latent(z0)
    state = SearchState(
        dim=z0.shape[0],
        seed_base=z0 if start_from_z0 else None,
        resample_base=z0 if resample_to_z0 else None,
    )
    for t in range(1, cfg.rounds + 1):
        step = coarse_round if t % 2 == 1 else fine_round
        state = step(state, cfg, evaluate, stream.child(t))

    if cfg.track_global_best:
        return state.global_best, state.global_best_reward, state.history
    final_idx = int(np.argmax(state.last_rewards))
    return state.last_candidates[final_idx], float(state.last_rewards[final_idx]), state.history
