"""Closed-form flow-matching testbed: mixture targets, Heun solver, rewards.

The generative process is linear-interpolation flow matching toward a
Gaussian mixture: x_t = (1−t)·x₀ + t·ε with x₀ drawn from the mixture and
ε standard normal, so x_t given component j is Gaussian with mean (1−t)·μ_j
and isotropic variance ((1−t)·σ_j)² + t². Everything a learned denoiser
would provide is available exactly:

    velocity(x, t)  = E[ε − x₀ | x_t = x]      (marginal flow velocity)
    clean(x, t)     = E[x₀ | x_t = x]          (one-step clean estimate)

both computed from the per-component posterior responsibilities and
linear-Gaussian conditioning. The solver integrates from t = 1 to t = 0 with
Heun predictor-corrector steps (two velocity evaluations per step). In SDE
mode each of the first L−1 steps additionally adds churn·√Δt·z_l with z_l a
standard normal that is either injected by the caller or drawn from the
run's stream, which keeps every trajectory a pure function of
(z_init, injected noises).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .core import (
    DimensionError,
    Latent,
    NfeCounter,
    NoiseTrajectory,
    NonFiniteError,
    PreconditionError,
    RewardScore,
    RngStream,
    as_latent,
    sample_gaussian,
)

ODE = "ode"
SDE = "sde"

# Weight multiplier applied to the preferred component of ModePreferenceReward
# before renormalizing; any factor > 1 makes the preferred mode the strict
# optimum once sharpness is below half the minimum inter-mean distance.
# Weight multiplier for the preferred component of ModePreferenceReward.
# Large enough that a rare preferred mode still dominates the reward: with
# weight 0.1 against three 0.3 components the tilted weights are 0.53 vs
# 0.16 apiece.
_PREFERRED_BOOST = 10.0


@dataclass
class MixtureModel:
    """Isotropic Gaussian mixture standing in for a pre-trained model."""

    weights: np.ndarray
    means: np.ndarray
    stddevs: np.ndarray

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stddevs = np.asarray(self.stddevs, dtype=np.float64)
        if self.means.ndim != 2 or self.means.shape[1] < 2:
            raise DimensionError(f"means must be (components, dim >= 2), got {self.means.shape}")
        k = self.means.shape[0]
        if self.weights.shape != (k,) or self.stddevs.shape != (k,):
            raise DimensionError("weights, means, stddevs must have one entry per component")
        if np.any(self.weights <= 0.0):
            raise PreconditionError("mixture weights must be positive")
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-12:
            raise PreconditionError("mixture weights must sum to 1 within 1e-12")
        if np.any(self.stddevs <= 0.0):
            raise PreconditionError("component stddevs must be positive")
        if not (np.all(np.isfinite(self.means)) and np.all(np.isfinite(self.stddevs))):
            raise NonFiniteError("mixture parameters must be finite")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]


@dataclass
class SolverSpec:
    """Integration plan: mode, step count, churn scale, and the time grid."""

    mode: str
    steps: int
    churn: float = 0.0
    time_grid: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.mode not in (ODE, SDE):
            raise PreconditionError(f"mode must be '{ODE}' or '{SDE}', got {self.mode!r}")
        if self.steps < 1:
            raise PreconditionError(f"steps must be >= 1, got {self.steps}")
        if self.mode == ODE and self.churn != 0.0:
            raise PreconditionError("ODE mode requires churn = 0")
        if self.mode == SDE and not self.churn > 0.0:
            raise PreconditionError("SDE mode requires churn > 0")
        if self.time_grid is None:
            self.time_grid = np.linspace(1.0, 0.0, self.steps + 1)
        else:
            self.time_grid = np.asarray(self.time_grid, dtype=np.float64)
            if self.time_grid.shape != (self.steps + 1,):
                raise PreconditionError("time_grid must hold steps + 1 points")
            if abs(self.time_grid[0] - 1.0) > 1e-12 or abs(self.time_grid[-1]) > 1e-12:
                raise PreconditionError("time_grid must run from 1 to 0")
            if np.any(np.diff(self.time_grid) >= 0.0):
                raise PreconditionError("time_grid must be strictly decreasing")
            self.time_grid = self.time_grid.copy()
            self.time_grid[0] = 1.0
            self.time_grid[-1] = 0.0

    @classmethod
    def uniform(cls, mode: str, steps: int, churn: float = 0.0) -> "SolverSpec":
        return cls(mode=mode, steps=steps, churn=churn)


def _posterior(model: MixtureModel, x: np.ndarray, t: float):
    """Responsibilities and per-component stats of x_t; broadcasts over rows of x."""
    one_minus = 1.0 - t
    centered = x[..., None, :] - one_minus * model.means
    var = (one_minus * model.stddevs) ** 2 + t * t
    log_resp = (
        np.log(model.weights)
        - 0.5 * np.sum(centered * centered, axis=-1) / var
        - 0.5 * model.dim * np.log(2.0 * math.pi * var)
    )
    log_resp = log_resp - np.max(log_resp, axis=-1, keepdims=True)
    resp = np.exp(log_resp)
    resp /= np.sum(resp, axis=-1, keepdims=True)
    return resp, centered, var


def _velocity(model: MixtureModel, x: np.ndarray, t: float) -> np.ndarray:
    """Marginal velocity, valid on all of [0, 1] by continuity; broadcasts."""
    resp, centered, var = _posterior(model, x, t)
    coef = (t - (1.0 - t) * model.stddevs**2) / var
    per_component = coef[:, None] * centered - model.means
    return np.sum(resp[..., None] * per_component, axis=-2)


def _clean(model: MixtureModel, x: np.ndarray, t: float) -> np.ndarray:
    resp, centered, var = _posterior(model, x, t)
    coef = (1.0 - t) * model.stddevs**2 / var
    per_component = model.means + coef[:, None] * centered
    return np.sum(resp[..., None] * per_component, axis=-2)


def _check_time(t: float) -> float:
    t = float(t)
    if not 0.0 < t <= 1.0:
        raise PreconditionError(f"t must lie in (0, 1], got {t}")
    return t


def marginal_velocity(model: MixtureModel, x: Latent, t: float, nfe: NfeCounter | None = None) -> Latent:
    """Exact marginal velocity E[ε − x₀ | x_t = x] of the mixture flow."""
    x = as_latent(x, model.dim)
    t = _check_time(t)
    if nfe is not None:
        nfe.add(1)
    return _velocity(model, x, t)


def one_step_clean_estimate(model: MixtureModel, x: Latent, t: float, nfe: NfeCounter | None = None) -> Latent:
    """Conditional expectation E[x₀ | x_t = x], the single-call clean prediction."""
    x = as_latent(x, model.dim)
    t = _check_time(t)
    if nfe is not None:
        nfe.add(1)
    return _clean(model, x, t)


def heun_step(
    model: MixtureModel,
    x: np.ndarray,
    t_from: float,
    t_to: float,
    nfe: NfeCounter | None = None,
) -> np.ndarray:
    """One predictor-corrector step from t_from to t_to (two velocity calls).

    The corrector slope at t_to = 0 uses the continuous limit of the
    marginal velocity, which is finite and smooth for positive stddevs.
    """
    dt = t_to - t_from
    v_from = _velocity(model, x, t_from)
    predicted = x + dt * v_from
    v_to = _velocity(model, predicted, t_to)
    if nfe is not None:
        nfe.add(2)
    return x + dt * 0.5 * (v_from + v_to)


def denoise(
    model: MixtureModel,
    spec: SolverSpec,
    z_init: Latent,
    injected: np.ndarray | None = None,
    stream: RngStream | None = None,
    nfe: NfeCounter | None = None,
) -> NoiseTrajectory:
    """Integrate from t = 1 to t = 0, recording every state and injected noise.

    In SDE mode each of the first L−1 steps appends churn·√Δt·z_l after the
    Heun update, with z_l taken from ``injected`` when provided (replay) or
    drawn from ``stream.child(step)`` otherwise. Costs exactly 2·L velocity
    evaluations.
    """
    z_init = as_latent(z_init, model.dim)
    grid = spec.time_grid
    steps = spec.steps
    if spec.mode == ODE:
        if injected is not None and len(injected) > 0:
            raise PreconditionError("ODE mode accepts no injected noises")
        injected_arr = np.zeros((0, model.dim))
    else:
        if injected is not None:
            injected_arr = np.asarray(injected, dtype=np.float64)
            if injected_arr.shape != (steps - 1, model.dim):
                raise DimensionError(
                    f"expected {steps - 1} injected noises of dim {model.dim}, got {injected_arr.shape}"
                )
        elif stream is None:
            raise PreconditionError("SDE mode needs either injected noises or a stream")
        else:
            injected_arr = np.stack([sample_gaussian(stream.child(i), model.dim) for i in range(steps - 1)])

    latents = np.empty((steps + 1, model.dim))
    latents[0] = z_init
    x = z_init
    for i in range(steps):
        x = heun_step(model, x, grid[i], grid[i + 1], nfe)
        if spec.mode == SDE and i < steps - 1:
            dt = grid[i] - grid[i + 1]
            x = x + spec.churn * math.sqrt(dt) * injected_arr[i]
        latents[i + 1] = x
    return NoiseTrajectory(latents=latents, injected=injected_arr, step_times=grid.copy())


@dataclass
class QuadraticReward:
    """Negative squared distance to a target point; maximum 0 at the target."""

    target: np.ndarray

    def __post_init__(self) -> None:
        self.target = as_latent(self.target)

    def evaluate(self, x: Latent) -> float:
        diff = x - self.target
        return float(-(diff @ diff))


@dataclass
class ModePreferenceReward:
    """Mixture-bump reward with one component upweighted.

    R(x) = Σ_j w̃_j · exp(−‖x − μ_j‖² / (2·sharpness²)) where w̃ is the
    mixture weight vector with the preferred component boosted and the whole
    vector renormalized to sum 1.
    """

    model: MixtureModel
    preferred: int
    sharpness: float
    _tilted: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not 0 <= self.preferred < self.model.n_components:
            raise PreconditionError(f"preferred component {self.preferred} out of range")
        if not self.sharpness > 0.0:
            raise PreconditionError("sharpness must be positive")
        tilted = self.model.weights.copy()
        tilted[self.preferred] *= _PREFERRED_BOOST
        self._tilted = tilted / np.sum(tilted)

    def evaluate(self, x: Latent) -> float:
        sq = np.sum((x - self.model.means) ** 2, axis=1)
        return float(np.sum(self._tilted * np.exp(-sq / (2.0 * self.sharpness**2))))


@dataclass
class CustomReward:
    """Opaque callable reward, for library embedding."""

    fn: Callable[[Latent], float]

    def evaluate(self, x: Latent) -> float:
        return float(self.fn(x))


RewardModel = Union[QuadraticReward, ModePreferenceReward, CustomReward]


def evaluate_reward(reward: RewardModel, x: Latent) -> RewardScore:
    """Score a sample; rejects non-finite inputs and outputs."""
    x = as_latent(x)
    value = reward.evaluate(x)
    if not math.isfinite(value):
        raise NonFiniteError(f"reward evaluated to a non-finite value: {value}")
    return value


def nearest_mode(model: MixtureModel, x: Latent) -> int:
    """Index of the component mean closest to x (Euclidean)."""
    x = as_latent(x, model.dim)
    distances = np.linalg.norm(model.means - x, axis=1)
    return int(np.argmin(distances))
