"""Norm-preserving neighborhoods on the sphere of radius ``‖base‖``.

Candidates around a base latent ``z`` are formed as

    m = ‖z‖ · (τ·u + √(1−τ²)·ŵ),   u = z/‖z‖,

where ``ŵ`` is a unit direction tangent to ``u``. τ controls the angular
deviation from the base direction: every candidate keeps the base norm
exactly and satisfies cos∠(m, z) = τ. Coarse search draws ``ŵ`` isotropically
on the tangent sphere; fine search blends the previous perturbations with a
guidance direction before renormalizing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    DegenerateGradientError,
    DegeneratePerturbationError,
    DimensionError,
    Latent,
    PreconditionError,
    RngStream,
    as_latent,
    sample_gaussian,
)

# A tangent perturbation is a unit-norm latent orthogonal to the base
# direction u. Perturbation sets are stored one per row of an (n, d) array.
TangentPerturbation = np.ndarray

_UNIT_TOL = 1e-9
_DEGENERATE_TOL = 1e-12
# One initial draw plus up to 8 redraws for perturbations that collapse
# under tangential projection (measure-zero for d >= 2, defensive only).
_MAX_DRAWS = 9


@dataclass
class NeighborSet:
    """N spherical candidates around a base latent, with their perturbations.

    ``candidates[i]`` was formed from the unit tangent ``perturbations[i]``.
    ``rewards`` stays None until an evaluator has scored the candidates.
    """

    base: Latent
    candidates: np.ndarray
    perturbations: np.ndarray
    rewards: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.base = as_latent(self.base)
        self.candidates = np.asarray(self.candidates, dtype=np.float64)
        self.perturbations = np.asarray(self.perturbations, dtype=np.float64)
        if self.candidates.ndim != 2 or self.candidates.shape[0] < 1:
            raise DimensionError(f"candidates must be (n, d) with n >= 1, got {self.candidates.shape}")
        if self.candidates.shape != self.perturbations.shape:
            raise DimensionError("candidates and perturbations must be aligned")
        if self.candidates.shape[1] != self.base.shape[0]:
            raise DimensionError("candidate dimension must match base")
        if self.rewards is not None:
            self.rewards = np.asarray(self.rewards, dtype=np.float64)
            if self.rewards.shape != (self.candidates.shape[0],):
                raise DimensionError("rewards must hold one score per candidate")

    @property
    def n(self) -> int:
        return self.candidates.shape[0]

    def with_rewards(self, rewards) -> "NeighborSet":
        return NeighborSet(self.base, self.candidates, self.perturbations, rewards)


def tangent_project(w: Latent, u: Latent) -> Latent:
    """Remove the component of ``w`` along the unit direction ``u``.

    Two Gram-Schmidt passes keep the residual orthogonality at machine
    precision even for large d. Raises ``DegeneratePerturbationError`` when
    ``w`` is parallel to ``u`` (projection below 1e-12).
    """
    w = np.asarray(w, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if abs(np.linalg.norm(u) - 1.0) > _UNIT_TOL:
        raise PreconditionError("u must be unit norm within 1e-9")
    out = w - (w @ u) * u
    out = out - (out @ u) * u
    if np.linalg.norm(out) < _DEGENERATE_TOL:
        raise DegeneratePerturbationError("perturbation is parallel to the base direction")
    return out


def _base_frame(base: Latent) -> tuple[Latent, float, Latent]:
    base = as_latent(base)
    radius = float(np.linalg.norm(base))
    if radius <= 0.0:
        raise PreconditionError("base must have positive norm")
    return base, radius, base / radius


def _check_tau_alpha(tau: float, alpha: float | None = None) -> None:
    if not (0.0 <= tau <= 1.0):
        raise PreconditionError(f"tau must lie in [0, 1], got {tau}")
    if alpha is not None and not (0.0 <= alpha <= 1.0):
        raise PreconditionError(f"alpha must lie in [0, 1], got {alpha}")


def _draw_unit_tangent(u: Latent, stream: RngStream) -> Latent:
    """Draw one isotropic unit tangent direction, redrawing degenerate cases."""
    for attempt in range(_MAX_DRAWS):
        w = sample_gaussian(stream.child(attempt), u.shape[0])
        try:
            tangent = tangent_project(w, u)
        except DegeneratePerturbationError:
            continue
        return tangent / np.linalg.norm(tangent)
    raise DegeneratePerturbationError(f"no usable tangent direction after {_MAX_DRAWS} draws")


def _cone_point(radius: float, u: Latent, tau: float, w_hat: Latent) -> Latent:
    return radius * (tau * u + math.sqrt(max(0.0, 1.0 - tau * tau)) * w_hat)


def random_spherical_sample(base: Latent, n: int, tau: float, stream: RngStream) -> NeighborSet:
    """Draw ``n`` isotropic candidates at angle arccos(τ) from ``base``.

    Candidate i consumes the sub-stream ``stream.child(i)``, so candidates
    are identical whether drawn serially or concurrently.
    """
    if n < 1:
        raise PreconditionError(f"need n >= 1 candidates, got {n}")
    _check_tau_alpha(tau)
    base, radius, u = _base_frame(base)
    perturbations = np.empty((n, base.shape[0]))
    candidates = np.empty_like(perturbations)
    for i in range(n):
        w_hat = _draw_unit_tangent(u, stream.child(i))
        perturbations[i] = w_hat
        candidates[i] = _cone_point(radius, u, tau, w_hat)
    return NeighborSet(base, candidates, perturbations)


def guided_spherical_sample(
    base: Latent,
    n: int,
    tau: float,
    alpha: float,
    g: Latent,
    prev_perturbations: np.ndarray,
    stream: RngStream,
) -> NeighborSet:
    """Re-form the neighborhood by blending guidance into the perturbations.

    Each previous unit tangent ŵ′_i becomes (1−α)·ŵ′_i + α·ĝ⊥, renormalized,
    where ĝ⊥ is the unit tangential part of the guidance direction ``g``.
    Raises ``DegenerateGradientError`` when ``g`` has no tangential component
    (callers fall back to random sampling). A blend that cancels below
    tolerance (possible only at α = 0.5 with ŵ′ opposing ĝ⊥) is replaced by a
    fresh random tangent drawn from ``stream``.
    """
    _check_tau_alpha(tau, alpha)
    base, radius, u = _base_frame(base)
    g = as_latent(g, base.shape[0])
    prev = np.asarray(prev_perturbations, dtype=np.float64)
    if prev.ndim != 2 or prev.shape != (n, base.shape[0]):
        raise PreconditionError(f"expected {n} previous perturbations of dim {base.shape[0]}, got {prev.shape}")
    try:
        g_tan = tangent_project(g, u)
    except DegeneratePerturbationError:
        raise DegenerateGradientError("guidance direction has no tangential component") from None
    g_hat = g_tan / np.linalg.norm(g_tan)

    perturbations = np.empty_like(prev)
    candidates = np.empty_like(prev)
    for i in range(n):
        blend = (1.0 - alpha) * prev[i] + alpha * g_hat
        # One cleanup projection: renormalizing a small blend would otherwise
        # amplify the parents' rounding residue along u.
        blend = blend - (blend @ u) * u
        norm = np.linalg.norm(blend)
        if norm < _DEGENERATE_TOL:
            w_hat = _draw_unit_tangent(u, stream.child(i))
        else:
            w_hat = blend / norm
        perturbations[i] = w_hat
        candidates[i] = _cone_point(radius, u, tau, w_hat)
    return NeighborSet(base, candidates, perturbations)
