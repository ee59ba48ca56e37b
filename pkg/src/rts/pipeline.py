"""End-to-end reward-guided trajectory search, baselines, and NFE accounting.

The full pipeline runs in five stages: (1) a multi-round coarse-to-fine
search over initial noises, each candidate scored by a full denoise plus
reward; (2) recording of the winning trajectory; (3) key-step selection by
projected curvature; (4) for each key step in descending time order, one
short coarse-to-fine search over the injected noise at that step, scored by
the one-step clean estimate, with the trajectory re-simulated forward
between key steps; (5) a final full denoise with every chosen noise fixed,
which is exactly the replay of (z_init, injected).

Every velocity or clean-estimate call is one NFE. Budgets are enforced by
pre-checking the exact cost of each atomic operation, so ``nfe_used`` never
exceeds the budget; when the budget runs out mid-phase the run returns the
best result so far with ``truncated`` set. ``expected_rts_nfe`` reproduces
the ledger arithmetic so the counter can be audited exactly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BudgetError,
    Latent,
    NfeCounter,
    NoiseTrajectory,
    PreconditionError,
    RngStream,
    sample_gaussian,
)
from .keysteps import KeyStepSet, project_trajectory, select_key_steps
from .search import SearchConfig, run_search
from .sphere import random_spherical_sample
from .sim import (
    ODE,
    SDE,
    MixtureModel,
    RewardModel,
    SolverSpec,
    denoise,
    evaluate_reward,
    heun_step,
    one_step_clean_estimate,
)

RTS = "rts"
BON = "bon"
ZO = "zo"
FREE = "free"
METHODS = (RTS, BON, ZO, FREE)

# Stream derivation labels; fixed so every draw site is addressable.
_S_FRESH_INIT = 0
_S_INIT_SEARCH = 1
_S_RECORD = 2
_S_INTER = 3
_S_EVAL_NOISE = 4


class _PhaseTruncated(Exception):
    """Internal signal: the next operation does not fit in the budget."""


class _Budget:
    """Pre-checked NFE budget with a reservation for mandatory future costs."""

    def __init__(self, limit: int | None, counter: NfeCounter):
        self.limit = limit
        self.counter = counter
        self.reserved = 0

    def fits(self, cost: int) -> bool:
        return self.limit is None or self.counter.value + self.reserved + cost <= self.limit

    def ensure(self, cost: int) -> None:
        if not self.fits(cost):
            raise _PhaseTruncated()

    def reserve(self, amount: int) -> None:
        self.reserved += amount

    def unreserve(self, amount: int) -> None:
        self.reserved -= amount


@dataclass
class RtsConfig:
    """Hyperparameters of the two search phases and the budget.

    ``search_init.rounds = 0`` disables the initial phase (the base
    trajectory then comes from one fresh denoise); ``k_keysteps = 0``
    disables the intermediate phase. ``eval_steps_init`` sets the solver
    length used to score initial-noise candidates (None means the full
    length); ``eval_steps_inter`` is the scoring lookahead at a key step,
    1 meaning a single clean-estimate call. With ``resample_inter_fresh``
    the intermediate phase's no-relocation branch draws fresh noise;
    otherwise it falls back to the recorded noise at that step.
    """

    search_init: SearchConfig = SearchConfig()
    search_inter: SearchConfig = SearchConfig(rounds=2)
    k_keysteps: int = 6
    eval_steps_init: int | None = None
    eval_steps_inter: int = 1
    budget_nfe: int | None = None
    resample_inter_fresh: bool = True

    def __post_init__(self) -> None:
        if self.k_keysteps < 0:
            raise PreconditionError(f"k_keysteps must be >= 0, got {self.k_keysteps}")
        if self.eval_steps_init is not None and self.eval_steps_init < 1:
            raise PreconditionError("eval_steps_init must be >= 1 when set")
        if self.eval_steps_inter < 1:
            raise PreconditionError("eval_steps_inter must be >= 1")
        if self.budget_nfe is not None and self.budget_nfe < 1:
            raise PreconditionError("budget_nfe must be >= 1 when set")


@dataclass
class RunResult:
    """Outcome of one run: sample, reward, audit trail."""

    method: str
    final_sample: Latent
    final_reward: float
    nfe_used: int
    seed: int
    key_steps: KeyStepSet | None = None
    round_history: dict = field(default_factory=dict)
    truncated: bool = False
    nfe_breakdown: dict = field(default_factory=dict)


def _latent_label(z: np.ndarray) -> int:
    """Stable 64-bit stream label for a latent's exact float64 contents."""
    digest = hashlib.blake2b(np.ascontiguousarray(z).tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class _DenoiseEvaluator:
    """Scores an initial noise by full denoise + reward; keeps trajectories.

    In SDE mode the churn noises of a candidate's scoring run are derived
    from a hash of the candidate itself, which makes the reward a pure
    function of the latent (order- and parallelism-independent) and keeps a
    relocated base's stored reward consistent on re-evaluation.
    """

    def __init__(
        self,
        model: MixtureModel,
        spec: SolverSpec,
        reward: RewardModel,
        noise_stream: RngStream,
        nfe: NfeCounter,
        budget: _Budget,
    ):
        self.model = model
        self.spec = spec
        self.reward = reward
        self.noise_stream = noise_stream
        self.nfe = nfe
        self.budget = budget
        self.cost = 2 * spec.steps
        self.cache: dict[bytes, tuple[float, NoiseTrajectory]] = {}
        self.best: tuple[float, NoiseTrajectory] | None = None

    def __call__(self, z: Latent) -> float:
        self.budget.ensure(self.cost)
        stream = None
        if self.spec.mode == SDE:
            stream = self.noise_stream.child(_latent_label(z))
        traj = denoise(self.model, self.spec, z, stream=stream, nfe=self.nfe)
        score = evaluate_reward(self.reward, traj.latents[-1])
        self.cache[np.ascontiguousarray(z).tobytes()] = (score, traj)
        if self.best is None or score > self.best[0]:
            self.best = (score, traj)
        return score

    def lookup(self, z: Latent) -> tuple[float, NoiseTrajectory]:
        return self.cache[np.ascontiguousarray(z).tobytes()]


class _SlotEvaluator:
    """Scores a candidate noise for one churn slot by a deterministic preview.

    The candidate replaces the injected noise right after the already-fixed
    pre-churn state; the preview then integrates ``lookahead - 1`` solver
    steps (with the currently chosen noises) and takes a clean estimate, or
    rewards the final state directly if the preview reaches t = 0.
    """

    def __init__(
        self,
        model: MixtureModel,
        spec: SolverSpec,
        reward: RewardModel,
        pre_churn: np.ndarray,
        position: int,
        injected: np.ndarray,
        lookahead: int,
        nfe: NfeCounter,
        budget: _Budget,
    ):
        self.model = model
        self.spec = spec
        self.reward = reward
        self.pre_churn = pre_churn
        self.position = position
        self.injected = injected
        self.nfe = nfe
        self.budget = budget
        grid = spec.time_grid
        self.scale = spec.churn * math.sqrt(grid[position - 1] - grid[position])
        self.preview_steps = min(lookahead - 1, spec.steps - position)
        self.reaches_clean = position + self.preview_steps == spec.steps
        self.cost = 2 * self.preview_steps + (0 if self.reaches_clean else 1)

    def __call__(self, candidate: Latent) -> float:
        self.budget.ensure(self.cost)
        grid = self.spec.time_grid
        x = self.pre_churn + self.scale * np.asarray(candidate, dtype=np.float64)
        step = self.position
        for _ in range(self.preview_steps):
            x = heun_step(self.model, x, grid[step], grid[step + 1], self.nfe)
            if step < self.spec.steps - 1:
                dt = grid[step] - grid[step + 1]
                x = x + self.spec.churn * math.sqrt(dt) * self.injected[step]
            step += 1
        if not self.reaches_clean:
            x = one_step_clean_estimate(self.model, x, grid[step], self.nfe)
        return evaluate_reward(self.reward, x)


def _search_evaluations(cfg: SearchConfig) -> int:
    """Evaluator calls per search: N per round plus one base per coarse round."""
    return cfg.rounds * cfg.n_neighbors + (cfg.rounds + 1) // 2


def _slot_eval_cost(spec: SolverSpec, position: int, lookahead: int) -> int:
    preview = min(lookahead - 1, spec.steps - position)
    return 2 * preview + (0 if position + preview == spec.steps else 1)


def expected_rts_nfe(cfg: RtsConfig, spec: SolverSpec, key_positions=()) -> dict:
    """Exact NFE ledger of an untruncated run with the given key positions.

    Returns per-phase integers plus their total, mirroring
    ``RunResult.nfe_breakdown``.
    """
    steps = spec.steps
    eval_steps = cfg.eval_steps_init if cfg.eval_steps_init is not None else steps
    init_runs = cfg.search_init.rounds >= 1
    init = _search_evaluations(cfg.search_init) * 2 * eval_steps if init_runs else 0
    record = 2 * steps if (not init_runs or eval_steps != steps) else 0
    inter = 0
    final = 0
    positions = sorted(key_positions)
    inter_enabled = spec.mode == SDE and cfg.k_keysteps >= 1 and cfg.search_inter.rounds >= 1
    if inter_enabled and positions:
        per_search = _search_evaluations(cfg.search_inter)
        previous = None
        for position in positions:
            if previous is not None:
                inter += 2 * max(0, position - previous - 1)
            inter += 2 + per_search * _slot_eval_cost(spec, position, cfg.eval_steps_inter)
            previous = position
        final = 2 * steps
    total = init + record + inter + final
    return {"init_search": init, "record": record, "inter_search": inter, "final": final, "total": total}


def run_rts(
    model: MixtureModel,
    spec: SolverSpec,
    reward: RewardModel,
    cfg: RtsConfig,
    stream: RngStream,
) -> RunResult:
    """Full two-phase search; see the module docstring for the stage layout.

    The intermediate phase runs only in SDE mode with ``k_keysteps >= 1``
    and ``search_inter.rounds >= 1``; ``k`` is clamped to the number of
    interior steps. Raises ``BudgetError`` when the budget cannot cover even
    one scored candidate.
    """
    dim = model.dim
    steps = spec.steps
    counter = NfeCounter()
    budget = _Budget(cfg.budget_nfe, counter)
    eval_steps = cfg.eval_steps_init if cfg.eval_steps_init is not None else steps
    init_runs = cfg.search_init.rounds >= 1
    record_needed = (not init_runs) or eval_steps != steps
    minimum = (2 * eval_steps if init_runs else 0) + (2 * steps if record_needed else 0)
    if not budget.fits(minimum):
        raise BudgetError(f"budget {cfg.budget_nfe} cannot cover one scored candidate ({minimum} NFEs)")

    truncated = False
    round_history: dict = {"init": [], "inter": []}
    breakdown = {"init_search": 0, "record": 0, "inter_search": 0, "final": 0}

    if record_needed:
        budget.reserve(2 * steps)

    if init_runs:
        # Short-rollout scoring must be deterministic: re-rolled churn would
        # otherwise dominate the ranking and the winner's score would not
        # survive the full-length record run. Full-length scoring keeps the
        # run's own mode because the winner keeps its scored trajectory.
        eval_spec = spec if eval_steps == steps else SolverSpec(ODE, eval_steps, 0.0)
        evaluator = _DenoiseEvaluator(model, eval_spec, reward, stream.child(_S_EVAL_NOISE), counter, budget)
        try:
            best_z, _, history = run_search(
                np.zeros(dim), cfg.search_init, evaluator, stream.child(_S_INIT_SEARCH)
            )
            round_history["init"] = [s.best_candidate_reward for s in history]
            _, traj0 = evaluator.lookup(best_z)
        except _PhaseTruncated:
            truncated = True
            _, traj0 = evaluator.best
        breakdown["init_search"] = counter.value
        z_init = traj0.latents[0]
    else:
        z_init = sample_gaussian(stream.child(_S_FRESH_INIT), dim)
        traj0 = None

    if record_needed:
        budget.unreserve(2 * steps)
        before = counter.value
        traj0 = denoise(model, spec, z_init, stream=stream.child(_S_RECORD), nfe=counter)
        breakdown["record"] = counter.value - before

    keys: KeyStepSet | None = None
    final_traj = traj0
    inter_enabled = (
        spec.mode == SDE and cfg.k_keysteps >= 1 and cfg.search_inter.rounds >= 1 and steps >= 2
    )
    if inter_enabled and not truncated:
        if budget.fits(2 * steps):
            budget.reserve(2 * steps)
            before = counter.value
            keys = select_key_steps(project_trajectory(traj0), min(cfg.k_keysteps, steps - 1))
            grid = spec.time_grid
            latents = traj0.latents.copy()
            injected = traj0.injected.copy()
            valid_through = steps
            committed = 0
            try:
                for position in sorted(keys.indices):
                    slot = position - 1
                    while valid_through < slot:
                        i = valid_through
                        budget.ensure(2)
                        x = heun_step(model, latents[i], grid[i], grid[i + 1], counter)
                        if i < steps - 1:
                            x = x + spec.churn * math.sqrt(grid[i] - grid[i + 1]) * injected[i]
                        latents[i + 1] = x
                        valid_through = i + 1
                    budget.ensure(2)
                    pre_churn = heun_step(model, latents[slot], grid[slot], grid[slot + 1], counter)
                    slot_eval = _SlotEvaluator(
                        model, spec, reward, pre_churn, position, injected,
                        cfg.eval_steps_inter, counter, budget,
                    )
                    best_noise, _, history = run_search(
                        injected[slot],
                        cfg.search_inter,
                        slot_eval,
                        stream.child(_S_INTER).child(position),
                        start_from_z0=True,
                        resample_to_z0=not cfg.resample_inter_fresh,
                    )
                    round_history["inter"].append([s.best_candidate_reward for s in history])
                    injected[slot] = best_noise
                    latents[slot + 1] = pre_churn + slot_eval.scale * best_noise
                    valid_through = slot + 1
                    committed += 1
            except _PhaseTruncated:
                truncated = True
            breakdown["inter_search"] = counter.value - before
            budget.unreserve(2 * steps)
            if committed > 0:
                before = counter.value
                final_traj = denoise(model, spec, traj0.latents[0], injected=injected, nfe=counter)
                breakdown["final"] = counter.value - before
        else:
            truncated = True

    final_reward = evaluate_reward(reward, final_traj.latents[-1])
    return RunResult(
        method=RTS,
        final_sample=final_traj.latents[-1],
        final_reward=final_reward,
        nfe_used=counter.value,
        seed=stream.root_seed,
        key_steps=keys,
        round_history=round_history,
        truncated=truncated,
        nfe_breakdown=breakdown,
    )


def run_bon(
    model: MixtureModel,
    spec: SolverSpec,
    reward: RewardModel,
    budget_nfe: int,
    stream: RngStream,
) -> RunResult:
    """Best-of-N: as many independent full denoises as the budget allows."""
    cost = 2 * spec.steps
    n_candidates = budget_nfe // cost
    if n_candidates < 1:
        raise BudgetError(f"budget {budget_nfe} is below one denoise ({cost} NFEs)")
    counter = NfeCounter()
    best: tuple[float, NoiseTrajectory] | None = None
    rewards = []
    for i in range(n_candidates):
        z = sample_gaussian(stream.child(0).child(i), model.dim)
        traj = denoise(model, spec, z, stream=stream.child(1).child(i), nfe=counter)
        score = evaluate_reward(reward, traj.latents[-1])
        rewards.append(score)
        if best is None or score > best[0]:
            best = (score, traj)
    return RunResult(
        method=BON,
        final_sample=best[1].latents[-1],
        final_reward=best[0],
        nfe_used=counter.value,
        seed=stream.root_seed,
        round_history={"candidates": rewards},
        nfe_breakdown={"denoise": counter.value},
    )


def run_zo(
    model: MixtureModel,
    spec: SolverSpec,
    reward: RewardModel,
    budget_nfe: int,
    step_tau: float,
    stream: RngStream,
) -> RunResult:
    """Hill climbing on the initial noise with spherical steps at fixed tau."""
    cost = 2 * spec.steps
    total = budget_nfe // cost
    if total < 2:
        raise BudgetError(f"budget {budget_nfe} is below two denoises ({2 * cost} NFEs)")
    counter = NfeCounter()
    base = sample_gaussian(stream.child(0), model.dim)
    best_traj = denoise(model, spec, base, stream=stream.child(1).child(0), nfe=counter)
    best_reward = evaluate_reward(reward, best_traj.latents[-1])
    rewards = [best_reward]
    for step in range(1, total):
        neighbor = random_spherical_sample(base, 1, step_tau, stream.child(2).child(step)).candidates[0]
        traj = denoise(model, spec, neighbor, stream=stream.child(1).child(step), nfe=counter)
        score = evaluate_reward(reward, traj.latents[-1])
        rewards.append(score)
        if score > best_reward:
            base, best_reward, best_traj = neighbor, score, traj
    return RunResult(
        method=ZO,
        final_sample=best_traj.latents[-1],
        final_reward=best_reward,
        nfe_used=counter.value,
        seed=stream.root_seed,
        round_history={"evaluations": rewards},
        nfe_breakdown={"denoise": counter.value},
    )


def run_free(
    model: MixtureModel,
    spec: SolverSpec,
    reward: RewardModel,
    stream: RngStream,
) -> RunResult:
    """A single unsearched denoise, the no-extra-compute reference."""
    counter = NfeCounter()
    z = sample_gaussian(stream.child(0), model.dim)
    traj = denoise(model, spec, z, stream=stream.child(1), nfe=counter)
    score = evaluate_reward(reward, traj.latents[-1])
    return RunResult(
        method=FREE,
        final_sample=traj.latents[-1],
        final_reward=score,
        nfe_used=counter.value,
        seed=stream.root_seed,
        round_history={},
        nfe_breakdown={"denoise": counter.value},
    )
