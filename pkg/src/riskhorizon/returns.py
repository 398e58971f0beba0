"""Learning targets for cumulative collision-probability heads.

Head i of the estimator predicts the probability of a collision within the
next i steps. Its targets are built from binary reward traces: fixed-window
Monte Carlo returns, bootstrapped n-step returns, and truncated-lambda blends
of the two. Because the event is terminal and rewards are binary, every
return lies in [0, 1] once bootstraps are clamped.

Windows on truncated (non-collision) episodes have unknown outcomes past the
recorded steps. The rule used throughout: a depth-n component at time t is
computable only if a collision occurs within steps t+1..t+n, or the landing
state s_{t+n} is a recorded observation. Anything else is masked invalid,
never zero-filled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .episodes import Episode, RewardTrace


class InvalidTargetError(ValueError):
    """The requested window is unknowable on a truncated episode."""


@dataclass(frozen=True)
class HorizonConfig:
    """Discretization of the prediction horizon.

    delta_t: seconds per step.
    n_heads: number of heads; head i covers i*delta_t seconds.
    lam: lambda-return mixing coefficient in [0, 1].
    trunc_n: maximum bootstrap depth; depths beyond it get no weight.
    """

    delta_t: float
    n_heads: int
    lam: float
    trunc_n: int

    def __post_init__(self) -> None:
        if not self.delta_t > 0:
            raise ValueError("delta_t must be positive")
        if self.n_heads < 1:
            raise ValueError("need at least one head")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not 1 <= self.trunc_n <= self.n_heads:
            raise ValueError("trunc_n must lie in [1, n_heads]")

    @property
    def horizon_seconds(self) -> float:
        return self.n_heads * self.delta_t


@dataclass
class TargetMatrix:
    """Per-timestep, per-head targets with a validity mask.

    values[t, i-1] is the lambda-return target for head i anchored at step t;
    it is meaningful only where valid[t, i-1] is True. Every valid value lies
    in [0, 1].
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        if self.values.shape != self.valid.shape:
            raise ValueError("values and valid must have matching shapes")


def _check_anchor(trace: RewardTrace, t: int) -> None:
    if not 0 <= t < trace.steps:
        raise ValueError(f"t={t} does not index a recorded state (steps={trace.steps})")


def _collision_step(trace: RewardTrace) -> int | None:
    # 1-based step index of the collision, None for truncated episodes.
    return trace.steps if trace.ends_in_collision else None


def mc_return(trace: RewardTrace, t: int, i: int) -> float:
    """Fixed-window Monte Carlo return: did a collision occur in (t, t+i]?

    Returns 1.0 if the episode's collision falls within the window, 0.0 if
    the window closes on a recorded state without one. Raises
    InvalidTargetError when the window reaches past the recorded states of a
    truncated episode, where the outcome is unknown.
    """

    _check_anchor(trace, t)
    if i < 1:
        raise ValueError("window length i must be >= 1")
    coll = _collision_step(trace)
    if coll is not None and coll <= t + i:
        return 1.0
    if t + i <= trace.steps - 1:
        return 0.0
    raise InvalidTargetError(
        f"window t={t}, i={i} reaches the truncated end of a {trace.steps}-step episode"
    )


def lambda_weights(i: int, lam: float, trunc_n: int) -> np.ndarray:
    """Weights over depths 1..min(i, trunc_n) for the truncated lambda blend.

    w_n = (1-lam) * lam^(n-1) for n < m and w_m = lam^(m-1), m = min(i,
    trunc_n): the geometric tail beyond the cut is folded onto the deepest
    depth, so the weights are nonnegative and sum to exactly 1.
    """

    if i < 1:
        raise ValueError("head index i must be >= 1")
    if trunc_n < 1:
        raise ValueError("trunc_n must be >= 1")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    m = min(i, trunc_n)
    if m == 1:
        return np.ones(1)
    w = np.empty(m)
    w[: m - 1] = (1.0 - lam) * lam ** np.arange(m - 1)
    w[m - 1] = lam ** (m - 1)
    return w


def _depth_value(
    trace: RewardTrace, t: int, n: int, i: int, bootstrap: float | None
) -> float:
    """Value of the depth-n component of a window of length i anchored at t."""

    coll = _collision_step(trace)
    if coll is not None and coll <= t + n:
        return 1.0
    if t + n > trace.steps - 1:
        raise InvalidTargetError(
            f"state s_{{t+n}} (t={t}, n={n}) is past the truncated end "
            f"of a {trace.steps}-step episode"
        )
    if n == i:
        # Pure Monte Carlo depth: the reward sum, zero without a collision.
        return 0.0
    if bootstrap is None:
        raise ValueError(f"depth n={n} < i={i} requires a bootstrap estimate")
    return float(np.clip(bootstrap, 0.0, 1.0))


def n_step_return(
    trace: RewardTrace, t: int, n: int, i: int, bootstrap: float | None = None
) -> float:
    """n-step return for head i: realized rewards r_{t+1}..r_{t+n} plus the
    remaining-window estimate at the landing state.

    The bootstrap stands for the probability of a collision in the i-n steps
    after t+n (head i-n evaluated at s_{t+n}) and is clamped to [0, 1]. A
    collision at or before t+n makes the return exactly 1; n = i needs no
    bootstrap and reduces to mc_return.
    """

    _check_anchor(trace, t)
    if not 1 <= n <= i:
        raise ValueError("depth n must satisfy 1 <= n <= i")
    return _depth_value(trace, t, n, i, bootstrap)


def lambda_return(
    trace: RewardTrace,
    t: int,
    i: int,
    bootstraps: Sequence[float | None],
    cfg: HorizonConfig,
) -> float:
    """Truncated lambda blend of n-step returns for head i anchored at t.

    bootstraps[n-1] supplies the landing-state estimate for depth n (ignored
    wherever a collision short-circuits the window or n = i). Head 1 never
    bootstraps: its target is the raw next-step outcome. Depths whose weight
    is exactly zero impose no validity requirement, so at lam=1 the blend
    degenerates to mc_return and at lam=0 to the 1-step return, on exactly
    the windows where those are defined.
    """

    _check_anchor(trace, t)
    if not 1 <= i <= cfg.n_heads:
        raise ValueError(f"head index i={i} outside 1..{cfg.n_heads}")
    if i == 1:
        return _depth_value(trace, t, 1, 1, None)
    weights = lambda_weights(i, cfg.lam, cfg.trunc_n)
    total = 0.0
    for n_minus_1, w in enumerate(weights):
        if w == 0.0:
            continue
        n = n_minus_1 + 1
        boot = bootstraps[n_minus_1] if n < i else None
        total += w * _depth_value(trace, t, n, i, boot)
    # components and weights keep the exact value in [0, 1]; the float
    # accumulation can still land one ulp outside
    return min(max(total, 0.0), 1.0)


def targets_from_estimates(
    trace: RewardTrace, estimates: np.ndarray, cfg: HorizonConfig
) -> TargetMatrix:
    """Full target matrix for one episode given a bootstrap snapshot.

    estimates[k] holds the estimator's head outputs at the k-th recorded
    state; they are clamped to [0, 1] before use. The snapshot is treated as
    a constant (no gradient flows through targets).
    """

    estimates = np.asarray(estimates, dtype=np.float64)
    steps = trace.steps
    n_heads = cfg.n_heads
    if estimates.shape != (steps, n_heads):
        raise ValueError(
            f"estimates must be [{steps}, {n_heads}], got {estimates.shape}"
        )
    clamped = np.clip(estimates, 0.0, 1.0)
    collided = trace.ends_in_collision
    weight_rows = [lambda_weights(i, cfg.lam, cfg.trunc_n) for i in range(1, n_heads + 1)]
    max_depth = max(len(w) for w in weight_rows)
    # Padded weight table: weights[i-1, n-1] is depth n's weight for head i.
    weights = np.zeros((n_heads, max_depth))
    for i, w in enumerate(weight_rows):
        weights[i, : len(w)] = w
    # Deepest depth that actually carries weight, per head; shallower depths
    # land on earlier states, so this alone decides validity on truncation.
    deepest = np.array([int(np.max(np.nonzero(w)[0])) + 1 for w in weight_rows])

    values = np.zeros((steps, n_heads))
    for n in range(1, max_depth + 1):
        # Depth-n component per (t, head): with a recorded landing state it
        # is the bootstrap for heads i > n and the zero reward sum at i = n;
        # past the end of a collision episode the window holds the collision
        # and the component is exactly 1.
        component = np.zeros((steps, n_heads))
        last_ok = steps - 1 - n
        if last_ok >= 0 and n < n_heads:
            component[: last_ok + 1, n:] = clamped[n : last_ok + n + 1, : n_heads - n]
        if collided:
            component[max(last_ok + 1, 0) :, :] = 1.0
        values += component * weights[:, n - 1][None, :]

    # components and weights keep the exact value in [0, 1]; the float
    # accumulation can still land one ulp outside
    np.clip(values, 0.0, 1.0, out=values)

    if collided:
        valid = np.ones((steps, n_heads), dtype=bool)
    else:
        valid = (np.arange(steps)[:, None] + deepest[None, :]) <= steps - 1
        values[~valid] = 0.0
    return TargetMatrix(values=values, valid=valid)


def build_targets(episode: Episode, estimator, cfg: HorizonConfig) -> TargetMatrix:
    """Target matrix for an episode, bootstrapping from a live estimator.

    The estimator is evaluated once on every recorded observation; the
    resulting snapshot is constant with respect to the update that consumes
    these targets.
    """

    estimates = np.asarray(estimator.forward(episode.observations), dtype=np.float64)
    return targets_from_estimates(episode.trace(), estimates, cfg)
