"""Euler-Maruyama time stepping for mean-field particle systems.

Four systems share one engine:

* the interacting system, where particle i feels the empirical measure of
  all N particles;
* limit / intermediate copies, driven by a frozen flow ``FlowTable``;
* the decoupled SDE started from a point x at time s;
* the noiseless characteristic theta_{s,t}(x) (RK4).

Kinetic models carry state (position, velocity); noise and drift act on the
velocity only.  The measure argument is always a kernel average, computed
either through the kernel's feature factorisation or through the ordered
O(N*M) pair sum (``interaction="pairwise"``).
"""

from dataclasses import dataclass, field
import math
from typing import Optional
import warnings

import numpy as np

from . import _backend
from .kernels import FIRST_ORDER, KINETIC
from .noise import BROWNIAN, derive_seed, initial_rng, standard_normals

__all__ = [
    "EnsembleState",
    "FlowTable",
    "GaussianLaw",
    "PathBundle",
    "SimConfig",
    "SimulationError",
    "deterministic_flow",
    "run_decoupled",
    "run_decoupled_multi",
    "run_interacting",
    "run_limit_copies",
    "run_synchronous_pair",
    "solve_meanfield_flow",
    "step_interacting",
]

_GRID_TOL = 1e-9
INTERACTION_MODES = ("auto", "factorized", "pairwise")


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    N: int
    d: int = 1
    n: int = 1
    kind: str = FIRST_ORDER
    dt: float = 1e-3
    T: float = 1.0
    seed: int = 0
    snapshot_stride: int = 1
    interaction: str = "auto"

    def __post_init__(self):
        if int(self.N) < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if int(self.d) < 1 or int(self.n) < 1:
            raise ValueError("d and n must be positive integers")
        if self.kind not in (FIRST_ORDER, KINETIC):
            raise ValueError(f"kind must be {FIRST_ORDER!r} or {KINETIC!r}, got {self.kind!r}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.T >= self.dt:
            raise ValueError(f"T must be >= dt (T={self.T}, dt={self.dt})")
        if int(self.snapshot_stride) < 1:
            raise ValueError(f"snapshot_stride must be >= 1, got {self.snapshot_stride}")
        if self.interaction not in INTERACTION_MODES:
            raise ValueError(f"interaction must be one of {INTERACTION_MODES}")
        steps = self.T / self.dt
        if abs(steps - round(steps)) > _GRID_TOL * max(1.0, steps):
            raise ValueError(f"T/dt must be an integer number of steps (T={self.T}, dt={self.dt})")

    @property
    def num_steps(self):
        return int(round(self.T / self.dt))

    @property
    def q(self):
        return 2 * self.d if self.kind == KINETIC else self.d

    @property
    def grid(self):
        return np.arange(self.num_steps + 1) * self.dt

    @property
    def snapshot_steps(self):
        steps = list(range(0, self.num_steps + 1, self.snapshot_stride))
        if steps[-1] != self.num_steps:
            steps.append(self.num_steps)
        return np.array(steps)

    def check_spec(self, spec):
        if (spec.d, spec.n, spec.kind) != (self.d, self.n, self.kind):
            raise ValueError(
                f"config (d={self.d}, n={self.n}, kind={self.kind}) does not match "
                f"model {spec.name} (d={spec.d}, n={spec.n}, kind={spec.kind})")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class EnsembleState:
    t: float
    states: np.ndarray

    def __post_init__(self):
        self.states = np.array(self.states, dtype=np.float64)
        if self.states.ndim != 2:
            raise ValueError(f"states must be (N, q), got shape {self.states.shape}")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("ensemble states must be finite")

    @property
    def N(self):
        return self.states.shape[0]


@dataclass
class PathBundle:
    grid: np.ndarray
    states: np.ndarray  # (K, N, q)
    running_sup_dev: Optional[np.ndarray] = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if self.states.shape[0] != self.grid.shape[0]:
            raise ValueError("one snapshot per grid point required")

    @property
    def snapshots(self):
        return [EnsembleState(t, s) for t, s in zip(self.grid, self.states)]

    @property
    def terminal(self):
        return self.states[-1]


@dataclass(eq=False)
class FlowTable:
    """Limit law mu_t as M-point empirical snapshots on the full step grid."""

    grid: np.ndarray
    support: np.ndarray  # (K, M, q)
    dt: float
    converged: bool = True
    iterations: int = 0
    history: list = field(default_factory=list)
    _feature_cache: dict = field(default_factory=dict, repr=False)

    @property
    def M(self):
        return self.support.shape[1]

    @property
    def T(self):
        return float(self.grid[-1])

    def index_of(self, t):
        k = t / self.dt
        kr = int(round(k))
        if abs(k - kr) > _GRID_TOL * max(1.0, abs(k)) or kr < 0 or kr >= len(self.grid):
            raise ValueError(f"time {t} is not on the flow grid (dt={self.dt}, T={self.T})")
        return kr

    def feature_means(self, spec):
        """(K, p) mean feature vectors of every snapshot, computed once per model."""
        key = id(spec)
        if key not in self._feature_cache:
            feats = spec.features(0.0, self.support)
            self._feature_cache[key] = (spec, _backend.ordered_mean(feats))
        return self._feature_cache[key][1]

    def snapshot(self, k):
        return self.support[k]


class GaussianLaw:
    """Product Gaussian initial law on R^q; callable as ``law(rng, size)``."""

    def __init__(self, mean=0.0, std=1.0, q=1):
        self.q = int(q)
        self.mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (self.q,)).copy()
        self.std = np.broadcast_to(np.asarray(std, dtype=np.float64), (self.q,)).copy()
        if np.any(self.std < 0):
            raise ValueError("std must be non-negative")

    def __call__(self, rng, size):
        shape = (size,) if np.isscalar(size) else tuple(size)
        return self.mean + self.std * rng.standard_normal(shape + (self.q,))

    def from_normals(self, z):
        """Map standard normals (..., q) to draws from this law."""
        return self.mean + self.std * z

    @property
    def second_moment(self):
        return float(np.sum(self.mean ** 2 + self.std ** 2))

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


# -- engine ------------------------------------------------------------------

def _resolve_mode(spec, mode):
    if mode == "pairwise":
        return "pairwise"
    if mode == "factorized" and not spec.factorized:
        raise ValueError(f"model {spec.name} has no feature factorisation")
    return "factorized" if spec.factorized else "pairwise"


def _coefficients(spec, t, x, y=None, fbar=None, mode="auto", drift_only=False):
    """Mean-field drift (B, N, d) and diffusion (B, N, d, n) at states x (B, N, q).

    The measure is either a point cloud ``y`` (By, M, q) or, in factorised
    mode, its mean feature vector ``fbar`` (By, p).
    """
    if not spec.y_dependent:
        drift = spec.drift_kernel(t, x, x)
        return drift, (None if drift_only else spec.diffusion_kernel(t, x, x))
    if _resolve_mode(spec, mode) == "factorized":
        if fbar is None:
            fbar = _backend.ordered_mean(spec.features(t, y))
        f = fbar[:, None, :]
        drift = spec.drift_from_features(t, x, f)
        return drift, (None if drift_only else spec.diffusion_from_features(t, x, f))
    return _backend.pairwise_average(spec, t, x, y)


def _euler(spec, x, drift, diff, dt, dW):
    d = spec.d
    inc = diff[..., :, 0] * dW[..., None, 0]
    for j in range(1, spec.n):
        inc = inc + diff[..., :, j] * dW[..., None, j]
    if spec.kind == KINETIC:
        pos = x[..., :d] + x[..., d:] * dt
        vel = x[..., d:] + drift * dt + inc
        return np.concatenate([pos, vel], axis=-1)
    return x + drift * dt + inc


def _assert_finite(x, t, what):
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise SimulationError(
            f"non-finite state in {what}: particle {int(bad[-2])} at t={t:.6g}")


def _noise(seeds, streams, step, dt, n):
    return math.sqrt(dt) * standard_normals(seeds, streams, step, n, BROWNIAN)


def _flow_source(flow, spec, k, mode):
    if spec.y_dependent and _resolve_mode(spec, mode) == "factorized":
        return {"fbar": flow.feature_means(spec)[k][None, :]}
    return {"y": flow.support[k][None, :, :]}


def _check_flow(config, flow):
    if abs(flow.dt - config.dt) > _GRID_TOL * config.dt:
        raise ValueError(f"flow grid step {flow.dt} does not match config dt {config.dt}")
    if config.num_steps + 1 > len(flow.grid):
        raise ValueError(f"flow horizon {flow.T} is shorter than config T={config.T}")


def step_interacting(state, spec, dt, noise, interaction="auto"):
    """One Euler-Maruyama step of the interacting system.

    ``noise`` holds the (N, n) Brownian increments for this step.
    """
    x = state.states[None]
    noise = np.asarray(noise, dtype=np.float64).reshape(1, state.N, spec.n)
    drift, diff = _coefficients(spec, state.t, x, y=x, mode=interaction)
    new = _euler(spec, x, drift, diff, dt, noise)
    _assert_finite(new, state.t + dt, "interacting system")
    return EnsembleState(state.t + dt, new[0])


def _init_array(config, spec, init):
    config.check_spec(spec)
    x0 = init.states if isinstance(init, EnsembleState) else np.asarray(init, dtype=np.float64)
    if isinstance(init, EnsembleState) and init.t != 0:
        raise ValueError("initial state must be at t = 0")
    if x0.shape != (config.N, config.q):
        raise ValueError(f"initial states must be ({config.N}, {config.q}), got {x0.shape}")
    return x0


def run_interacting(config, spec, init, stream_ids=None):
    """Integrate the interacting system on [0, T]; particle i uses noise stream i."""
    x = _init_array(config, spec, init)[None]
    streams = np.arange(config.N) if stream_ids is None else np.asarray(stream_ids)
    seeds = [config.seed]
    keep = set(config.snapshot_steps.tolist())
    snaps = [x[0].copy()]
    for k in range(config.num_steps):
        t = k * config.dt
        drift, diff = _coefficients(spec, t, x, y=x, mode=config.interaction)
        x = _euler(spec, x, drift, diff, config.dt, _noise(seeds, streams, k, config.dt, spec.n))
        _assert_finite(x, t + config.dt, "interacting system")
        if k + 1 in keep:
            snaps.append(x[0].copy())
    return PathBundle(config.snapshot_steps * config.dt, np.stack(snaps))


def run_limit_copies(config, spec, flow, init, share_noise_with_particles=True,
                     stream_ids=None, paired=None):
    """N independent copies driven by the frozen flow.

    With ``share_noise_with_particles`` copy i uses stream i under
    ``config.seed``, the same Brownian path as particle i of
    ``run_interacting``; otherwise the copies get an independent seed.
    If ``paired`` is given its running per-particle sup deviation over the
    common snapshot grid is stored on the result.
    """
    _check_flow(config, flow)
    x = _init_array(config, spec, init)[None]
    streams = np.arange(config.N) if stream_ids is None else np.asarray(stream_ids)
    seed = config.seed if share_noise_with_particles else derive_seed(config.seed, "independent-copies")
    keep = set(config.snapshot_steps.tolist())
    snaps = [x[0].copy()]
    for k in range(config.num_steps):
        t = k * config.dt
        drift, diff = _coefficients(spec, t, x, mode=config.interaction,
                                    **_flow_source(flow, spec, k, config.interaction))
        x = _euler(spec, x, drift, diff, config.dt, _noise([seed], streams, k, config.dt, spec.n))
        _assert_finite(x, t + config.dt, "limit copies")
        if k + 1 in keep:
            snaps.append(x[0].copy())
    bundle = PathBundle(config.snapshot_steps * config.dt, np.stack(snaps))
    if paired is not None:
        if paired.states.shape != bundle.states.shape or not np.allclose(paired.grid, bundle.grid):
            raise ValueError("paired bundle must share grid and particle count")
        dev = np.linalg.norm(paired.states - bundle.states, axis=-1)
        bundle.running_sup_dev = dev.max(axis=0)
    return bundle


def run_synchronous_pair(config, spec, flow, x0, seeds, stream_ids=None):
    """Interacting system and limit copies in lockstep under shared noise.

    ``x0`` is (B, N, q) initial data shared by both systems and ``seeds``
    holds one noise seed per batch row.  Returns the per-particle running
    sup deviation over the step grid, shape (B, N), and both terminal
    states.
    """
    _check_flow(config, flow)
    config.check_spec(spec)
    x = np.array(x0, dtype=np.float64)
    xb = x.copy()
    B, N, _ = x.shape
    streams = np.arange(N) if stream_ids is None else np.asarray(stream_ids)
    sup = np.zeros((B, N))
    for k in range(config.num_steps):
        t = k * config.dt
        dW = _noise(seeds, streams, k, config.dt, spec.n)
        drift, diff = _coefficients(spec, t, x, y=x, mode=config.interaction)
        x = _euler(spec, x, drift, diff, config.dt, dW)
        drift, diff = _coefficients(spec, t, xb, mode=config.interaction,
                                    **_flow_source(flow, spec, k, config.interaction))
        xb = _euler(spec, xb, drift, diff, config.dt, dW)
        _assert_finite(x, t + config.dt, "interacting system")
        _assert_finite(xb, t + config.dt, "limit copies")
        dev = x - xb
        np.maximum(sup, np.sqrt(np.sum(dev * dev, axis=-1)), out=sup)
    return sup, x, xb


def run_interacting_batch(config, spec, x0, seeds, stop_step=None):
    """Terminal states (B, N, q) of B independent interacting systems."""
    config.check_spec(spec)
    x = np.array(x0, dtype=np.float64)
    streams = np.arange(x.shape[1])
    for k in range(config.num_steps if stop_step is None else stop_step):
        t = k * config.dt
        drift, diff = _coefficients(spec, t, x, y=x, mode=config.interaction)
        x = _euler(spec, x, drift, diff, config.dt, _noise(seeds, streams, k, config.dt, spec.n))
        _assert_finite(x, t + config.dt, "interacting system")
    return x


def run_limit_batch(config, spec, flow, x0, seeds, stop_step=None):
    """Terminal states (B, N, q) of B batches of N copies driven by ``flow``."""
    _check_flow(config, flow)
    x = np.array(x0, dtype=np.float64)
    streams = np.arange(x.shape[1])
    for k in range(config.num_steps if stop_step is None else stop_step):
        t = k * config.dt
        drift, diff = _coefficients(spec, t, x, mode=config.interaction,
                                    **_flow_source(flow, spec, k, config.interaction))
        x = _euler(spec, x, drift, diff, config.dt, _noise(seeds, streams, k, config.dt, spec.n))
        _assert_finite(x, t + config.dt, "limit copies")
    return x


# -- limit flow --------------------------------------------------------------

def _w1_sup(new, old, idx, max_points):
    from .transport import wasserstein_1_uniform

    dist = 0.0
    for k in idx:
        a, b = new[k][:max_points], old[k][:max_points]
        dist = max(dist, wasserstein_1_uniform(a, b))
    return dist


def solve_meanfield_flow(config, spec, init_sampler, M, picard_tol, max_iter=10,
                         check_points=10, max_check_support=2000):
    """Picard iteration for the limit flow mu_t.

    Iterate 0 freezes the initial law at all times.  Iterate k simulates M
    copies against the snapshots of iterate k-1, with fresh noise per
    iteration and the same M initial draws.  Stops once the largest W_1
    distance between consecutive iterates, over ``check_points`` evenly
    spaced grid times (on at most ``max_check_support`` support points),
    is <= ``picard_tol``, or after ``max_iter`` iterations with
    ``converged=False``.
    """
    config.check_spec(spec)
    if int(M) < 2:
        raise ValueError(f"M must be >= 2, got {M}")
    if not picard_tol > 0:
        raise ValueError(f"picard_tol must be positive, got {picard_tol}")
    if int(max_iter) < 1:
        raise ValueError("max_iter must be >= 1")
    K = config.num_steps
    grid = config.grid
    x0 = np.asarray(init_sampler(initial_rng(config.seed, "flow-init"), int(M)), dtype=np.float64)
    if x0.shape != (M, config.q):
        raise ValueError(f"init_sampler returned shape {x0.shape}, expected ({M}, {config.q})")
    prev = FlowTable(grid, np.broadcast_to(x0, (K + 1, M, config.q)), config.dt, iterations=0)
    check_idx = np.unique(np.round(np.linspace(0, K, check_points + 1)).astype(int))
    streams = np.arange(M)
    history = []
    for it in range(1, int(max_iter) + 1):
        seeds = [derive_seed(config.seed, "picard", it)]
        support = np.empty((K + 1, M, config.q))
        support[0] = x0
        x = x0[None]
        for k in range(K):
            t = k * config.dt
            drift, diff = _coefficients(spec, t, x, mode=config.interaction,
                                        **_flow_source(prev, spec, k, config.interaction))
            x = _euler(spec, x, drift, diff, config.dt, _noise(seeds, streams, k, config.dt, spec.n))
            _assert_finite(x, t + config.dt, f"Picard iterate {it}")
            support[k + 1] = x[0]
        flow = FlowTable(grid, support, config.dt, iterations=it)
        if not spec.y_dependent:
            # coefficients ignore the measure: iterate 1 is already the fixed point
            history.append(0.0)
            flow.history = history
            return flow
        gap = _w1_sup(support, prev.support, check_idx, max_check_support)
        history.append(gap)
        flow.history = list(history)
        if gap <= picard_tol:
            return flow
        prev = flow
    flow.converged = False
    warnings.warn(f"Picard iteration did not reach tol {picard_tol} in {max_iter} "
                  f"iterations (last gap {history[-1]:.4g})", RuntimeWarning)
    return flow


# -- decoupled SDE and characteristic ----------------------------------------

def run_decoupled(s, t, x, flow, spec, sample_count, seed, interaction="auto"):
    """Samples of X_{s,t}^{mu,x}: the SDE with measure frozen at the flow.

    ``x`` may be one point (q,) or a stack of probes (P, q); all probes use
    the same noise streams 0..sample_count-1 (common random numbers).
    Returns (sample_count, q) or (P, sample_count, q).
    """
    return run_decoupled_multi(s, [t], x, flow, spec, sample_count, seed, interaction)[0]


def run_decoupled_multi(s, t_list, x, flow, spec, sample_count, seed, interaction="auto"):
    """``run_decoupled`` at several end times from one shared set of paths."""
    ks = flow.index_of(s)
    kts = [flow.index_of(t) for t in t_list]
    if not kts or min(kts) <= ks:
        raise ValueError(f"need s < t on the flow grid, got s={s}, t={list(t_list)}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    probes = x[None] if single else x
    if probes.shape[-1] != spec.q:
        raise ValueError(f"x must have {spec.q} coordinates")
    S = int(sample_count)
    state = np.broadcast_to(probes[:, None, :], (probes.shape[0], S, spec.q)).copy()
    streams = np.arange(S)
    wanted = {}
    for pos, kt in enumerate(kts):
        wanted.setdefault(kt, []).append(pos)
    out = [None] * len(kts)
    for k in range(ks, max(kts)):
        tk = k * flow.dt
        drift, diff = _coefficients(spec, tk, state, mode=interaction,
                                    **_flow_source(flow, spec, k, interaction))
        state = _euler(spec, state, drift, diff, flow.dt, _noise([seed], streams, k, flow.dt, spec.n))
        _assert_finite(state, tk + flow.dt, "decoupled SDE")
        for pos in wanted.get(k + 1, ()):
            out[pos] = state[0].copy() if single else state.copy()
    return out


def deterministic_flow(s, t, x, flow, spec, interaction="auto"):
    """theta_{s,t}(x): RK4 for the noiseless characteristic.

    Within each grid step [t_k, t_k + dt] the measure is held at the
    snapshot mu_{t_k}; only the kernel's explicit time argument moves with
    the RK stages.
    """
    ks, kt = flow.index_of(s), flow.index_of(t)
    if ks > kt:
        raise ValueError(f"need s <= t, got s={s}, t={t}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    z = (x[None] if single else x)[None]  # (1, P, q)
    d, h = spec.d, flow.dt

    def field(tt, zz, src):
        drift, _ = _coefficients(spec, tt, zz, mode=interaction, drift_only=True, **src)
        if spec.kind == KINETIC:
            return np.concatenate([zz[..., d:], drift], axis=-1)
        return drift

    for k in range(ks, kt):
        tk = k * h
        src = _flow_source(flow, spec, k, interaction)
        k1 = field(tk, z, src)
        k2 = field(tk + h / 2, z + h / 2 * k1, src)
        k3 = field(tk + h / 2, z + h / 2 * k2, src)
        k4 = field(tk + h, z + h * k3, src)
        z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return z[0, 0] if single else z[0]
