"""
Alternating training of the two controls.

Each stage runs a u-phase and then a v-phase. A u-phase repeatedly simulates a fresh batch of
paths with the current (frozen) controls, solves the lean adjoint along them, pushes the
annealed-stage triples into ``BufferU`` and regresses ``u(t, X_t)`` onto ``-sigma_t a_t``. A
v-phase does the same with the end-point pairs ``(X_0, a_0)`` in ``BufferV``, regressing
``v(t, X_t)`` onto ``-sigma_bar a_0`` at a fresh time ``t ~ U[-1, 0]`` and a Brownian-bridge
point ``X_t`` for every entry and step.

Modes:
    naas: both phases.
    naas-biased: the v-phase is skipped, so ``v`` stays identically zero.
    as-baseline: only the prior stage is trained, against the closed-form terminal cost
                 ``g(x) = U_1(x) - |x|^2 / (2 sigma_bar^2)`` whose lean adjoint is the constant
                 ``grad g(X_0)``; samples are the ``t = 0`` states.
"""

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np
from tqdm import tqdm

from NAAS.array_type import SampleSet
from NAAS.buffer import BufferU, BufferV
from NAAS.dynamics import bridge_sample, simulate, simulate_prior, solve_lean_adjoint
from NAAS.energy import AnnealedPotential, EnergyModel, IsotropicGaussian, clip_norm
from NAAS.exceptions import BufferStateError, InputError, NAASError
from NAAS.iws import WeightSet, log_weight
from NAAS.metrics import mmd, reference_samples, sinkhorn
from NAAS.net import AdamState, ControlNet, regression_step
from NAAS.schedule import NoiseSchedule
from NAAS.streams import stream

logger = logging.getLogger(__name__)

MODES = ("naas", "naas-biased", "as-baseline")
PHASE_KEYS = {"u": 0, "v": 1, "as": 2}

# leading stream keys separating training refreshes, evaluations and final sampling
TRAIN_KEY, EVAL_KEY, SAMPLE_KEY = 0, 1, 2


@dataclass
class TrainConfig:
    """
    Hyperparameters of a training run.

    Parameters
    ----------
    n_stages : int
        Number of stages ``K``; 0 returns the zero-initialised controls.
    n_epochs_u, n_epochs_v : int
        Buffer refreshes per phase (``N_u``, ``N_v``).
    n_steps_u, n_steps_v : int
        Regression steps after each refresh (``M_u``, ``M_v``).
    batch_size : int
        Regression batch size ``B``.
    n_paths : int
        Paths simulated per refresh ``N``.
    buffer_capacity : int
        Capacity of each replay buffer.
    lr_u, lr_v : float
        Adam learning rates.
    e_max, a_max : float or None
        Norm bounds on ``grad U_t`` and on the Hessian-vector products and adjoints.
    grad_clip : float or None
        Global gradient-norm bound of the optimiser.
    beta1, beta2 : float
        Adam moment decay rates.
    sigma_min, sigma_max, sigma_bar : float
        Noise schedule parameters.
    schedule : str
        ``"geometric"`` or ``"constant"``.
    n_prior, n_anneal : int
        Euler-Maruyama steps on ``[-1, 0]`` and ``[0, 1]``.
    stride : int
        Subsampling stride of annealed-stage triples pushed into ``BufferU``.
    mode : str
        One of ``MODES``.
    hvp : str
        ``"fd"`` or ``"analytic"`` Hessian-vector products.
    hidden : tuple of int, optional
        Hidden widths of both controls; ``None`` picks the default for the dimension.
    time_embedding : int
        Size of the sinusoidal time embedding.
    eval_samples : int
        Samples drawn for the evaluation after each phase; 0 disables evaluation.
    sinkhorn_epsilon, sinkhorn_iters, sinkhorn_tol : float, int, float
        Sinkhorn settings of the evaluation.
    mmd_bandwidth : str or float
        ``"median"`` or a fixed RBF bandwidth.
    progress : bool
        Show progress bars.
    """

    n_stages: int = 3
    n_epochs_u: int = 100
    n_epochs_v: int = 100
    n_steps_u: int = 400
    n_steps_v: int = 400
    batch_size: int = 512
    n_paths: int = 2048
    buffer_capacity: int = 10000
    lr_u: float = 1e-5
    lr_v: float = 1e-8
    e_max: float = 100.0
    a_max: float = None
    grad_clip: float = 1.0
    beta1: float = 0.0
    beta2: float = 0.9
    sigma_min: float = 0.01
    sigma_max: float = 1.0
    sigma_bar: float = 1.0
    schedule: str = "geometric"
    n_prior: int = 100
    n_anneal: int = 100
    stride: int = 1
    mode: str = "naas"
    hvp: str = "fd"
    hidden: tuple = None
    time_embedding: int = 64
    eval_samples: int = 2000
    sinkhorn_epsilon: float = 1e-3
    sinkhorn_iters: int = 10000
    sinkhorn_tol: float = 1e-6
    mmd_bandwidth: object = "median"
    progress: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.n_stages < 0:
            raise InputError(f"n_stages must be non-negative, got {self.n_stages}")
        for name in (
            "n_epochs_u",
            "n_epochs_v",
            "n_steps_u",
            "n_steps_v",
            "batch_size",
            "n_paths",
            "buffer_capacity",
            "n_prior",
            "n_anneal",
            "stride",
        ):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr_u", "lr_v", "sigma_bar"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive, got {getattr(self, name)}")
        if self.eval_samples < 0:
            raise InputError(f"eval_samples must be non-negative, got {self.eval_samples}")

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.schedule, self.sigma_min, self.sigma_max, self.sigma_bar)

    def to_dict(self) -> dict:
        return asdict(self)


def _new_net(cfg: TrainConfig, dim: int, seed: int, index: int) -> ControlNet:
    return ControlNet(
        dim,
        hidden=cfg.hidden,
        time_embedding=cfg.time_embedding,
        rng=stream(seed, "init", index),
    )


def _new_optimiser(cfg: TrainConfig, net: ControlNet, lr: float) -> AdamState:
    return AdamState(net.n_params, lr, cfg.beta1, cfg.beta2, grad_clip=cfg.grad_clip)


class NAASTrainer:
    """Owns the controls, their optimisers and buffers for one training run."""

    def __init__(self, cfg: TrainConfig, pot: AnnealedPotential, seed: int, reference=None):
        """
        Parameters
        ----------
        cfg : TrainConfig
            The run's hyperparameters.
        pot : AnnealedPotential
            Annealed potential from the Gaussian prior to the target.
        seed : int
            Run seed; every random stream of the run is derived from it.
        reference : array_like, optional
            Reference samples for the evaluations. By default they are drawn from the target's
            exact sampler when it has one; otherwise evaluations report no metrics.

        Raises
        ------
        InputError
            If ``pot.prior`` is not the ``t = 0`` law of the prior stage, an
            ``IsotropicGaussian`` with ``cfg.sigma_bar``.
        """
        prior = pot.prior
        if not isinstance(prior, IsotropicGaussian) or prior.sigma_bar != cfg.sigma_bar:
            raise InputError(
                f"prior {prior} does not match the prior stage; expected "
                f"IsotropicGaussian with sigma_bar={cfg.sigma_bar}"
            )
        self.cfg = cfg
        self.pot = pot
        self.seed = int(seed)
        self.sched = cfg.noise_schedule()
        dim = pot.dim
        self.u_net = _new_net(cfg, dim, self.seed, 0)
        self.v_net = _new_net(cfg, dim, self.seed, 1)
        self.opt_u = _new_optimiser(cfg, self.u_net, cfg.lr_u)
        self.opt_v = _new_optimiser(cfg, self.v_net, cfg.lr_v)
        self.buffer_u = BufferU(cfg.buffer_capacity, dim)
        self.buffer_v = BufferV(cfg.buffer_capacity, dim)
        self.history = []
        self.timing = []
        if reference is None and cfg.eval_samples:
            try:
                reference = reference_samples(
                    pot.target, cfg.eval_samples, stream(self.seed, "reference")
                )
            except InputError:
                logger.warning("target %s has no exact sampler; evaluation disabled", pot.target)
        self.reference = reference

    def _simulate(self, key: tuple, n_paths: int):
        cfg = self.cfg
        return simulate(
            self.v_net,
            self.u_net,
            self.pot,
            self.sched,
            cfg.n_prior,
            cfg.n_anneal,
            self.seed,
            n_paths,
            key=key,
        )

    def _record(self, stage: int, phase: str, epoch: int, loss: float, started: float):
        row = {"stage": stage, "phase": phase, "epoch": epoch, "loss": loss}
        row.update(sinkhorn=None, mmd=None, ess=None, iw_variance=None)
        self.history.append(row)
        self.timing.append(
            {
                "stage": stage,
                "phase": phase,
                "epoch": epoch,
                "seconds": time.perf_counter() - started,
            }
        )
        return row

    def _run_phase(self, stage: int, phase: str, n_epochs: int, refresh, n_steps: int, step):
        row = None
        for epoch in range(n_epochs):
            started = time.perf_counter()
            try:
                refresh(stage, epoch)
                batches = stream(self.seed, "batches", TRAIN_KEY, stage, PHASE_KEYS[phase], epoch)
                bridge = stream(self.seed, "bridge", TRAIN_KEY, stage, PHASE_KEYS[phase], epoch)
                losses = [step(batches, bridge) for _ in range(n_steps)]
            except NAASError as err:
                raise err.add_context(stage=stage, phase=phase, epoch=epoch)
            row = self._record(stage, phase, epoch, float(np.mean(losses)), started)
            logger.debug("stage %d %s-phase epoch %d: loss %.6g", stage, phase, epoch, row["loss"])
        if row is not None:
            self._evaluate(stage, phase, row)

    def u_phase(self, stage: int):
        """Adjoint matching for the annealed-stage control ``u``; ``v`` is left untouched."""
        cfg = self.cfg

        def refresh(stage, epoch):
            traj = self._simulate((TRAIN_KEY, stage, PHASE_KEYS["u"], epoch), cfg.n_paths)
            adj = solve_lean_adjoint(traj, self.pot, self.sched)
            self.buffer_u.push_trajectory(traj, adj, cfg.stride)

        def step(batches, bridge):
            batch = self.buffer_u.sample_batch(cfg.batch_size, batches)
            target = -np.asarray(self.sched.sigma(batch.t)).reshape(-1, 1) * batch.a
            return regression_step(self.u_net, self.opt_u, (batch.t, batch.x, target))

        self._run_phase(stage, "u", cfg.n_epochs_u, refresh, cfg.n_steps_u, step)

    def _bridge_step(self, batches, bridge):
        cfg = self.cfg
        batch = self.buffer_v.sample_batch(cfg.batch_size, batches)
        t = bridge.uniform(-1.0, 0.0, size=len(batch))
        x_t = bridge_sample(batch.x, t, cfg.sigma_bar, bridge)
        return regression_step(self.v_net, self.opt_v, (t, x_t, -cfg.sigma_bar * batch.a))

    def v_phase(self, stage: int):
        """Reciprocal adjoint matching for the prior-stage control ``v``; ``u`` is untouched."""
        cfg = self.cfg

        def refresh(stage, epoch):
            traj = self._simulate((TRAIN_KEY, stage, PHASE_KEYS["v"], epoch), cfg.n_paths)
            adj = solve_lean_adjoint(traj, self.pot, self.sched)
            self.buffer_v.push_endpoints(traj, adj)

        self._run_phase(stage, "v", cfg.n_epochs_v, refresh, cfg.n_steps_v, self._bridge_step)

    def as_phase(self, stage: int):
        """Reciprocal adjoint matching of ``v`` against the closed-form cost at ``t = 0``."""
        cfg = self.cfg

        def refresh(stage, epoch):
            traj = simulate_prior(
                self.v_net,
                self.sched,
                cfg.n_prior,
                self.seed,
                cfg.n_paths,
                key=(TRAIN_KEY, stage, PHASE_KEYS["as"], epoch),
            )
            x0 = traj.x0[traj.valid]
            self.buffer_v.push(x0, terminal_adjoint(self.pot, x0))

        self._run_phase(stage, "as", cfg.n_epochs_v, refresh, cfg.n_steps_v, self._bridge_step)

    def draw(self, n: int, key: tuple) -> SampleSet:
        """Samples from the current controls: ``t = 1`` states, or ``t = 0`` for the AS baseline."""
        cfg = self.cfg
        if cfg.mode == "as-baseline":
            return sample_as_baseline(
                self.v_net, self.sched, n, self.seed, cfg.n_prior, key=key, dim=self.pot.dim
            )
        return sample(
            self.u_net,
            self.v_net,
            self.pot,
            self.sched,
            n,
            self.seed,
            cfg.n_prior,
            cfg.n_anneal,
            key=key,
        )

    def _weigh(self, traj, row: dict):
        try:
            weights = WeightSet(log_weight(traj, self.v_net, self.u_net, self.pot))
        except BufferStateError as err:
            logger.warning("importance weights unavailable: %s", err)
            return
        row["ess"], row["iw_variance"] = weights.ess, weights.variance

    def _evaluate(self, stage: int, phase: str, row: dict):
        """Score the current controls on the last row of a phase."""
        cfg = self.cfg
        if not cfg.eval_samples:
            return
        key = (EVAL_KEY, stage, PHASE_KEYS[phase])
        if cfg.mode == "as-baseline":
            generated = self.draw(cfg.eval_samples, key)
        else:
            # same paths as draw(), kept whole for the path weights
            traj = self._simulate(key, cfg.eval_samples)
            generated = SampleSet(
                traj.terminal, provenance="generated", seed=self.seed, dim=self.pot.dim
            )
            self._weigh(traj, row)
        if self.reference is None:
            return
        row["sinkhorn"] = sinkhorn(
            generated, self.reference, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters, cfg.sinkhorn_tol
        )
        row["mmd"] = mmd(generated, self.reference, cfg.mmd_bandwidth)
        logger.info(
            "stage %d %s-phase: loss %.6g, Sinkhorn %.6g, MMD %.6g",
            stage,
            phase,
            row["loss"],
            row["sinkhorn"],
            row["mmd"],
        )

    def train(self, callback=None) -> tuple[ControlNet, ControlNet, list]:
        """
        Run all stages.

        Parameters
        ----------
        callback : callable, optional
            Called as ``callback(stage, trainer)`` after each stage.

        Returns
        -------
        tuple
            ``(u_net, v_net, history)``; ``history`` has one row per epoch, the last row of each
            phase carrying the evaluation metrics.
        """
        cfg = self.cfg
        logger.info("training %s for %d stages on %s", cfg.mode, cfg.n_stages, self.pot.target)
        for stage in tqdm(
            range(cfg.n_stages), desc="Training", unit=" stages", disable=not cfg.progress
        ):
            if cfg.mode == "as-baseline":
                self.as_phase(stage)
            else:
                self.u_phase(stage)
                if cfg.mode == "naas":
                    self.v_phase(stage)
            logger.debug(
                "stage %d done: u %s, v %s",
                stage,
                self.u_net.param_hash()[:12],
                self.v_net.param_hash()[:12],
            )
            if callback is not None:
                callback(stage, self)
        return self.u_net, self.v_net, self.history


def terminal_adjoint(pot: AnnealedPotential, x0: np.ndarray) -> np.ndarray:
    """
    ``grad g(X_0) = grad U_1(X_0) - X_0 / sigma_bar^2``, the constant lean adjoint of the
    two-stage AS baseline, with ``grad U_1`` clipped at E_max and the result at A_max.
    """
    return clip_norm(pot.target.grad(x0, clip=pot.e_max) - pot.prior.grad(x0), pot.a_max)


def _potential(cfg: TrainConfig, target: EnergyModel) -> AnnealedPotential:
    prior = IsotropicGaussian(target.dim, cfg.sigma_bar)
    return AnnealedPotential(prior, target, cfg.e_max, cfg.a_max, cfg.hvp)


def train(cfg: TrainConfig, pot: AnnealedPotential, seed: int, reference=None):
    """Train both controls; see ``NAASTrainer.train``."""
    return NAASTrainer(cfg, pot, seed, reference).train()


def train_as_baseline(
    cfg: TrainConfig, target: EnergyModel, seed: int, reference=None
) -> ControlNet:
    """Train the prior-stage control of the two-stage AS baseline and return it."""
    if cfg.mode != "as-baseline":
        raise InputError(f"train_as_baseline needs mode 'as-baseline', got {cfg.mode!r}")
    _, v_net, _ = NAASTrainer(cfg, _potential(cfg, target), seed, reference).train()
    return v_net


def sample(
    u_net,
    v_net,
    pot: AnnealedPotential,
    sched: NoiseSchedule,
    n_samples: int,
    seed: int,
    n_prior: int = 100,
    n_anneal: int = 100,
    key: tuple = (SAMPLE_KEY,),
) -> SampleSet:
    """Simulate ``n_samples`` full paths and return their ``t = 1`` states."""
    if n_samples < 0:
        raise InputError(f"sample count must be non-negative, got {n_samples}")
    traj = simulate(v_net, u_net, pot, sched, n_prior, n_anneal, seed, n_samples, key=key)
    if np.any(traj.diverged):
        logger.warning("%d of %d sample paths diverged", int(traj.diverged.sum()), n_samples)
    return SampleSet(traj.terminal, provenance="generated", seed=seed, dim=pot.dim)


def sample_as_baseline(
    v_net,
    sched: NoiseSchedule,
    n_samples: int,
    seed: int,
    n_prior: int = 100,
    key: tuple = (SAMPLE_KEY,),
    dim: int = None,
) -> SampleSet:
    """Simulate the prior stage only and return the ``t = 0`` states."""
    if n_samples < 0:
        raise InputError(f"sample count must be non-negative, got {n_samples}")
    traj = simulate_prior(v_net, sched, n_prior, seed, n_samples, key=key, dim=dim)
    return SampleSet(traj.x0, provenance="generated", seed=seed, dim=traj.dim)
