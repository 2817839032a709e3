import os
import logging
from dataclasses import dataclass, field, replace
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
from tqdm import tqdm

from channel import draw_paths, realize_channel
from metrics import worst_link, effective_channel, sinr_from_effective
from ofdm_im import code_from_config, encode_frame, random_bits
from power_alloc import effective_gains, uniform_active, waterfill
from sim_device import build_propagation, cascade_tensor, wrap_phases
from system_config import noise_power_per_tone

# Configuration
FIXED_STEP = 0.15
MIN_STEP = 1e-6
FD_STEP = 1e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

@dataclass(frozen=True, eq=False)
class LossContext:
    """Everything the phase optimizer holds fixed: channel, activation, propagation and powers"""
    H: np.ndarray
    Z: np.ndarray
    prop: object
    p: np.ndarray
    sigma2: float
    N: int
    Pt: float = None
    tone_power: np.ndarray = None
    seed: int = None

    def __post_init__(self):
        Nc, K, M = self.H.shape
        if self.Z.shape != (K, Nc) or self.p.shape != (K, Nc):
            raise ValueError(f"Z {self.Z.shape} and p {self.p.shape} must be ({K}, {Nc})")
        if (self.prop.Nc, self.prop.M, self.prop.S) != (Nc, M, K):
            raise ValueError(f"propagation set ({self.prop.Nc}, {self.prop.M}, {self.prop.S}) "
                             f"does not match channel ({Nc}, {M}, {K})")
        if Nc % self.N:
            raise ValueError(f"Nc={Nc} not divisible by N={self.N}")

    @property
    def shape(self):
        return self.prop.L, self.prop.M

    def zero_phases(self):
        return np.zeros(self.shape)

@dataclass(frozen=True)
class FixedStep:
    eta: float = FIXED_STEP

@dataclass(frozen=True)
class Backtracking:
    eta0: float = 1.0
    shrink: float = 0.5
    c: float = 1e-4
    max_halvings: int = 40

@dataclass
class Trajectory:
    theta: np.ndarray
    start_loss: float
    losses: list = field(default_factory=list)
    steps: list = field(default_factory=list)

@dataclass(frozen=True)
class StepSchedule:
    steps: np.ndarray

    def __post_init__(self):
        steps = np.atleast_1d(np.asarray(self.steps, dtype=float))
        if np.any(steps <= 0):
            raise ValueError("step sizes must be strictly positive")
        object.__setattr__(self, 'steps', steps)

    @property
    def T(self):
        return self.steps.size

    @classmethod
    def constant(cls, T, eta=FIXED_STEP):
        return cls(np.full(T, float(eta)))

    def save(self, path):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        np.savetxt(path, self.steps, fmt='%.17g')
        logging.info(f"Saved {self.T}-stage schedule to {path}")

    @classmethod
    def load(cls, path):
        return cls(np.loadtxt(path, ndmin=1))

@dataclass
class TrainRun:
    epochs: int = 120
    batch_size: int = 64
    learning_rate: float = 1e-3
    split: float = 0.8
    seed: int = 0
    fd_step: float = FD_STEP
    initial_step: float = FIXED_STEP
    T: int = 30
    workers: int = 1
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    schedule: StepSchedule = None

    def history(self):
        return pd.DataFrame({
            'epoch': np.arange(1, len(self.train_loss) + 1),
            'train_loss': self.train_loss,
            'val_loss': self.val_loss,
        })

@dataclass(frozen=True)
class FlopEstimate:
    cascade: int
    sinr: int
    update: int
    total: int

def _evaluate(ctx, theta):
    phases = np.exp(1j * theta)
    S = effective_channel(ctx.H, cascade_tensor(ctx.prop, phases))
    gamma = sinr_from_effective(S, ctx.Z, ctx.p, ctx.sigma2)
    k, i = divmod(worst_link(gamma, ctx.Z), ctx.Z.shape[1])
    return phases, S, gamma, k, i

def _argmin_triple(ctx, k, i):
    return k, i // ctx.N, i % ctx.N

def loss(ctx, theta):
    """Negative worst active SINR and the (user, subblock, tone) that attains it"""
    _, _, gamma, k, i = _evaluate(ctx, theta)
    return -gamma[k, i], _argmin_triple(ctx, k, i)

def _gradient(ctx, phases, S, k, i):
    """d(-gamma_ki)/d theta through the layer split of the cascade"""
    prop = ctx.prop
    weights = ctx.Z[:, i] * ctx.p[:, i]
    s = S[i, k, :]
    others = np.arange(len(weights)) != k
    desired = weights[k] * np.abs(s[k]) ** 2
    interference = np.abs(s[others]) ** 2 @ weights[others] + ctx.sigma2
    grad = np.zeros((prop.L, prop.M))
    if interference <= 0:
        return grad

    # rows[l] = h_k times every layer above l
    rows = [None] * prop.L
    row = ctx.H[i, k, :]
    for l in range(prop.L - 1, -1, -1):
        rows[l] = row
        if l > 0:
            row = (row * phases[l]) @ prop.inter[i]

    below = prop.first[i]
    for l in range(prop.L):
        if l > 0:
            below = prop.inter[i] @ (phases[l - 1][:, None] * below)
        ds = 1j * (phases[l] * rows[l])[:, None] * below
        dpower = 2 * np.real(np.conj(s)[None, :] * ds)
        d_desired = weights[k] * dpower[:, k]
        d_interference = dpower[:, others] @ weights[others]
        grad[l] = -(interference * d_desired - desired * d_interference) / interference ** 2
    return grad

def loss_and_grad(ctx, theta):
    """Loss, worst link and phase gradient at theta"""
    phases, S, gamma, k, i = _evaluate(ctx, theta)
    return -gamma[k, i], _argmin_triple(ctx, k, i), _gradient(ctx, phases, S, k, i)

def grad_theta(ctx, theta):
    return loss_and_grad(ctx, theta)[2]

def _run_stages(ctx, theta, value, grad, steps, record=False):
    """Apply theta <- wrap(theta - eta * grad) once per step size"""
    losses, states = [], []
    for eta in steps:
        if record:
            states.append((theta, grad))
        theta = wrap_phases(theta - eta * grad)
        value, _, grad = loss_and_grad(ctx, theta)
        losses.append(value)
    return theta, value, losses, states

def _start(ctx, theta0):
    theta = wrap_phases(np.array(ctx.zero_phases() if theta0 is None else theta0, dtype=float))
    value, _, grad = loss_and_grad(ctx, theta)
    return theta, value, grad

def _armijo(ctx, theta, value, grad, rule):
    squared = float(np.sum(grad ** 2))
    eta = rule.eta0
    for _ in range(rule.max_halvings):
        candidate = wrap_phases(theta - eta * grad)
        candidate_value, _, candidate_grad = loss_and_grad(ctx, candidate)
        if candidate_value <= value - rule.c * eta * squared:
            return candidate, candidate_value, candidate_grad, eta
        eta *= rule.shrink
    logging.debug("Line search found no decrease; keeping the current phases")
    return theta, value, grad, 0.0

def pgd(ctx, theta0, steps, rule=None):
    """Projected gradient descent on the phase tensor"""
    rule = rule or FixedStep()
    theta, value, grad = _start(ctx, theta0)
    trajectory = Trajectory(theta=theta, start_loss=value)

    if isinstance(rule, FixedStep):
        etas = [rule.eta] * steps
        theta, _, losses, _ = _run_stages(ctx, theta, value, grad, etas)
        trajectory.theta, trajectory.losses, trajectory.steps = theta, losses, etas
        return trajectory

    for _ in range(steps):
        theta, value, grad, eta = _armijo(ctx, theta, value, grad, rule)
        trajectory.losses.append(value)
        trajectory.steps.append(eta)
    trajectory.theta = theta
    return trajectory

def upgd_forward(ctx, theta0, schedule):
    """The unrolled network: one projected step per schedule entry"""
    theta, value, grad = _start(ctx, theta0)
    theta, _, losses, _ = _run_stages(ctx, theta, value, grad, schedule.steps)
    return theta, losses

def _final_loss(ctx, theta0, steps):
    theta, value, grad = _start(ctx, theta0)
    return _run_stages(ctx, theta, value, grad, steps)[1]

def _sample_differences(ctx, theta0, steps, deltas):
    """Base final loss plus the final losses with each step nudged up and down"""
    theta, value, grad = _start(ctx, theta0)
    _, base, _, states = _run_stages(ctx, theta, value, grad, steps, record=True)
    shifted = np.empty((len(steps), 2))
    for t, (stage_theta, stage_grad) in enumerate(states):
        for column, sign in enumerate((1.0, -1.0)):
            tail = np.array(steps[t:], dtype=float)
            tail[0] += sign * deltas[t]
            # Stages before t do not see the nudge, so restart from the recorded state
            shifted[t, column] = _run_stages(ctx, stage_theta, None, stage_grad, tail)[1]
    return base, shifted

def _batch_differences(batch, theta0, steps, fd_step, workers=1):
    steps = np.asarray(steps, dtype=float)
    deltas = np.minimum(fd_step, steps / 2)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(lambda ctx: _sample_differences(ctx, theta0, steps, deltas), batch))
    else:
        results = [_sample_differences(ctx, theta0, steps, deltas) for ctx in batch]
    base = float(np.mean([r[0] for r in results]))
    shifted = np.mean([r[1] for r in results], axis=0)
    grad = (shifted[:, 0] - shifted[:, 1]) / (2 * deltas)
    return base, grad

def schedule_grad(batch, theta0, schedule, fd_step=FD_STEP, workers=1):
    """Central finite-difference gradient of the mean final loss w.r.t. every step size"""
    if not batch:
        raise ValueError("schedule gradient needs a nonempty batch")
    return _batch_differences(batch, theta0, schedule.steps, fd_step, workers)[1]

def mean_final_loss(batch, theta0, schedule):
    return float(np.mean([_final_loss(ctx, theta0, schedule.steps) for ctx in batch]))

def split_dataset(dataset, ratio=0.8):
    """Training and validation halves, in dataset order"""
    cut = int(round(ratio * len(dataset)))
    return dataset[:cut], dataset[cut:]

def train_schedule(dataset, hyper):
    """Learn the step sizes with adaptive-moment updates on finite-difference gradients"""
    if not dataset:
        raise ValueError("training needs a nonempty dataset")
    train, val = split_dataset(dataset, hyper.split)
    if not train:
        raise ValueError(f"split {hyper.split} leaves no training contexts out of {len(dataset)}")
    if not val:
        logging.warning("Validation split is empty; validation loss is not tracked")

    rng = np.random.default_rng(hyper.seed)
    theta0 = train[0].zero_phases()
    steps = np.full(hyper.T, float(hyper.initial_step))
    first_moment = np.zeros(hyper.T)
    second_moment = np.zeros(hyper.T)
    updates = 0
    hyper.train_loss, hyper.val_loss = [], []

    logging.info(f"Training {hyper.T}-stage schedule on {len(train)} contexts, validating on {len(val)}")
    for epoch in tqdm(range(1, hyper.epochs + 1), desc="Training epochs"):
        order = rng.permutation(len(train))
        batch_losses = []
        for start in range(0, len(train), hyper.batch_size):
            batch = [train[j] for j in order[start:start + hyper.batch_size]]
            base, grad = _batch_differences(batch, theta0, steps, hyper.fd_step, hyper.workers)
            batch_losses.append(base)

            updates += 1
            first_moment = ADAM_BETA1 * first_moment + (1 - ADAM_BETA1) * grad
            second_moment = ADAM_BETA2 * second_moment + (1 - ADAM_BETA2) * grad ** 2
            m_hat = first_moment / (1 - ADAM_BETA1 ** updates)
            v_hat = second_moment / (1 - ADAM_BETA2 ** updates)
            steps = np.maximum(steps - hyper.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPSILON), MIN_STEP)

        hyper.train_loss.append(float(np.mean(batch_losses)))
        schedule = StepSchedule(steps.copy())
        hyper.val_loss.append(mean_final_loss(val, theta0, schedule) if val else float('nan'))
        logging.info(f"Epoch {epoch}/{hyper.epochs} - train loss {hyper.train_loss[-1]:.6e}, "
                     f"validation loss {hyper.val_loss[-1]:.6e}")

    hyper.schedule = StepSchedule(steps.copy())
    return hyper.schedule, hyper

def context_from_channel(cfg, H, Z, prop, seed=None):
    """Bundle a channel and activation with the budget shared equally over the active links"""
    allocation = uniform_active(Z, cfg.Pt)
    return LossContext(H=H, Z=np.asarray(Z, dtype=float), prop=prop, p=allocation.p,
                       sigma2=noise_power_per_tone(cfg), N=cfg.N, Pt=cfg.Pt,
                       tone_power=allocation.tone_power, seed=seed)

def refresh_power(ctx, theta):
    """Re-run water-filling on the cascade at the optimized phases"""
    S = effective_channel(ctx.H, cascade_tensor(ctx.prop, np.exp(1j * theta)))
    Pt = ctx.Pt if ctx.Pt is not None else float(ctx.p.sum())
    allocation = waterfill(effective_gains(S, ctx.sigma2), Pt, ctx.Z)
    return replace(ctx, p=allocation.p, tone_power=allocation.tone_power)

def make_context(cfg, seed, prop, code=None):
    """One training context: channel, random bitstream and powers, all from one seed"""
    code = code or code_from_config(cfg)
    rng = np.random.default_rng(seed)
    channel = realize_channel(cfg, draw_paths(cfg, rng), seed=seed)
    frame = encode_frame(code, cfg, random_bits(code, cfg, rng))
    return context_from_channel(cfg, channel.H, frame.Z, prop, seed=seed)

def gen_dataset(cfg, count, seed, prop=None, progress=False):
    """Random channels and activations with the budget shared equally over active links"""
    if count <= 0:
        raise ValueError(f"dataset size must be positive, got {count}")
    prop = prop or build_propagation(cfg)
    code = code_from_config(cfg)
    children = np.random.SeedSequence(seed).spawn(count)
    dataset = []
    for child in tqdm(children, desc="Generating contexts", disable=not progress):
        dataset.append(make_context(cfg, int(child.generate_state(1)[0]), prop, code))
    logging.info(f"Generated {count} contexts from seed {seed}")
    return dataset

def solve_phases(ctx, theta0=None, schedule=None, iterations=None, rule=None):
    """Optimized phases from the unrolled network, or from PGD when no schedule is given"""
    if schedule is not None:
        return upgd_forward(ctx, theta0, schedule)[0]
    return pgd(ctx, theta0, iterations, rule or Backtracking()).theta

def solver_curves(ctx, schedule, iterations=50, theta0=None):
    """Per-stage losses of the unrolled network and both PGD variants from the same start"""
    _, learned = upgd_forward(ctx, theta0, schedule)
    fixed = pgd(ctx, theta0, iterations, FixedStep())
    backtracking = pgd(ctx, theta0, iterations, Backtracking())
    return {'upgd': learned, 'fixed': fixed.losses, 'backtracking': backtracking.losses,
            'start': fixed.start_loss}

def flop_estimate(cfg):
    """Multiply-accumulate count of one unrolled stage"""
    cascade = cfg.L * cfg.M ** 2
    sinr = cfg.K ** 2 * cfg.M
    return FlopEstimate(cascade=cascade, sinr=sinr, update=cfg.L * cfg.M,
                        total=cfg.Nc * cfg.T * (cascade + sinr))
