"""Two-step training: structure learning under an augmented Lagrangian
(Step 1), then adversarial training of a synthesis model that reuses the
learned first layer (Step 2).

All randomness comes from one ``numpy.random.Generator`` seeded from
``TrainConfig.seed`` and consumed in a fixed order, so a run is
reproducible bit for bit on the same machine and kernel backend.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .diffcore import Adam, ConfigError, NonFiniteError, Tape
from .graph import BinaryDag, acyclicity_h, extract_adjacency, threshold, trace_expm_minus_d
from .losses import (
    LossBreakdown,
    LossWeights,
    compose_step1_loss,
    kld_loss,
    median_bandwidth,
    mmd_loss,
    mse_loss,
    nll_loss,
    pnl_loss,
    wgan_generator_loss,
    wgan_gp_critic_loss,
)
from .models import (
    Assumption,
    Critic,
    FcmModel,
    fcm_forward,
    g_inverse_forward,
    generate,
    generation_levels,
    transfer_weights,
)
from .semgen import Dataset

log = logging.getLogger("dagaf.trainer")


class TrainingAborted(RuntimeError):
    """Training produced non-finite values twice in a row."""


@dataclass
class TrainConfig:
    assumption: str = "anm"
    seed: int = 0
    # optimisation
    lr: float = 3e-3
    weight_decay: float = 1e-6
    gen_weight_decay: float = 0.0
    batch_size: int = 1000
    epochs: int = 300
    step2_epochs: int = -1  # -1: same as epochs
    n_critic_step1: int = 1
    n_critic_step2: int = 5
    step2_beta1: float = 0.5  # Adam betas for both Step-2 optimizers
    step2_beta2: float = 0.9
    # augmented Lagrangian
    k_max_iter: int = 100
    c_init: float = 1.0
    rho_mult: float = 10.0
    c_max: float = 1e20
    h_tol: float = 1e-8
    progress_ratio: float = 0.25
    # architecture
    latent_h: int = 10
    critic_hidden: tuple = (64, 64)
    dropout: float = 0.5
    z_size: int = 1
    threshold_tau: float = 0.3
    # loss weights
    w_adv: float = 1.0
    w_mse: float = 1.0
    w_kld: float = 0.1
    w_mmd: float = 1.0
    w_pnl: float = 1.0
    gp: float = 10.0
    recon: str = "mse"
    mmd_bandwidth: float = 0.0  # 0: median heuristic on the training data
    l1: float = 0.01  # first-layer sparsity
    l2: float = 0.01  # ridge on FCM weights
    lr_decay_with_c: bool = True  # generator lr = lr / log10(c), clipped
    lr_min: float = 1e-4
    lr_max: float = 1e-2
    # behaviour flags
    absolute_progress_test: bool = False
    lambda_overwrite: bool = False
    interleaved: bool = False
    mmd_unbiased: bool = False
    standardize: bool = False
    run_step2: bool = True
    pnl_skip_g: bool = True  # Step-1 fit terms read f(X); g_net is trained in Step 2

    def __post_init__(self):
        self.assumption = Assumption(self.assumption).value
        if isinstance(self.critic_hidden, str):
            self.critic_hidden = tuple(int(v) for v in self.critic_hidden.split(",") if v.strip())
        self.critic_hidden = tuple(int(v) for v in self.critic_hidden)
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.threshold_tau < 0:
            raise ConfigError(f"threshold_tau must be non-negative, got {self.threshold_tau}")
        if not self.rho_mult > 1:
            raise ConfigError(f"rho_mult must exceed 1, got {self.rho_mult}")
        if not self.h_tol > 0:
            raise ConfigError(f"h_tol must be positive, got {self.h_tol}")
        if not 0 < self.progress_ratio < 1:
            raise ConfigError(f"progress_ratio must be in (0, 1), got {self.progress_ratio}")
        if not 0 < self.c_init <= self.c_max:
            raise ConfigError(f"need 0 < c_init <= c_max, got {self.c_init}, {self.c_max}")
        if self.k_max_iter < 1 or self.z_size < 1 or self.latent_h < 1:
            raise ConfigError("k_max_iter, z_size and latent_h must be positive")
        if not (0 <= self.step2_beta1 < 1 and 0 <= self.step2_beta2 < 1):
            raise ConfigError(f"Step-2 Adam betas must be in [0, 1), got {self.step2_beta1}, {self.step2_beta2}")
        if self.n_critic_step1 < 0 or self.n_critic_step2 < 0:
            raise ConfigError("critic step counts must be non-negative")
        self.loss_weights()  # validates the weights

    def loss_weights(self):
        w = LossWeights(self.w_adv, self.w_mse, self.w_kld, self.w_mmd, self.w_pnl, self.gp, self.recon)
        return w.for_assumption(self.assumption)

    @property
    def epochs_step2(self):
        return self.epochs if self.step2_epochs < 0 else self.step2_epochs

    @classmethod
    def from_mapping(cls, values):
        """Build from string-valued ``key=value`` settings, coercing types."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            default = known[key].default
            kwargs[key] = _coerce(key, raw, default)
        return cls(**kwargs)

    def replace(self, **changes):
        data = asdict(self)
        data.update(changes)
        return TrainConfig(**data)

    def as_dict(self):
        out = asdict(self)
        out["critic_hidden"] = list(self.critic_hidden)
        return out


def _coerce(key, raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(float(text)) if text.lower() not in ("inf",) else int(1e18)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key}") from None
    return text


@dataclass
class LagrangianState:
    outer_iter: int
    lam: float
    c: float
    h_current: float
    blocks: int


@dataclass
class TrainReport:
    adjacency: np.ndarray
    dag_edges: list
    cyclic_after_threshold: bool
    converged: bool
    termination: str
    h: float
    seed: int
    wallclock: float
    history: list = field(default_factory=list)
    loss_trace: list = field(default_factory=list)
    step2_trace: list = field(default_factory=list)
    aborts: int = 0
    config: dict = field(default_factory=dict)
    shd: dict | None = None
    stage: str = "discovery"

    def as_dict(self):
        out = {
            "schema": "dagaf-report/1",
            "kind": self.stage,
            "seed": self.seed,
            "config": self.config,
            "epochs": self.loss_trace,
            "lagrangian": [asdict(s) for s in self.history],
            "final_h": self.h,
            "converged": self.converged,
            "termination": self.termination,
            "cyclic_after_threshold": self.cyclic_after_threshold,
            "adjacency": self.adjacency.tolist(),
            "edges": [list(e) for e in self.dag_edges],
            "wallclock_s": self.wallclock,
            "aborts": self.aborts,
        }
        if self.step2_trace:
            out["step2_epochs"] = self.step2_trace
        if self.shd is not None:
            out["shd"] = self.shd
        return out

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2)


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _snapshot(params):
    return [p.value.copy() for p in params]


def _restore(params, snap):
    for p, v in zip(params, snap):
        p.value[...] = v


class Step1:
    """State of the structure-learning step."""

    def __init__(self, d, cfg, rng, bandwidth=1.0):
        self.cfg = cfg
        self.bandwidth = bandwidth
        self.weights = cfg.loss_weights()
        self.model = FcmModel(d, rng, cfg.latent_h, cfg.assumption, cfg.z_size)
        self.critic = Critic(d, rng, cfg.critic_hidden, cfg.dropout)
        gen = self.model.fcm_params()
        if self.model.pnl is not None:
            gen = gen + self.model.pnl.g_net.params()
        self.opt_gen = Adam(gen, cfg.lr, cfg.gen_weight_decay)
        self.opt_critic = Adam(self.critic.params(), cfg.lr, cfg.weight_decay)
        self.opt_ginv = None
        if self.model.pnl is not None:
            self.opt_ginv = Adam(self.model.pnl.g_inv.params(), cfg.lr, cfg.weight_decay)

    def all_params(self):
        ps = self.model.fcm_params() + self.critic.params()
        if self.model.pnl is not None:
            ps += self.model.pnl.g_net.params() + self.model.pnl.g_inv.params()
        return ps

    def optimizers(self):
        return [o for o in (self.opt_gen, self.opt_critic, self.opt_ginv) if o is not None]

    def h(self):
        return acyclicity_h(extract_adjacency(self.model))

    def critic_step(self, xb, rng):
        tape = Tape()
        fake = fcm_forward(self.model, xb, tape, apply_g=not self.cfg.pnl_skip_g).value
        tape = Tape()
        loss = wgan_gp_critic_loss(self.critic, xb, fake, self.weights.gp, rng, tape)
        tape.backward(loss)
        self.opt_critic.step()
        self.opt_critic.zero_grad()
        return float(loss.value)

    def generator_step(self, xb, lam, c, rng):
        w = self.weights
        tape = Tape()
        f_out = fcm_forward(self.model, xb, tape)
        pnl = self.model.pnl
        fake = f_out
        if pnl is not None and not self.cfg.pnl_skip_g:
            fake = pnl.g_net.forward(f_out, tape)
        parts = {}
        if w.adv:
            parts["adv"] = wgan_generator_loss(self.critic, fake, tape, rng)
        if w.mse:
            parts["recon"] = (nll_loss if w.recon == "nll" else mse_loss)(tape.const(xb), fake)
        if w.kld:
            parts["kld"] = kld_loss(fake)
        if w.mmd:
            parts["mmd"] = mmd_loss(tape.const(xb), fake, self.bandwidth, self.cfg.mmd_unbiased)
        if pnl is not None and w.pnl:
            # standardizing g^-1(X) pins the otherwise free latent scale
            latent = dc.col_standardize(g_inverse_forward(self.model, xb, tape))
            parts["pnl"] = pnl_loss(latent, f_out)
        # h(A) with A*A = squared first-layer column norms
        w0 = self.model.first_layer_var(tape)
        h = trace_expm_minus_d(dc.vsum(dc.square(w0), axis=1))
        total = compose_step1_loss(parts, w, lam, c, h)
        total = dc.add(total, self.penalty(tape, w0))
        tape.backward(total)
        self.opt_gen.step()
        self.opt_gen.zero_grad()
        if self.opt_ginv is not None:
            self.opt_ginv.step()
            self.opt_ginv.zero_grad()
        hv = float(h.value)
        out = LossBreakdown(h=hv, acyc_penalty=0.5 * c * hv * hv + lam * hv, total=float(total.value))
        for name, var in parts.items():
            setattr(out, "mse" if name == "recon" else name, float(var.value))
        return out

    def penalty(self, tape, w0):
        """L1 on the first layer (via its non-negative parts) + L2 on all FCM weights."""
        cfg, m = self.cfg, self.model
        total = tape.const(0.0)
        if cfg.l1:
            mask = m.self_mask
            l1 = dc.add(dc.vsum(dc.mul(tape.param(m.l0_pos), mask)),
                        dc.vsum(dc.mul(tape.param(m.l0_neg), mask)))
            total = dc.add(total, dc.mul(l1, cfg.l1))
        if cfg.l2:
            sq = dc.add(dc.vsum(dc.square(w0)), dc.vsum(dc.square(tape.param(m.out_w))))
            total = dc.add(total, dc.mul(sq, 0.5 * cfg.l2))
        return total

    def train_epoch(self, x, lam, c, rng):
        sums = {}
        count = 0
        for idx in _batches(x.shape[0], self.cfg.batch_size, rng):
            xb = x[idx]
            crit = 0.0
            for _ in range(self.cfg.n_critic_step1):
                crit = self.critic_step(xb, rng)
            br = self.generator_step(xb, lam, c, rng)
            br.critic = crit
            for k, v in br.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
        return {k: v / max(count, 1) for k, v in sums.items()}


class Step2:
    """State of the synthesis step: a fresh FCM with the first layer frozen."""

    def __init__(self, step1_model, cfg, rng):
        self.cfg = cfg
        d = step1_model.d
        self.model = FcmModel(d, rng, cfg.latent_h, cfg.assumption, cfg.z_size)
        self.critic = Critic(d, rng, cfg.critic_hidden, cfg.dropout)
        self.sync(step1_model)
        trainable = self.model.hidden_params() + [self.model.noise_scale]
        if self.model.pnl is not None:
            trainable += self.model.pnl.g_net.params()
        betas = (cfg.step2_beta1, cfg.step2_beta2)
        self.opt_gen = Adam(trainable, cfg.lr, cfg.gen_weight_decay, betas)
        self.opt_critic = Adam(self.critic.params(), cfg.lr, cfg.weight_decay, betas)

    def sync(self, step1_model):
        """Load the first layer and the thresholded structure from Step 1."""
        transfer_weights(step1_model, self.model)
        dag = threshold(extract_adjacency(step1_model), self.cfg.threshold_tau)
        self.model.structure_mask = dag.to_matrix()
        self.levels = generation_levels(self.model)

    def noise(self, n, rng):
        return rng.standard_normal((n, self.model.d, self.model.z_size))

    def train_epoch(self, x, rng):
        sums = {"critic": 0.0, "adv": 0.0}
        count = 0
        gp = self.cfg.gp
        for idx in _batches(x.shape[0], self.cfg.batch_size, rng):
            xb = x[idx]
            b = xb.shape[0]
            crit = 0.0
            for _ in range(self.cfg.n_critic_step2):
                tape = Tape()
                fake = generate(self.model, self.noise(b, rng), tape, self.levels).value
                tape = Tape()
                loss = wgan_gp_critic_loss(self.critic, xb, fake, gp, rng, tape)
                tape.backward(loss)
                self.opt_critic.step()
                self.opt_critic.zero_grad()
                crit = float(loss.value)
            tape = Tape()
            fake = generate(self.model, self.noise(b, rng), tape, self.levels)
            loss = wgan_generator_loss(self.critic, fake, tape, rng)
            tape.backward(loss)
            self.opt_gen.step()
            self.opt_gen.zero_grad()
            sums["critic"] += crit
            sums["adv"] += float(loss.value)
            count += 1
        return {k: v / max(count, 1) for k, v in sums.items()}


def _prepare(data, cfg):
    x = data.values if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError(f"data must be 2-D, got shape {x.shape}")
    if cfg.batch_size > x.shape[0]:
        log.info("batch_size %d exceeds n=%d; using full-batch updates", cfg.batch_size, x.shape[0])
    if x.shape[1] < 2:
        raise ConfigError(f"need at least 2 variables, got d={x.shape[1]}")
    if x.shape[0] < 2:
        raise ConfigError(f"need at least 2 samples, got n={x.shape[0]}")
    if not np.isfinite(x).all():
        raise ConfigError("data contains NaN or Inf")
    if cfg.standardize:
        sd = x.std(axis=0)
        x = (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    return x


def generator_lr(cfg, c):
    """Step-1 generator learning rate for penalty coefficient ``c``.

    With ``lr_decay_with_c`` the rate is ``lr / log10(c)`` clipped to
    ``[lr_min, lr_max]``, so Adam's steps shrink as the constraint stiffens.
    """
    if not cfg.lr_decay_with_c:
        return cfg.lr
    scale = math.log10(c) if c > 1 else 0.0
    rate = cfg.lr / scale if scale > 0 else cfg.lr_max
    return min(max(rate, cfg.lr_min), cfg.lr_max)


def run_step1(data, cfg, rng=None):
    """Structure learning. Returns ``(model, report)``."""
    s1, report = fit_step1(data, cfg, rng)
    return s1.model, report


def fit_step1(data, cfg, rng=None, on_epoch=None):
    """Structure learning. Returns ``(step1_state, report)`` where the state
    also holds the critic and optimizers.

    ``on_epoch(step1, epoch)`` is called after every epoch (used by the
    interleaved schedule).
    """
    x = _prepare(data, cfg)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    started = time.perf_counter()
    # median heuristic, computed once on (at most) the first 2000 rows
    bandwidth = cfg.mmd_bandwidth or median_bandwidth(x[:2000])
    s1 = Step1(x.shape[1], cfg, rng, bandwidth)
    params = s1.all_params()
    lam, c = 0.0, cfg.c_init
    h_prev = math.inf
    history, trace = [], []
    termination = "k_max_iter"
    aborts = 0
    epoch_count = 0
    h_new = s1.h()

    def block():
        nonlocal epoch_count, aborts
        s1.opt_gen.lr = generator_lr(cfg, c)
        snap = _snapshot(params)
        for _ in range(cfg.epochs):
            try:
                stats = s1.train_epoch(x, lam, c, rng)
            except NonFiniteError as exc:
                aborts += 1
                _restore(params, snap)
                for opt in s1.optimizers():
                    opt.zero_grad()
                log.warning("non-finite value (%s); restored last epoch", exc)
                return False
            snap = _snapshot(params)
            stats.update(epoch=epoch_count, c=c, lam=lam)
            trace.append(stats)
            log.info("epoch %d c=%.3g lam=%.3g h=%.3e total=%.5g", epoch_count, c, lam,
                     stats["h"], stats["total"])
            if on_epoch is not None:
                on_epoch(s1, epoch_count)
            epoch_count += 1
        return True

    for k in range(cfg.k_max_iter):
        blocks = 0
        while c < cfg.c_max:
            ok = block()
            blocks += 1
            if not ok:
                if aborts > 1:
                    raise TrainingAborted(
                        f"non-finite values persisted after escalating c to {c:g}")
                c *= cfg.rho_mult
                continue
            h_new = s1.h()
            bound = cfg.progress_ratio if cfg.absolute_progress_test else cfg.progress_ratio * h_prev
            if h_new > bound:
                c *= cfg.rho_mult
            else:
                break
        h_prev = h_new
        lam = c * h_new if cfg.lambda_overwrite else lam + c * h_new
        history.append(LagrangianState(k, lam, c, h_new, blocks))
        log.info("outer iteration %d: h=%.3e c=%.3g lam=%.3g", k, h_new, c, lam)
        if h_new <= cfg.h_tol:
            termination = "h_tol"
            break
        if c >= cfg.c_max:
            termination = "c_max"
            break
    adj = extract_adjacency(s1.model)
    dag = threshold(adj, cfg.threshold_tau)
    report = TrainReport(
        adjacency=adj, dag_edges=sorted(dag.edges), cyclic_after_threshold=not dag.is_acyclic(),
        converged=termination == "h_tol", termination=termination, h=h_new, seed=cfg.seed,
        wallclock=time.perf_counter() - started, history=history, loss_trace=trace,
        aborts=aborts, config=cfg.as_dict(),
    )
    return s1, report


def run_step2(step1_model, data, cfg, rng=None):
    """Adversarial synthesis training on top of a learned structure.

    Returns ``(model, critic, report)``; the report's epoch trace holds the
    Step-2 losses.
    """
    s2, report = fit_step2(step1_model, data, cfg, rng)
    return s2.model, s2.critic, report


def fit_step2(step1_model, data, cfg, rng=None):
    x = _prepare(data, cfg)
    rng = np.random.default_rng(cfg.seed + 1) if rng is None else rng
    started = time.perf_counter()
    s2 = Step2(step1_model, cfg, rng)
    trace = []
    for epoch in range(cfg.epochs_step2):
        stats = s2.train_epoch(x, rng)
        stats["epoch"] = epoch
        trace.append(stats)
        log.info("synthesis epoch %d critic=%.5g adv=%.5g", epoch, stats["critic"], stats["adv"])
    adj = extract_adjacency(s2.model)
    dag = BinaryDag.from_matrix(s2.model.structure_mask * (1.0 - np.eye(s2.model.d)))
    report = TrainReport(
        adjacency=adj, dag_edges=sorted(dag.edges), cyclic_after_threshold=not dag.is_acyclic(),
        converged=True, termination="epochs", h=acyclicity_h(adj), seed=cfg.seed,
        wallclock=time.perf_counter() - started, loss_trace=trace, config=cfg.as_dict(),
        stage="synthesis",
    )
    return s2, report


def run_interleaved(data, cfg, rng=None):
    """Alternate one Step-1 epoch and one Step-2 epoch, re-transferring the
    first layer before every Step-2 epoch."""
    x = _prepare(data, cfg)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    holder = {}

    def after_epoch(s1, epoch):
        if "s2" not in holder:
            holder["s2"] = Step2(s1.model, cfg, rng)
        else:
            holder["s2"].sync(s1.model)
        stats = holder["s2"].train_epoch(x, rng)
        stats["epoch"] = epoch
        holder.setdefault("trace", []).append(stats)

    s1, report = fit_step1(x, cfg.replace(standardize=False), rng, on_epoch=after_epoch)
    s2 = holder.get("s2") or Step2(s1.model, cfg, rng)
    s2.sync(s1.model)
    report.step2_trace = holder.get("trace", [])
    return s1, s2, report


def discover(data, cfg):
    """Full pipeline for one dataset: Step 1, then (optionally) Step 2.

    Returns ``(step1, step2_or_None, report)``.
    """
    rng = np.random.default_rng(cfg.seed)
    if cfg.interleaved:
        return run_interleaved(data, cfg, rng)
    s1, report = fit_step1(data, cfg, rng)
    s2 = None
    if cfg.run_step2:
        s2, rep2 = fit_step2(s1.model, data, cfg, rng)
        report.step2_trace = rep2.loss_trace
    return s1, s2, report


def synthesize(model, n, rng, levels=None, columns=None):
    """Draw ``n`` rows from a Step-2 model by ancestral sampling.

    If the stored structure is cyclic, every node is refreshed together
    ``d`` times instead; :func:`structure_is_cyclic` reports that case.
    """
    if n < 0:
        raise ConfigError(f"n must be non-negative, got {n}")
    columns = list(columns) if columns is not None else [f"x{i + 1}" for i in range(model.d)]
    if len(columns) != model.d:
        raise ConfigError(f"got {len(columns)} column names for d={model.d}")
    if n == 0:
        return Dataset(np.zeros((0, model.d)), columns)
    z = rng.standard_normal((n, model.d, model.z_size))
    tape = Tape()
    out = generate(model, z, tape, levels)
    return Dataset(out.value, columns)


def structure_is_cyclic(model):
    return not BinaryDag.from_matrix(model.structure_mask * (1.0 - np.eye(model.d))).is_acyclic()
