"""Losses, the Adam update, schedules, and the two training recipes.

Likelihood training drives the density direction on data orientations with
fresh Gaussian auxiliaries per batch; reverse-KL training drives the sampling
direction from base-temperature frames toward a colder target, and its loss
is the mean generalized work of the mapped batch, so it approaches the
free-energy difference from above as the map improves.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import coupling as cp
from . import estimators as est
from .autodiff import value_of
from .coupling import FlowState
from .errors import ValidationError


def nll_loss(stack, q_batch, rng, pv=None):
    """Mean negative log-density of data rotations with fresh auxiliaries.

    The auxiliary draw makes this a stochastic upper bound (up to an additive
    constant) on the marginal rotation NLL; its gradient is unbiased.
    """
    q = np.asarray(q_batch, dtype=np.float64)
    if q.ndim == 2:
        q = q[:, None, :]
    z = rng.standard_normal((q.shape[0], stack.base.aux_dim))
    state = FlowState(q=q, aux=z)
    logp = cp.log_density_state(stack, state, pv=pv)
    return ad.mul(-1.0, ad.mean(logp))


def rkl_loss(stack, state, u_target, log_p0_vals, pv=None):
    """Reverse-KL surrogate mean[u1(Phi(z)) - logdet + log p0(z)].

    With log p0 = -u0 on data frames this equals the mean generalized work of
    the batch; the log_p0 term carries no parameter dependence.
    """
    out, ld = stack.forward(state, pv)
    u1 = u_target(out)
    return ad.mean(ad.add(ad.sub(u1, ld), np.asarray(log_p0_vals, dtype=np.float64)))


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamState:
    """First and second moment accumulators, keyed like the parameter store."""

    def __init__(self, params):
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update; bias correction makes the first step size lr."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for k in params:
        g = grads[k]
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + eps)


def cosine_lr(step, total_steps, lr_start=1e-3, lr_end=1e-5):
    """Half-cosine decay from lr_start at step 0 to lr_end at step total_steps."""
    if total_steps < 1:
        raise ValidationError("cosine schedule needs at least one step")
    x = min(max(step / total_steps, 0.0), 1.0)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + np.cos(np.pi * x))


# ---------------------------------------------------------------------------
# logs


@dataclass
class TrainLog:
    """Per-step series plus per-epoch evaluation rows.

    Wall-clock timing is printed to the console only and never stored, so
    persisted artifacts depend on (config, seed) alone.
    """

    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def record(self, loss, lr, grad_norm):
        self.loss.append(float(loss))
        self.lr.append(float(lr))
        self.grad_norm.append(float(grad_norm))

    def to_dict(self):
        return {
            "loss": list(self.loss),
            "lr": list(self.lr),
            "grad_norm": list(self.grad_norm),
            "epochs": [dict(e) for e in self.epochs],
        }


def _grad_norm(grads):
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def _backward_grads(stack, pv, loss):
    loss.backward()
    return {k: pv[k].grad for k in stack.params}


# ---------------------------------------------------------------------------
# recipes


def train_tetra_nll(stack, q_data, steps=5000, batch_size=32, lr=5e-4, seed=0, quiet=True, print_every=500):
    """Likelihood training of the single-body flow on data rotations.

    Constant learning rate; the analytic leg of every rotation layer faces
    the density direction, so no iterative inverse runs during training.
    """
    q_data = np.asarray(q_data, dtype=np.float64)
    if q_data.ndim != 2 or q_data.shape[1] != 4:
        raise ValidationError("tetra training data must be rotations of shape (M, 4)")
    if steps < 1 or batch_size < 1:
        raise ValidationError("steps and batch_size must be positive")
    rng = np.random.default_rng(seed)
    opt = AdamState(stack.params)
    log = TrainLog()
    clock = _Clock(quiet)
    for step in range(steps):
        idx = rng.integers(0, q_data.shape[0], size=batch_size)
        pv = stack.var_view()
        loss = nll_loss(stack, q_data[idx], rng, pv=pv)
        grads = _backward_grads(stack, pv, loss)
        adam_step(stack.params, grads, opt, lr)
        log.record(value_of(loss), lr, _grad_norm(grads))
        clock.tick(step, steps, print_every, log)
    stack.meta.setdefault("seed_lineage", []).append({"stage": "train-nll", "seed": int(seed)})
    return log


def nll_eval(stack, q_data, seed=0, chunk=1024):
    """Deterministic mean NLL over a whole dataset (one auxiliary draw each)."""
    q_data = np.asarray(q_data, dtype=np.float64)
    rng = np.random.default_rng(seed)
    total = 0.0
    for lo in range(0, q_data.shape[0], chunk):
        q = q_data[lo : lo + chunk]
        z = rng.standard_normal((q.shape[0], stack.base.aux_dim))
        state = FlowState(q=q[:, None, :], aux=z)
        logp = value_of(cp.log_density_state(stack, state))
        total += float(np.sum(-logp))
    return total / q_data.shape[0]


def _frame_digests(ds):
    flat = np.concatenate([ds.x0, ds.q], axis=-1)
    return {hashlib.sha256(np.ascontiguousarray(row).tobytes()).hexdigest() for row in flat}


def assert_disjoint(train_ds, eval_ds):
    """Refuse train/eval halves that share any identical frame."""
    shared = _frame_digests(train_ds) & _frame_digests(eval_ds)
    if shared:
        raise ValidationError(f"train and eval datasets share {len(shared)} identical frames")


def crystal_work(stack, frames_x0, frames_q, u_base, u_target, chunk=256):
    """Generalized work of dataset frames pushed through the stack (no tape)."""
    works = []
    for lo in range(0, frames_x0.shape[0], chunk):
        state = FlowState(q=frames_q[lo : lo + chunk], x0=frames_x0[lo : lo + chunk])
        out, ld = stack.forward(state)
        u1 = value_of(u_target(out))
        u0 = value_of(u_base(state))
        works.append(est.generalized_work(u0, u1, value_of(ld)))
    return np.concatenate(works)


def train_crystal_rkl(
    stack,
    train_ds,
    eval_ds,
    u_base,
    u_target,
    epochs=10,
    steps_per_epoch=1000,
    batch_size=32,
    lr_start=1e-3,
    lr_end=1e-5,
    seed=0,
    quiet=True,
    print_every=200,
):
    """Reverse-KL training from base-temperature frames toward the target state.

    `u_base`/`u_target` map a FlowState batch to reduced energies; the base
    energies of the input frames stand in for the (unnormalized) base
    log-density, so the loss is the batch mean generalized work. Each epoch
    ends with held-out work diagnostics (Kish ESS and the exponential-average
    estimate).
    """
    if epochs < 1 or steps_per_epoch < 1 or batch_size < 1:
        raise ValidationError("epochs, steps_per_epoch, and batch_size must be positive")
    assert_disjoint(train_ds, eval_ds)
    rng = np.random.default_rng(seed)
    opt = AdamState(stack.params)
    log = TrainLog()
    clock = _Clock(quiet)
    total_steps = epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        for _ in range(steps_per_epoch):
            idx = rng.integers(0, train_ds.n_frames, size=batch_size)
            state = FlowState(q=train_ds.q[idx], x0=train_ds.x0[idx])
            log_p0 = -value_of(u_base(state))
            pv = stack.var_view()
            loss = rkl_loss(stack, state, u_target, log_p0, pv=pv)
            grads = _backward_grads(stack, pv, loss)
            lr = cosine_lr(step, total_steps, lr_start, lr_end)
            adam_step(stack.params, grads, opt, lr)
            log.record(value_of(loss), lr, _grad_norm(grads))
            clock.tick(step, total_steps, print_every, log)
            step += 1
        work = crystal_work(stack, eval_ds.x0, eval_ds.q, u_base, u_target)
        lfep = est.lfep_estimate(work)
        row = {
            "epoch": epoch,
            "eval_delta_f": lfep.delta_f,
            "eval_mean_work": lfep.mean_work,
            "eval_kish_pct": est.kish_ess(-work, percentage=True),
            "train_mean_loss": float(np.mean(log.loss[-steps_per_epoch:])),
        }
        log.epochs.append(row)
        clock.epoch(row)
    stack.meta.setdefault("seed_lineage", []).append({"stage": "train-rkl", "seed": int(seed)})
    return log


class _Clock:
    """Console progress; wall-clock stays out of every persisted artifact."""

    def __init__(self, quiet):
        self.quiet = quiet
        if not quiet:
            import time

            self.start = time.perf_counter()

    def tick(self, step, total, every, log):
        if self.quiet or (step + 1) % every:
            return
        import time

        dt = time.perf_counter() - self.start
        print(
            f"step {step + 1}/{total}  loss {log.loss[-1]:.4f}  lr {log.lr[-1]:.2e}  "
            f"grad {log.grad_norm[-1]:.3e}  [{dt:.1f}s]",
            flush=True,
        )

    def epoch(self, row):
        if self.quiet:
            return
        print(
            f"epoch {row['epoch']}: eval dF {row['eval_delta_f']:.4f}  "
            f"mean work {row['eval_mean_work']:.4f}  kish {row['eval_kish_pct']:.1f}%",
            flush=True,
        )
