"""Self-check suite behind ``sicl verify``: oracle equality, gradient checks, reduction identities."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import losses, oracles
from . import numerics as nx
from .losses import EmbeddingBatch
from .model import forward, init_encoder
from .numerics import Tape
from .synthgen import WorldSpec, generate

log = logging.getLogger(__name__)

SIZES = (8, 16, 32)
DIMS = (4, 8, 32)


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tol: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: worst={self.worst:.3e} tol={self.tol:.0e} ({self.seconds:.1f}s) {self.detail}"


def unit_rows(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def random_two_view(rng, n=None, d=None, groups=None):
    """Two-view batch with random subjects and labels assigned per pair (so every label has >= 2 members)."""
    n = n or int(rng.choice(SIZES))
    d = d or int(rng.choice(DIMS))
    groups = groups or int(rng.integers(2, 7))
    b = n // 2
    subj = rng.integers(0, groups, size=b)
    lab = rng.integers(0, groups, size=b)
    return EmbeddingBatch.two_view(unit_rows(rng, b, d), unit_rows(rng, b, d), subj, lab)


def random_aligned(rng, n=None, d=None, groups=None):
    n = n or int(rng.choice(SIZES))
    d = d or int(rng.choice(DIMS))
    groups = groups or int(rng.integers(2, 7))
    subj = rng.integers(0, groups, size=n)
    return EmbeddingBatch(unit_rows(rng, n, d), subj), EmbeddingBatch(unit_rows(rng, n, d), subj)


def oracle_value(name, batch, tau, batch_m=None, q=None):
    if name == "nce":
        return oracles.nce(batch.z, batch.view_of, tau)
    if name == "sicl":
        return oracles.sicl(batch.z, batch.view_of, batch.subject_ids, tau, q)
    if name == "supcon":
        return oracles.supcon(batch.z, batch.labels, tau)
    if name == "si_supcon":
        return oracles.si_supcon(batch.z, batch.labels, batch.subject_ids, tau, q)
    if name == "cmc":
        return oracles.cmc(batch.z, batch_m.z, tau)
    if name == "si_cmc":
        return oracles.si_cmc(batch.z, batch_m.z, batch.subject_ids, tau, q)
    raise KeyError(name)


def _random_for(name, rng):
    if name in losses.MULTIMODAL:
        return random_aligned(rng)
    return random_two_view(rng), None


def _timed(fn):
    def wrapper(*a, **kw):
        t0 = time.perf_counter()
        res = fn(*a, **kw)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def check_oracles(name: str, n_batches: int = 100, tol: float = 1e-10, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, losses.LOSSES.index(name)])
    worst = 0.0
    for _ in range(n_batches):
        tau = float(rng.choice([0.1, 0.5, 1.0]))
        b, bm = _random_for(name, rng)
        got = losses.compute(name, b, tau, bm).value
        worst = max(worst, abs(got - oracle_value(name, b, tau, bm)))
    return CheckResult(f"oracle/{name}", worst < tol, worst, tol, 0.0, f"{n_batches} batches")


def loss_fn_with_fixed_q(name, batch, tau, batch_m=None):
    """Scalar loss as a function of the (flattened) embeddings with Q frozen at its current value."""
    res = losses.compute(name, batch, tau, batch_m)
    if name in ("sicl", "si_supcon"):
        q = res.q
        fn = losses.sicl_loss if name == "sicl" else losses.si_supcon_loss
        return res, lambda z: fn(batch.with_z(z), tau, q_override=q).value
    if name == "si_cmc":
        n = len(batch)
        q = (res.q[:n], res.q[n:])
        return res, lambda zz: losses.si_cmc_loss(batch.with_z(zz[:n]), batch_m.with_z(zz[n:]), tau,
                                                  q_override=q).value
    if name == "cmc":
        n = len(batch)
        return res, lambda zz: losses.cmc_loss(batch.with_z(zz[:n]), batch_m.with_z(zz[n:]), tau).value
    fn = losses.UNIMODAL_FNS[name]
    return res, lambda z: fn(batch.with_z(z), tau).value


@_timed
def check_loss_gradients(name: str, seeds: int = 20, eps: float = 1e-6, tol: float = 1e-5) -> CheckResult:
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng([s, 77, losses.LOSSES.index(name)])
        tau = float(rng.choice([0.2, 0.5, 1.0]))
        if name in losses.MULTIMODAL:
            b, bm = random_aligned(rng, n=8, d=4)
        else:
            b, bm = random_two_view(rng, n=8, d=4), None
        res, f = loss_fn_with_fixed_q(name, b, tau, bm)
        if bm is None:
            analytic, x0 = res.grad_z, b.z
        else:
            analytic, x0 = np.concatenate([res.grad_z, res.grad_z_m]), np.concatenate([b.z, bm.z])
        worst = max(worst, nx.rel_error(analytic, nx.numeric_grad(f, x0, eps)))
    return CheckResult(f"grad/{name}", worst < tol, worst, tol, 0.0, f"{seeds} batches, eps={eps:g}")


def _relu_pattern(params, x):
    tape = Tape()
    forward(params, x, tape)
    return [node.value > 0 for node in tape.nodes if node.op == "relu"]


def _same_pattern(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def encoder_gradient_error(seed: int, eps: float = 1e-6, coords_per_tensor: int = 8,
                           channels: int = 2, length: int = 20, tau: float = 0.5) -> float:
    """Worst norm-wise relative error over parameter tensors for the NCE loss pulled through the encoder.

    Coordinates whose +/- eps perturbation flips any ReLU gate are skipped: the
    loss is not differentiable across a gate flip and the difference quotient is
    meaningless there.
    """
    rng = np.random.default_rng([seed, 4242])
    params = init_encoder(channels, rng)
    x = rng.standard_normal((4, channels, length))

    def loss_of(p):
        _, z, _ = forward(p, x)
        return losses.nce_loss(EmbeddingBatch(z.data, view_of=[2, 3, 0, 1], check_norm=False), tau)

    tape = Tape()
    _, z, leaves = forward(params, x, tape)
    res = losses.nce_loss(EmbeddingBatch(z.data, view_of=[2, 3, 0, 1]), tau)
    g = nx.backward(tape, nx.sum(nx.mul(z, res.grad_z)))
    base = _relu_pattern(params, x)

    worst = 0.0
    for name, leaf in leaves.items():
        arr = params.tensors[name]
        picked, analytic, numeric = 0, [], []
        for idx in rng.permutation(arr.size):
            if picked == coords_per_tensor:
                break
            vals = []
            ok = True
            for sign in (1, -1):
                p = params.copy()
                p.tensors[name].reshape(-1)[idx] += sign * eps
                if not _same_pattern(base, _relu_pattern(p, x)):
                    ok = False
                    break
                vals.append(loss_of(p).value)
            if not ok:
                continue
            picked += 1
            analytic.append(g[leaf.node].reshape(-1)[idx])
            numeric.append((vals[0] - vals[1]) / (2 * eps))
        worst = max(worst, nx.rel_error(analytic, numeric))
    return worst


@_timed
def check_encoder_gradients(seeds: int = 20, eps: float = 1e-6, tol: float = 1e-4) -> CheckResult:
    worst = max(encoder_gradient_error(s, eps) for s in range(seeds))
    return CheckResult("grad/encoder", worst < tol, worst, tol, 0.0, f"{seeds} seeds, T=20, 2 channels")


def reduction_gaps(n_batches: int = 20, seed: int = 0) -> dict[str, float]:
    """Largest absolute difference for every reduction identity over random batches."""
    rng = np.random.default_rng([seed, 99])
    gaps = dict.fromkeys(["sicl=nce|Q=1", "si_supcon=supcon|Q=1", "si_cmc=cmc|Q=1",
                          "supcon=nce|singleton", "sicl=nce|one subject", "sicl=nce|unique subjects",
                          "si_supcon=supcon|unique subjects", "si_cmc=cmc|unique subjects"], 0.0)

    def bump(key, a, b):
        gaps[key] = max(gaps[key], abs(a - b))

    for _ in range(n_batches):
        tau = float(rng.choice([0.1, 0.5, 1.0]))
        b = random_two_view(rng)
        n = len(b)
        bump("sicl=nce|Q=1", losses.sicl_loss(b, tau, q_override=1.0).value, losses.nce_loss(b, tau).value)
        bump("si_supcon=supcon|Q=1", losses.si_supcon_loss(b, tau, q_override=1.0).value,
             losses.supcon_loss(b, tau).value)
        pairs = EmbeddingBatch(b.z, b.subject_ids, np.concatenate([np.arange(n // 2)] * 2), b.view_of)
        bump("supcon=nce|singleton", losses.supcon_loss(pairs, tau).value, losses.nce_loss(pairs, tau).value)
        one = EmbeddingBatch(b.z, np.zeros(n, dtype=int), b.labels, b.view_of)
        bump("sicl=nce|one subject", losses.sicl_loss(one, tau).value, losses.nce_loss(one, tau).value)
        uniq = EmbeddingBatch(b.z, np.arange(n), b.labels, b.view_of)
        bump("sicl=nce|unique subjects", losses.sicl_loss(uniq, tau).value, losses.nce_loss(uniq, tau).value)
        bump("si_supcon=supcon|unique subjects", losses.si_supcon_loss(uniq, tau).value,
             losses.supcon_loss(uniq, tau).value)
        bk, bm = random_aligned(rng)
        bump("si_cmc=cmc|Q=1", losses.si_cmc_loss(bk, bm, tau, q_override=1.0).value,
             losses.cmc_loss(bk, bm, tau).value)
        m = len(bk)
        uk = EmbeddingBatch(bk.z, np.arange(m))
        um = EmbeddingBatch(bm.z, np.arange(m))
        bump("si_cmc=cmc|unique subjects", losses.si_cmc_loss(uk, um, tau).value,
             losses.cmc_loss(uk, um, tau).value)
    return gaps


@_timed
def check_reductions(tol: float = 1e-12) -> CheckResult:
    gaps = reduction_gaps()
    worst = max(gaps.values())
    bad = [k for k, v in gaps.items() if v >= tol]
    return CheckResult("reductions", not bad, worst, tol, 0.0, f"failing: {bad}" if bad else f"{len(gaps)} identities")


@_timed
def check_dataset_determinism() -> CheckResult:
    spec = WorldSpec(num_subjects=3, num_activities=2, windows_per_pair=2)
    a, b = generate(spec), generate(spec)
    same = len(a) == len(b) and all(
        x.values.tobytes() == y.values.tobytes() and (x.subject_id, x.activity_id, x.modality)
        == (y.subject_id, y.activity_id, y.modality) for x, y in zip(a, b))
    return CheckResult("dataset/determinism", same, 0.0 if same else 1.0, 0.0, 0.0, f"{len(a)} windows")


@_timed
def check_primitive_gradients(seeds: int = 20, tol: float = 1e-4) -> CheckResult:
    ops = {
        "relu": lambda t: nx.relu(t), "exp": lambda t: nx.exp(t),
        "log": lambda t: nx.log(nx.add(nx.mul(t, t), 1.0)),
        "softmax": lambda t: nx.softmax(t, axis=1), "log_softmax": lambda t: nx.log_softmax(t, axis=1),
        "l2_normalize": lambda t: nx.l2_normalize(t, axis=1), "mean": lambda t: nx.mean(t, axis=0),
        "transpose": lambda t: nx.transpose(t),
        "matmul": lambda t: nx.matmul(t, nx.transpose(t)),
        "conv1d": lambda t: nx.conv1d(nx.reshape(t, (1, 3, 4)), np.ones((2, 3, 2))),
        "gap": lambda t: nx.global_avg_pool(t),
    }
    worst = 0.0
    for name, op in ops.items():
        for s in range(seeds):
            rng = np.random.default_rng([s, 5])
            x = rng.standard_normal((3, 4))
            c = rng.standard_normal(op(nx.Tensor(x)).shape)
            tape = Tape()
            xt = tape.watch(x)
            (g,) = nx.grad(nx.sum(nx.mul(op(xt), c)), xt)
            fd = nx.numeric_grad(lambda v: float((op(nx.Tensor(v)).data * c).sum()), x)
            worst = max(worst, nx.rel_error(g, fd))
    return CheckResult("grad/primitives", worst < tol, worst, tol, 0.0, f"{len(ops)} ops x {seeds} seeds")


def run_all(quick: bool = False) -> list[CheckResult]:
    n = 20 if quick else 100
    seeds = 5 if quick else 20
    results = [check_primitive_gradients(seeds)]
    results += [check_oracles(name, n) for name in losses.LOSSES]
    results += [check_loss_gradients(name, seeds) for name in losses.LOSSES]
    results.append(check_encoder_gradients(seeds))
    results.append(check_reductions())
    results.append(check_dataset_determinism())
    return results
