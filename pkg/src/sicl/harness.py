"""Pretraining, evaluation protocols and similarity analysis.

Randomness: every consumer draws from its own stream derived from the run seed
(see :func:`stream`), so changing e.g. the number of linear-eval epochs never
perturbs pretraining.
"""

from __future__ import annotations

import csv
import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import augment, losses
from . import numerics as nx
from .augment import AugmentationPolicy
from .errors import ContractError, TrainingDiverged
from .model import (H_DIM, EncoderParams, LinearHead, cross_entropy, encode_batch, forward,
                    head_forward, init_encoder, init_head)
from .numerics import Tape
from .optim import Adam
from .synthgen import CHANNELS, Modality, SensorWindow, WorldSpec, by_modality, generate, split

log = logging.getLogger(__name__)

HIST_BINS = 50


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the named consumer: SeedSequence(seed, spawn_key=(crc32(name),))."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),)))


# ---------------------------------------------------------------------------
# configuration and reports
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    loss: str = "nce"
    tau: float = 0.1
    lr: float = 0.001
    pretrain_epochs: int = 30
    linear_epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    world: WorldSpec = field(default_factory=WorldSpec)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    train_subjects: tuple = tuple(range(8))
    test_subjects: tuple = tuple(range(8, 12))
    finetune_lr: float | None = None  # encoder lr during finetuning; None -> lr
    max_pairs: int = 1_000_000

    def __post_init__(self):
        self.train_subjects = tuple(int(s) for s in self.train_subjects)
        self.test_subjects = tuple(int(s) for s in self.test_subjects)

    @classmethod
    def full_schedule(cls, **kw) -> "RunConfig":
        return cls(pretrain_epochs=300, linear_epochs=100, **kw)

    @property
    def multimodal(self) -> bool:
        return self.loss in losses.MULTIMODAL

    @property
    def supervised(self) -> bool:
        return self.loss in losses.SUPERVISED

    @property
    def modalities(self) -> tuple[Modality, ...]:
        return (Modality.INERTIAL, Modality.SECONDARY) if self.multimodal else (Modality.INERTIAL,)

    def validate(self) -> None:
        if self.loss not in losses.LOSSES:
            raise ContractError(f"unknown loss {self.loss!r}; expected one of {losses.LOSSES}")
        if self.tau <= 0:
            raise ContractError("tau must be > 0")
        if self.lr < 0 or (self.finetune_lr is not None and self.finetune_lr < 0):
            raise ContractError("learning rates must be >= 0")
        if self.pretrain_epochs < 1 or self.linear_epochs < 1:
            raise ContractError("epoch counts must be positive")
        if self.batch_size < 4:
            raise ContractError("batch_size must be >= 4")
        self.world.validate()
        tr, te = set(self.train_subjects), set(self.test_subjects)
        if tr & te:
            raise ContractError(f"train and test subjects overlap: {sorted(tr & te)}")
        known = set(range(self.world.num_subjects))
        if not (tr | te) <= known:
            raise ContractError(f"split names unknown subjects: {sorted((tr | te) - known)}")
        if not tr:
            raise ContractError("train subject set is empty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["world"] = self.world.to_dict()
        d["augmentation"] = self.augmentation.to_dict()
        d["train_subjects"] = list(self.train_subjects)
        d["test_subjects"] = list(self.test_subjects)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        if "world" in d:
            d["world"] = WorldSpec.from_dict(d["world"])
        if "augmentation" in d:
            d["augmentation"] = AugmentationPolicy.from_dict(d["augmentation"])
        return cls(**d)


@dataclass
class SimStats:
    mean_all: float
    std_all: float
    mean_intra_subject: float
    std_intra_subject: float
    gap: float
    bin_edges: list = field(default_factory=list)
    hist_all: list = field(default_factory=list)
    hist_intra: list = field(default_factory=list)
    n_all: int = 0
    n_intra: int = 0


@dataclass
class EvalReport:
    protocol: str
    per_class_accuracy: dict
    mean_class_accuracy: float
    sim_stats: SimStats | None
    config: dict
    wall_time: float
    tag: str = ""
    excluded_classes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_accuracy"] = {str(k): v for k, v in self.per_class_accuracy.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["per_class_accuracy"] = {int(k): v for k, v in d["per_class_accuracy"].items()}
        if d.get("sim_stats") is not None:
            d["sim_stats"] = SimStats(**d["sim_stats"])
        return cls(**d)


class ConsumptionAudit:
    """Record of every (modality, subject, session) a training step consumed."""

    def __init__(self, forbidden_subjects=()):
        self.forbidden = set(forbidden_subjects)
        self.consumed: set[tuple[str, int, int]] = set()
        self.counts: dict[str, int] = {}

    def record(self, stage: str, windows) -> None:
        for w in windows:
            self.consumed.add((w.modality.value, w.subject_id, w.session_id))
        self.counts[stage] = self.counts.get(stage, 0) + len(windows)

    def violations(self) -> list[tuple[str, int, int]]:
        return sorted(c for c in self.consumed if c[1] in self.forbidden)

    def check(self) -> None:
        bad = self.violations()
        if bad:
            raise ContractError(f"held-out subject windows consumed in training: {bad[:5]}")


@dataclass
class PretrainResult:
    encoders: dict
    loss_curve: list
    audit: ConsumptionAudit


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def _dataset(config: RunConfig, windows):
    return generate(config.world) if windows is None else windows


def _sessions(windows, modalities):
    """Session-aligned per-modality window lists (sessions missing a modality are dropped)."""
    table = {m: {w.session_id: w for w in by_modality(windows, m)} for m in modalities}
    ids = sorted(set.intersection(*(set(t) for t in table.values())))
    return {m: [table[m][s] for s in ids] for m in modalities}


def _stack(windows: list[SensorWindow]) -> np.ndarray:
    return np.stack([w.values for w in windows])


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 2):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= min_size:
            yield idx


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def _contrastive_step(config, encoders, views, subj, labels, tape):
    """Forward both views, evaluate the loss, return (value, grads keyed 'modality/param', z-stats)."""
    tau = config.tau
    outs = {}
    if config.multimodal:
        for m in config.modalities:
            _, z, leaves = forward(encoders[m], views[m], tape)
            outs[m] = (z, leaves)
        zk, zm = outs[Modality.INERTIAL][0], outs[Modality.SECONDARY][0]
        bk = losses.EmbeddingBatch(zk.data, subj)
        bm = losses.EmbeddingBatch(zm.data, subj)
        res = losses.compute(config.loss, bk, tau, bm)
        surrogate = nx.add(nx.sum(nx.mul(zk, res.grad_z)), nx.sum(nx.mul(zm, res.grad_z_m)))
    else:
        m = Modality.INERTIAL
        _, z, leaves = forward(encoders[m], views[m], tape)
        outs[m] = (z, leaves)
        b = len(subj)
        batch = losses.EmbeddingBatch.two_view(z.data[:b], z.data[b:], subj,
                                               labels if config.supervised else None)
        res = losses.compute(config.loss, batch, tau)
        surrogate = nx.sum(nx.mul(z, res.grad_z))
    g = nx.backward(tape, surrogate)
    grads = {}
    for m, (_, leaves) in outs.items():
        for name, leaf in leaves.items():
            grads[f"{m.value}/{name}"] = g.get(leaf.node, np.zeros(leaf.shape))
    return res.value, grads


def _sync(encoders: dict, flat: dict) -> None:
    for key, arr in flat.items():
        m, name = key.split("/", 1)
        encoders[Modality(m)].tensors[name] = arr


def pretrain(config: RunConfig, windows=None, audit: ConsumptionAudit | None = None) -> PretrainResult:
    """Train one encoder per modality with the configured contrastive loss on train subjects only."""
    config.validate()
    windows = _dataset(config, windows)
    train, _ = split(windows, config.train_subjects, config.test_subjects)
    sessions = _sessions(train, config.modalities)
    n = len(sessions[Modality.INERTIAL])
    if n < 2:
        raise ContractError("not enough training sessions")
    audit = audit or ConsumptionAudit(config.test_subjects)

    encoders = {m: init_encoder(CHANNELS[m], stream(config.seed, f"init/{m.value}"))
                for m in config.modalities}
    flat = {f"{m.value}/{k}": v for m, e in encoders.items() for k, v in e.tensors.items()}
    opt = Adam(flat, lr=config.lr)
    batch_rng = stream(config.seed, "pretrain/batches")
    aug_rng = np.random.default_rng(np.random.SeedSequence(
        [int(config.seed), int(config.augmentation.rng_seed)], spawn_key=(zlib.crc32(b"augment"),)))
    policy = config.augmentation
    subj_all = np.array([w.subject_id for w in sessions[Modality.INERTIAL]])
    lab_all = np.array([w.activity_id for w in sessions[Modality.INERTIAL]])

    curve = []
    for epoch in range(config.pretrain_epochs):
        vals = []
        for bidx, idx in enumerate(_batches(n, config.batch_size, batch_rng)):
            views = {}
            for m in config.modalities:
                chunk = [sessions[m][i] for i in idx]
                audit.record("pretrain", chunk)
                if config.multimodal:
                    views[m] = augment.augment_batch(policy, chunk, aug_rng)
                else:
                    views[m] = np.concatenate([augment.augment_batch(policy, chunk, aug_rng),
                                               augment.augment_batch(policy, chunk, aug_rng)])
            tape = Tape()
            value, grads = _contrastive_step(config, encoders, views, subj_all[idx], lab_all[idx], tape)
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                diag = {"epoch": epoch, "batch": bidx, "loss": value,
                        "grad_norms": {k: float(np.linalg.norm(g)) for k, g in grads.items()},
                        "subjects": subj_all[idx].tolist()}
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {bidx}", diag)
            opt.step(grads)
            _sync(encoders, opt.params)
            vals.append(value)
        curve.append(float(np.mean(vals)))
        log.debug("epoch %d loss %.4f", epoch, curve[-1])
    audit.check()
    return PretrainResult(encoders, curve, audit)


# ---------------------------------------------------------------------------
# linear heads
# ---------------------------------------------------------------------------

def fit_linear_head(features: np.ndarray, labels: np.ndarray, num_classes: int, epochs: int,
                    lr: float, batch_size: int, rng: np.random.Generator) -> LinearHead:
    """Softmax cross-entropy on fixed features with Adam minibatches."""
    head = init_head(num_classes, rng, features.shape[1])
    params = {"w": head.weight, "b": head.bias}
    opt = Adam(params, lr=lr)
    for _ in range(epochs):
        for idx in _batches(len(features), batch_size, rng, min_size=1):
            tape = Tape()
            w, b = tape.watch(params["w"]), tape.watch(params["b"])
            loss = cross_entropy(head_forward(w, b, nx.Tensor(features[idx])), labels[idx])
            g = nx.backward(tape, loss)
            opt.step({"w": g[w.node], "b": g[b.node]})
    return LinearHead(params["w"], params["b"])


def standardize(train: np.ndarray, test: np.ndarray):
    """Z-score both sets with the train-set per-feature mean and std (constant features stay 0)."""
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (train - mu) / sd, (test - mu) / sd


def class_accuracy(pred: np.ndarray, labels: np.ndarray, num_classes: int):
    """Per-class top-1 accuracy and its macro mean; classes absent from ``labels`` are excluded."""
    per_class, excluded = {}, []
    for c in range(num_classes):
        mask = labels == c
        if not mask.any():
            excluded.append(c)
            continue
        per_class[c] = float((pred[mask] == c).mean())
    if excluded:
        log.warning("classes %s absent from the evaluation set; excluded from the mean", excluded)
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean, excluded


def features(encoders: dict, sessions: dict) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated ``h`` over modalities and the inertial ``z`` for session-aligned windows."""
    hs, z_in = [], None
    for m, ws in sessions.items():
        h, z = encode_batch(encoders[m], _stack(ws))
        hs.append(h)
        if m == Modality.INERTIAL:
            z_in = z
    return np.concatenate(hs, axis=1), z_in


def _encoders_for(config, encoders):
    missing = [m for m in config.modalities if m not in encoders]
    if missing:
        raise ContractError(f"no encoder for modalities {[m.value for m in missing]}")
    return {m: encoders[m] for m in config.modalities}


def linear_eval(encoders: dict, config: RunConfig, windows=None,
                audit: ConsumptionAudit | None = None, tag: str = "") -> EvalReport:
    """Frozen-encoder linear evaluation on held-out subjects."""
    t0 = time.perf_counter()
    config.validate()
    encoders = _normalize_keys(encoders)
    encoders = _encoders_for(config, encoders)
    windows = _dataset(config, windows)
    train, test = split(windows, config.train_subjects, config.test_subjects)
    tr, te = _sessions(train, config.modalities), _sessions(test, config.modalities)
    audit = audit or ConsumptionAudit(config.test_subjects)
    for ws in tr.values():
        audit.record("linear_eval", ws)
    audit.check()
    if not te[Modality.INERTIAL]:
        raise ContractError("test partition is empty")

    x_tr, _ = features(encoders, tr)
    x_te, z_te = features(encoders, te)
    x_tr, x_te = standardize(x_tr, x_te)
    y_tr = np.array([w.activity_id for w in tr[Modality.INERTIAL]])
    y_te = np.array([w.activity_id for w in te[Modality.INERTIAL]])
    k = config.world.num_activities
    head = fit_linear_head(x_tr, y_tr, k, config.linear_epochs, config.lr, config.batch_size,
                           stream(config.seed, "linear/head"))
    pred = (x_te @ head.weight.T + head.bias).argmax(axis=1)
    per_class, mean_acc, excluded = class_accuracy(pred, y_te, k)
    subj_te = np.array([w.subject_id for w in te[Modality.INERTIAL]])
    try:
        sim = similarity_stats(z_te, subj_te, stream(config.seed, "similarity"), config.max_pairs)
    except ContractError as exc:
        log.warning("similarity analysis skipped: %s", exc)
        sim = None
    return EvalReport("linear_eval", per_class, mean_acc, sim, config.to_dict(),
                      time.perf_counter() - t0, tag or config.loss, excluded)


def finetune(encoders: dict | None, config: RunConfig, windows=None,
             audit: ConsumptionAudit | None = None, tag: str | None = None) -> EvalReport:
    """Train encoder(s) and a linear head end to end with cross-entropy.

    ``encoders=None`` starts from a random initialization.  The encoder learning
    rate is ``config.finetune_lr`` (defaults to ``config.lr``); the head always
    uses ``config.lr``.
    """
    t0 = time.perf_counter()
    config.validate()
    init = "random" if encoders is None else "pretrained"
    if encoders is None:
        encoders = {m: init_encoder(CHANNELS[m], stream(config.seed, f"finetune/init/{m.value}"))
                    for m in config.modalities}
    else:
        encoders = {m: e.copy() for m, e in _encoders_for(config, _normalize_keys(encoders)).items()}
    windows = _dataset(config, windows)
    train, test = split(windows, config.train_subjects, config.test_subjects)
    tr, te = _sessions(train, config.modalities), _sessions(test, config.modalities)
    audit = audit or ConsumptionAudit(config.test_subjects)
    k = config.world.num_activities
    y_tr = np.array([w.activity_id for w in tr[Modality.INERTIAL]])
    y_te = np.array([w.activity_id for w in te[Modality.INERTIAL]])
    x_tr = {m: _stack(ws) for m, ws in tr.items()}

    rng = stream(config.seed, "finetune/head")
    head = init_head(k, rng, H_DIM * len(config.modalities))
    enc_params = {f"{m.value}/{n}": v for m, e in encoders.items() for n, v in e.tensors.items()}
    enc_opt = Adam(enc_params, lr=config.lr if config.finetune_lr is None else config.finetune_lr)
    head_params = {"w": head.weight, "b": head.bias}
    head_opt = Adam(head_params, lr=config.lr)

    for epoch in range(config.linear_epochs):
        for idx in _batches(len(y_tr), config.batch_size, rng, min_size=1):
            for m in config.modalities:
                audit.record("finetune", [tr[m][i] for i in idx])
            tape = Tape()
            hs, leaves = [], {}
            for m in config.modalities:
                h, _, lv = forward(encoders[m], x_tr[m][idx], tape)
                hs.append(h)
                leaves.update({f"{m.value}/{n}": t for n, t in lv.items()})
            h = nx.concat(hs, axis=1)
            w, b = tape.watch(head_params["w"]), tape.watch(head_params["b"])
            loss = cross_entropy(head_forward(w, b, h), y_tr[idx])
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite finetune loss at epoch {epoch}",
                                       {"epoch": epoch, "loss": loss.item()})
            g = nx.backward(tape, loss)
            enc_opt.step({k_: g.get(t.node, np.zeros(t.shape)) for k_, t in leaves.items()})
            _sync(encoders, enc_params)
            head_opt.step({"w": g[w.node], "b": g[b.node]})
    audit.check()
    x_te, z_te = features(encoders, te)
    pred = (x_te @ head_params["w"].T + head_params["b"]).argmax(axis=1)
    per_class, mean_acc, excluded = class_accuracy(pred, y_te, k)
    subj_te = np.array([w.subject_id for w in te[Modality.INERTIAL]])
    try:
        sim = similarity_stats(z_te, subj_te, stream(config.seed, "similarity"), config.max_pairs)
    except ContractError:
        sim = None
    return EvalReport("finetune", per_class, mean_acc, sim, config.to_dict(),
                      time.perf_counter() - t0, tag if tag is not None else f"{config.loss}/{init}",
                      excluded)


def _normalize_keys(encoders: dict) -> dict:
    return {Modality(getattr(m, "value", m)): e for m, e in encoders.items()}


# ---------------------------------------------------------------------------
# similarity analysis
# ---------------------------------------------------------------------------

def _pair_sample(i, j, limit, rng):
    if len(i) > limit:
        pick = np.sort(rng.choice(len(i), size=limit, replace=False))
        i, j = i[pick], j[pick]
    return i, j


def similarity_stats(z: np.ndarray, subject_ids: np.ndarray, rng: np.random.Generator,
                     max_pairs: int = 1_000_000) -> SimStats:
    """Cosine similarity populations over all pairs and over same-subject pairs."""
    z = np.asarray(z, dtype=np.float64)
    subject_ids = np.asarray(subject_ids)
    zn = z / np.linalg.norm(z, axis=1, keepdims=True)
    i, j = np.triu_indices(len(zn), k=1)
    same = subject_ids[i] == subject_ids[j]
    if not same.any():
        raise ContractError("no subject has two windows; intra-subject population is empty")
    ia, ja = _pair_sample(i, j, max_pairs, rng)
    ii, ji = _pair_sample(i[same], j[same], max_pairs, rng)
    all_sim = np.einsum("nd,nd->n", zn[ia], zn[ja])
    intra = np.einsum("nd,nd->n", zn[ii], zn[ji])
    edges = np.linspace(-1.0, 1.0, HIST_BINS + 1)
    h_all, _ = np.histogram(np.clip(all_sim, -1, 1), edges)
    h_intra, _ = np.histogram(np.clip(intra, -1, 1), edges)
    return SimStats(float(all_sim.mean()), float(all_sim.std()), float(intra.mean()), float(intra.std()),
                    float(abs(all_sim.mean() - intra.mean())), edges.tolist(), h_all.tolist(),
                    h_intra.tolist(), int(len(all_sim)), int(len(intra)))


def analyze_similarities(encoder: EncoderParams, windows, seed: int = 0,
                         max_pairs: int = 1_000_000) -> SimStats:
    if not windows:
        raise ContractError("no windows to analyze")
    _, z = encode_batch(encoder, _stack(windows))
    return similarity_stats(z, np.array([w.subject_id for w in windows]), stream(seed, "similarity"),
                            max_pairs)


# ---------------------------------------------------------------------------
# experiment matrix
# ---------------------------------------------------------------------------

@dataclass
class MatrixCell:
    loss: str
    seed: int
    report: EvalReport | None
    error: str | None = None
    loss_curve: list = field(default_factory=list)


def run_cell(config: RunConfig) -> MatrixCell:
    try:
        windows = generate(config.world)
        audit = ConsumptionAudit(config.test_subjects)
        pre = pretrain(config, windows, audit)
        report = linear_eval(pre.encoders, config, windows, audit)
        return MatrixCell(config.loss, config.seed, report, None, pre.loss_curve)
    except Exception as exc:  # one failing cell must not abort the matrix
        log.error("cell %s/seed %d failed: %s", config.loss, config.seed, exc)
        return MatrixCell(config.loss, config.seed, None, f"{type(exc).__name__}: {exc}")


def matrix_configs(base: RunConfig, losses_=("nce", "sicl"), seeds=(0, 1, 2)) -> list[RunConfig]:
    return [replace(base, loss=l, seed=s) for l in losses_ for s in seeds]


def run_matrix(configs, jobs: int = 1) -> list[MatrixCell]:
    configs = list(configs)
    if jobs <= 1:
        return [run_cell(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_cell, configs))


def write_matrix_csv(path, cells: list[MatrixCell]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loss", "seed", "mean_class_accuracy", "gap"])
        for c in cells:
            if c.report is None:
                w.writerow([c.loss, c.seed, "nan", "nan"])
            else:
                gap = c.report.sim_stats.gap if c.report.sim_stats else float("nan")
                w.writerow([c.loss, c.seed, repr(c.report.mean_class_accuracy), repr(gap)])
    return path


def write_curve_csv(path, curve) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss"])
        for e, v in enumerate(curve):
            w.writerow([e, repr(v)])
    return path


def write_histogram_csv(path, stats: SimStats) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count_all", "count_intra_subject"])
        for k in range(len(stats.hist_all)):
            w.writerow([stats.bin_edges[k], stats.bin_edges[k + 1], stats.hist_all[k], stats.hist_intra[k]])
    return path
