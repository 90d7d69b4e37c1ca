"""Round-by-round drivers for SemiPFL and the FedAVG baseline, plus the
communication ledger both of them write to."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .client import (SYSTEM_SPEED, PersonalizedModel, UserState, aggregate_base_models,
                     effective_epochs, evaluate, fine_tune_autoencoder, reconstruction_loss)
from .config import ExperimentConfig
from .data import (CsvSchema, SyntheticSpec, generate_synthetic, load_csv, prepare_server,
                   prepare_user)
from .errors import ConfigurationError, ExperimentError, ParameterError
from .metrics import cohen_kappa, confusion_matrix, federated_average, macro_f1
from .models import (GlobalModelParams, HypernetState, autoencoder_widths, base_network,
                     hypernet_forward, hypernet_update, init_global_model, init_hypernet)
from .nn import AdamState, adam_step, cross_entropy_loss
from .server import (LabeledArrays, SelectionReport, ServerCorpus, encode_corpus,
                     select_samples, select_user, train_base_models)

log = logging.getLogger(__name__)

BYTES_PER_SCALAR = 4

# What may travel between server and users. Raw samples and labels are listed so a
# ledger can be audited for them; neither driver ever records one.
ITEM_KINDS = ("autoencoder", "base_models", "global_model", "raw_samples", "labels")


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    direction: str  # "down" (server -> user) or "up"
    kind: str
    user: int
    scalars: int

    @property
    def bytes(self) -> int:
        return self.scalars * BYTES_PER_SCALAR


@dataclass
class FootprintLedger:
    entries: list[LedgerEntry] = field(default_factory=list)

    def record(self, round_index: int, direction: str, kind: str, user: int, scalars: int) -> None:
        if direction not in ("up", "down"):
            raise ParameterError(f"unknown direction {direction!r}")
        if kind not in ITEM_KINDS:
            raise ParameterError(f"unknown ledger item kind {kind!r}")
        self.entries.append(LedgerEntry(round_index, direction, kind, user, int(scalars)))

    def count(self, direction: str, kind: str) -> int:
        return sum(1 for e in self.entries if e.direction == direction and e.kind == kind)

    def kinds(self) -> set[str]:
        return {e.kind for e in self.entries}


@dataclass
class RoundLog:
    round: int
    user: int
    loss_before: float = float("nan")
    loss_after: float = float("nan")
    selection: list[SelectionReport] = field(default_factory=list)
    chi: list[float] = field(default_factory=list)
    chi_history: list[list[float]] = field(default_factory=list)
    eval: dict[int, tuple[float, float]] = field(default_factory=dict)
    scalars_up: int = 0
    scalars_down: int = 0


@dataclass
class FootprintRow:
    round: int
    bytes_down: int
    bytes_up: int
    cumulative: int

    @property
    def total(self) -> int:
        return self.bytes_down + self.bytes_up


def footprint(logs: list[RoundLog]) -> list[FootprintRow]:
    """Bytes transmitted per round and cumulatively (4 bytes per scalar)."""
    rows, running = [], 0
    for lg in logs:
        down, up = lg.scalars_down * BYTES_PER_SCALAR, lg.scalars_up * BYTES_PER_SCALAR
        running += down + up
        rows.append(FootprintRow(lg.round, down, up, running))
    return rows


def semipfl_round_bytes(ae_scalars: int, base_scalars: int, m: int) -> int:
    return (2 * ae_scalars + m * base_scalars) * BYTES_PER_SCALAR


def fedavg_round_bytes(k: int, global_scalars: int) -> int:
    return 2 * k * global_scalars * BYTES_PER_SCALAR


# --- experiment preparation -------------------------------------------------------

def system_assignment(n_users: int, scenario: int) -> list[int]:
    """Hardware tier per user: the first ceil(K/2) users are system 1, the rest are
    system 1, 2 or 3 for scenarios 1, 2 and 3."""
    if scenario not in (1, 2, 3):
        raise ParameterError(f"unknown hardware scenario {scenario}")
    fast = math.ceil(n_users / 2)
    return [1 if i < fast else scenario for i in range(n_users)]


def composition(n_users: int, scenario: int) -> str:
    """User-type composition string, e.g. ``"3-2-0"`` for five users in scenario 2."""
    counts = [0, 0, 0]
    for s in system_assignment(n_users, scenario):
        counts[s - 1] += 1
    return "-".join(str(c) for c in counts)


@dataclass
class Experiment:
    users: dict[int, UserState]
    corpus: ServerCorpus
    input_dim: int
    n_classes: int


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("data", "init", "select", "client", "server")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def prepare_experiment(cfg: ExperimentConfig, rng: np.random.Generator | None = None) -> Experiment:
    rng = rng if rng is not None else _streams(cfg.seed)["data"]
    ds = cfg.dataset
    if ds.kind == "synthetic":
        syn = ds.synthetic
        spec = SyntheticSpec(n_users=cfg.n_users, n_classes=syn.n_classes, n_sensors=syn.n_sensors,
                             window=cfg.window, n_server=cfg.n_server, n_groups=syn.n_groups,
                             rotation=syn.rotation, jitter=syn.jitter, shift=syn.shift,
                             separation=syn.separation, noise=syn.noise,
                             signature=syn.signature, signature_rank=syn.signature_rank,
                             samples_per_user=syn.samples_per_user,
                             samples_per_server=syn.samples_per_server)
        generated = generate_synthetic(spec, rng)
        user_series = {s.user: [s] for s in generated.users}
        server_series = [[s] for s in generated.server]
        n_classes = syn.n_classes
    else:
        csv_cfg = ds.csv
        n_classes = csv_cfg.n_classes
        series = load_csv(csv_cfg.paths, CsvSchema(n_classes=n_classes))
        by_user = defaultdict(list)
        for s in series:
            by_user[s.user].append(s)
        missing = [u for u in csv_cfg.server_users if u not in by_user]
        if missing:
            raise ConfigurationError(f"dataset.csv.server_users: no recordings for users {missing}")
        server_series = [by_user[u] for u in csv_cfg.server_users]
        candidates = csv_cfg.users or sorted(u for u in by_user if u not in csv_cfg.server_users)
        if len(candidates) < cfg.n_users:
            raise ConfigurationError(f"n_users: only {len(candidates)} users available")
        user_series = {u: by_user[u] for u in candidates[:cfg.n_users]}
    systems = system_assignment(len(user_series), cfg.scenario)
    users = {}
    for (uid, series), system in zip(user_series.items(), systems):
        prepared = prepare_user(series, rng, cfg.labeled_per_class, n_classes, cfg.window,
                                cfg.stride, cfg.eval_frac, cfg.labeled_frac)
        users[uid] = UserState.from_prepared(uid, prepared, system=system,
                                             speed=SYSTEM_SPEED[system])
    dists = []
    for series in server_series:
        prepared = prepare_server(series, rng, n_classes, cfg.window, cfg.stride)
        dists.append(LabeledArrays(prepared.flat(), prepared.labels))
    input_dim = next(iter(users.values())).x_eval.shape[1]
    return Experiment(users, ServerCorpus(dists, n_classes), input_dim, n_classes)


def _evaluate_users(users: dict[int, UserState], n_classes: int) -> dict[int, tuple[float, float]]:
    return {uid: evaluate(u, u.model, n_classes) for uid, u in users.items() if u.participated}


@dataclass
class RunResult:
    method: str
    config: ExperimentConfig
    logs: list[RoundLog]
    ledger: FootprintLedger
    metrics: dict[int, tuple[float, float]]  # user -> (macro-F1, kappa) at the end
    models: dict = field(default_factory=dict)
    hypernet: HypernetState | None = None

    def summary(self) -> dict:
        f1 = federated_average(v[0] for v in self.metrics.values())
        kappa = federated_average(v[1] for v in self.metrics.values())
        return {"method": self.method, "users": len(self.metrics),
                "f1_mean": f1[0], "f1_std": f1[1], "kappa_mean": kappa[0], "kappa_std": kappa[1]}

    def convergence(self) -> list[tuple[int, float, float]]:
        out = []
        for lg in self.logs:
            if lg.eval:
                out.append((lg.round, float(np.mean([v[0] for v in lg.eval.values()])),
                            float(np.mean([v[1] for v in lg.eval.values()]))))
        return out


def _eval_due(r: int, cfg: ExperimentConfig) -> bool:
    return r == cfg.rounds - 1 or (r + 1) % cfg.eval_every == 0


# --- SemiPFL ------------------------------------------------------------------------

def run_semipfl(cfg: ExperimentConfig, experiment: Experiment | None = None) -> RunResult:
    streams = _streams(cfg.seed)
    exp = experiment or prepare_experiment(cfg, streams["data"])
    users, corpus, n_classes = exp.users, exp.corpus, exp.n_classes
    dims = autoencoder_widths(exp.input_dim, cfg.ae_hidden, cfg.ae_latent)
    base_hidden = cfg.base_hidden or dims[2]
    hyper = init_hypernet(users.keys(), dims, streams["init"], embedding_dim=cfg.embedding_dim,
                          hidden=cfg.hyper_hidden, n_hidden=cfg.hyper_layers, mu=cfg.hyper_mu,
                          zeta=cfg.hyper_zeta, embedding_std=cfg.embedding_std)
    ledger = FootprintLedger()
    logs: list[RoundLog] = []
    client_rng, server_rng = streams["client"], streams["server"]
    user_ids = sorted(users)
    for r in range(cfg.rounds):
        try:
            j = select_user(user_ids, streams["select"])
            user = users[j]
            lg = RoundLog(r, j)
            sent = hypernet_forward(hyper, j)
            ledger.record(r, "down", "autoencoder", j, sent.size)
            inputs = user.inputs()
            lg.loss_before = reconstruction_loss(sent, inputs)
            received = fine_tune_autoencoder(user, sent, cfg.local_epochs, client_rng,
                                             cfg.batch_size, cfg.lr, cfg.dropout)
            lg.loss_after = reconstruction_loss(received, inputs)
            ledger.record(r, "up", "autoencoder", j, received.size)
            hypernet_update(hyper, j, sent, received)

            encoded = []
            for dist in corpus.distributions:
                subset, report = select_samples(dist, received, cfg.tau, cfg.min_keep)
                lg.selection.append(report)
                encoded.append(encode_corpus(subset, received))
            bases = train_base_models(encoded, n_classes, base_hidden, cfg.local_epochs,
                                      server_rng.spawn(corpus.m), cfg.batch_size, cfg.lr,
                                      cfg.dropout)
            ledger.record(r, "down", "base_models", j, sum(b.size for b in bases))

            _, model, history = aggregate_base_models(user, received, bases, cfg.mix_epochs,
                                                      client_rng, cfg.mix_lr, cfg.batch_size)
            model.round = r
            user.model = model
            user.participated = True
            lg.chi = model.chi.tolist()
            lg.chi_history = [c.tolist() for c in history]
            lg.scalars_down = sent.size + sum(b.size for b in bases)
            lg.scalars_up = received.size
            if _eval_due(r, cfg):
                lg.eval = _evaluate_users(users, n_classes)
        except Exception as exc:
            raise ExperimentError(r, exc) from exc
        logs.append(lg)
        log.debug("round %d user %d loss %.4f -> %.4f chi %s", r, j, lg.loss_before,
                  lg.loss_after, np.round(model.chi, 3))
    metrics = _evaluate_users(users, n_classes)
    models = {uid: u.model for uid, u in users.items() if u.participated}
    return RunResult("semipfl", cfg, logs, ledger, metrics, models, hyper)


# --- FedAVG -------------------------------------------------------------------------

def fedavg_average(bundles: list):
    """Elementwise mean with weight 1/K.

    Accumulated as offsets from the first bundle, so identical inputs come back
    bit-for-bit and ``p, -p`` averages to exact zeros.
    """
    if not bundles:
        raise ParameterError("nothing to average")
    first = bundles[0]
    if any(not first.same_layout(b) for b in bundles):
        raise ParameterError("bundles to average have different layouts")
    ref = first.to_vector().astype(np.float64)
    offset = np.zeros_like(ref)
    for b in bundles[1:]:
        offset += b.to_vector().astype(np.float64) - ref
    return first.with_vector(ref + offset / len(bundles))


def global_predict(model: GlobalModelParams, x: np.ndarray) -> np.ndarray:
    return base_network(model).forward(x, training=False).argmax(axis=1)


def train_local_classifier(model: GlobalModelParams, x: np.ndarray, y: np.ndarray, epochs: int,
                           rng: np.random.Generator, batch_size: int, lr: float,
                           dropout_rate: float) -> GlobalModelParams:
    local = model.copy()
    net = base_network(local, dropout_rate)
    opt = AdamState.for_params(net.params(), lr=lr)
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            logits = net.forward(x[idx], training=True, rng=rng)
            _, grad = cross_entropy_loss(logits, y[idx])
            grads, _ = net.backward(grad)
            adam_step(net.params(), grads, opt)
    return local


def run_fedavg(cfg: ExperimentConfig, experiment: Experiment | None = None) -> RunResult:
    """Supervised FedAVG over every user's labeled set, all users every round."""
    streams = _streams(cfg.seed)
    exp = experiment or prepare_experiment(cfg, streams["data"])
    users, n_classes = exp.users, exp.n_classes
    empty = [uid for uid, u in users.items() if len(u.y_labeled) == 0]
    if empty:
        raise ConfigurationError(f"FedAVG needs labeled data; users {empty} have none")
    dims = autoencoder_widths(exp.input_dim, cfg.ae_hidden, cfg.ae_latent)
    global_model = init_global_model(dims, cfg.base_hidden or dims[2], n_classes, streams["init"])
    ledger = FootprintLedger()
    logs = []
    rng = streams["client"]

    def evaluate_global():
        out = {}
        for uid, u in users.items():
            cm = confusion_matrix(u.y_eval, global_predict(global_model, u.x_eval), n_classes)
            out[uid] = (macro_f1(cm), cohen_kappa(cm))
        return out

    for r in range(cfg.rounds):
        lg = RoundLog(r, -1)
        returned = []
        for uid in sorted(users):
            u = users[uid]
            ledger.record(r, "down", "global_model", uid, global_model.size)
            epochs = effective_epochs(cfg.local_epochs, u.speed)
            returned.append(train_local_classifier(global_model, u.x_labeled, u.y_labeled, epochs,
                                                   rng, cfg.batch_size, cfg.lr, cfg.dropout))
            ledger.record(r, "up", "global_model", uid, global_model.size)
            u.participated = True
        global_model = fedavg_average(returned)
        lg.scalars_down = lg.scalars_up = len(users) * global_model.size
        if _eval_due(r, cfg):
            lg.eval = evaluate_global()
        logs.append(lg)
    return RunResult("fedavg", cfg, logs, ledger, evaluate_global(), {"global": global_model})
