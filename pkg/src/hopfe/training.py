"""Self-adversarial negative sampling loss, gradients and the Adam loop."""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np

from . import model as mdl
from .errors import InvalidConfig, NonFiniteGradient, ShapeMismatch

log = logging.getLogger(__name__)

RESAMPLE_LIMIT = 100
# positives per gradient chunk; fixed so the reduction order never depends on the thread count
CHUNK = 128


@dataclass
class TrainConfig:
    batch_size: int = 512
    neg_samples: int = 64
    learning_rate: float = 0.1
    decay_rate: float = 0.1
    max_steps: int = 1000
    seed: int = 0
    grad_check_interval: int = 0
    valid_every: int = 0
    eval_split: str = "valid"
    eval_max_triples: int = None
    threads: int = 1

    def validate(self):
        for name in ("batch_size", "neg_samples", "max_steps", "threads"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be > 0")
        if not 0 < self.decay_rate <= 1:
            raise InvalidConfig("decay_rate must lie in (0, 1]")
        if self.grad_check_interval < 0 or self.valid_every < 0:
            raise InvalidConfig("intervals must be >= 0")
        return self


# ---------------------------------------------------------------- negatives

def corrupt(positives, n_neg, num_entities, filter_index, rng):
    """(B, n_neg, 3) corruptions of ``positives``.

    Each negative replaces the head or the tail (fair coin) by a uniform
    entity; candidates that are known-true are redrawn up to 100 times and
    then accepted as they are.
    """
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    B = len(positives)
    neg = np.repeat(positives[:, None, :], n_neg, axis=1)
    corrupt_head = rng.random((B, n_neg)) < 0.5
    col = np.where(corrupt_head, 0, 2)
    draw = rng.integers(0, num_entities, size=(B, n_neg))
    np.put_along_axis(neg, col[..., None], draw[..., None], axis=2)
    for _ in range(RESAMPLE_LIMIT):
        bad = filter_index.contains(neg[..., 0], neg[..., 1], neg[..., 2])
        if not bad.any():
            break
        b, j = np.nonzero(bad)
        neg[b, j, col[b, j]] = rng.integers(0, num_entities, size=len(b))
    return neg


def sample_negatives(triple, store, n_neg, rng):
    return corrupt(np.asarray(triple)[None, :], n_neg, store.num_entities, store.filter_index, rng)[0]


# ---------------------------------------------------------------- loss

def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def adversarial_weights(neg_scores, alpha):
    """Softmax of α·(−D⁻) over the last axis (plausible negatives weigh more)."""
    z = -alpha * np.asarray(neg_scores, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def loss_from_scores(pos, neg, gamma, alpha, weights=None):
    """Per-positive loss and its derivatives w.r.t. the scores.

    L = -log σ(γ - D⁺) - Σ p·log σ(D⁻ - γ), p the detached adversarial
    weights (recomputed from ``neg`` unless given).
    """
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    loss = _softplus(pos - gamma)
    gpos = _sigmoid(pos - gamma)
    if neg.shape[-1] == 0:
        return loss, gpos, np.zeros_like(neg)
    p = adversarial_weights(neg, alpha) if weights is None else weights
    loss = loss + np.sum(p * _softplus(gamma - neg), axis=-1)
    gneg = -p * _sigmoid(gamma - neg)
    return loss, gpos, gneg


def loss(positive, negatives, params, cfg=None):
    """Loss of one positive triple against its negatives.

    ``cfg`` may override the margin and temperature (anything with
    ``gamma`` and ``alpha``); by default the model config's values apply.
    """
    cfg = cfg or params.cfg
    positive = np.asarray(positive, dtype=np.int64).reshape(3)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(-1, 3)
    trip = np.concatenate([positive[None, :], negatives], axis=0)
    s = mdl.scores(params, trip[:, 0], trip[:, 1], trip[:, 2])
    value, _, _ = loss_from_scores(s[0], s[1:], cfg.gamma, cfg.alpha)
    return float(value)


def _chunk_grads(params, pos, neg):
    B, N = neg.shape[:2]
    trip = np.concatenate([pos[:, None, :], neg], axis=1).reshape(-1, 3)
    tape = mdl.score_batch(params, trip[:, 0], trip[:, 1], trip[:, 2])
    s = tape.scores.reshape(B, N + 1)
    value, gpos, gneg = loss_from_scores(s[:, 0], s[:, 1:], params.cfg.gamma, params.cfg.alpha)
    gs = np.concatenate([gpos[:, None], gneg], axis=1).reshape(-1)
    grads = mdl.backward(params, tape, gs)
    return float(value.sum()), grads


def gradients(positives, negatives, params, threads=1, pool=None):
    """Mean batch loss and its gradient for every parameter table."""
    pos = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    neg = np.asarray(negatives, dtype=np.int64)
    if len(pos) == 0:
        raise ValueError("empty batch")
    if neg.ndim != 3 or neg.shape[0] != len(pos) or neg.shape[2] != 3:
        raise ShapeMismatch(f"negatives must be (B, n_neg, 3), got {neg.shape}")
    chunks = [(pos[i:i + CHUNK], neg[i:i + CHUNK]) for i in range(0, len(pos), CHUNK)]
    if threads > 1 and len(chunks) > 1:
        if pool is None:
            with ThreadPoolExecutor(threads) as ex:
                parts = list(ex.map(lambda c: _chunk_grads(params, *c), chunks))
        else:
            parts = list(pool.map(lambda c: _chunk_grads(params, *c), chunks))
    else:
        parts = [_chunk_grads(params, *c) for c in chunks]
    total = 0.0
    grads = mdl.zero_grads(params)
    for value, g in parts:
        total += value
        for name in grads:
            grads[name] += g[name]
    B = len(pos)
    for name in grads:
        grads[name] /= B
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    return total / B, grads


def finite_difference_check(params, positives, negatives, h=1e-5, max_coords=None, rng=None,
                            threshold=1e-6):
    """Max relative error between analytic and central-difference gradients.

    The adversarial weights are frozen at the unperturbed parameters, which
    is the function the analytic gradient differentiates.  Only coordinates
    with |analytic| > ``threshold`` enter the ratio.  Returns (error, count).
    """
    pos = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    neg = np.asarray(negatives, dtype=np.int64)
    B, N = neg.shape[:2]
    trip = np.concatenate([pos[:, None, :], neg], axis=1).reshape(-1, 3)
    cfg = params.cfg

    def surrogate():
        s = mdl.scores(params, trip[:, 0], trip[:, 1], trip[:, 2]).reshape(B, N + 1)
        return float(loss_from_scores(s[:, 0], s[:, 1:], cfg.gamma, cfg.alpha, frozen)[0].mean())

    s0 = mdl.scores(params, trip[:, 0], trip[:, 1], trip[:, 2]).reshape(B, N + 1)
    frozen = adversarial_weights(s0[:, 1:], cfg.alpha) if N else None
    _, grads = gradients(pos, neg, params)
    worst = 0.0
    checked = 0
    for name, table in params.tables().items():
        flat = table.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, max_coords, replace=False)
        g = grads[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = surrogate()
            flat[i] = old - h
            fm = surrogate()
            flat[i] = old
            fd = (fp - fm) / (2.0 * h)
            if abs(g[i]) > threshold:
                worst = max(worst, abs(g[i] - fd) / abs(g[i]))
                checked += 1
    return worst, checked


# ---------------------------------------------------------------- optimizer

def scheduled_lr(lr, decay_rate, step, max_steps):
    """Exponential decay reaching lr·decay_rate at step = max_steps."""
    return lr * decay_rate ** (step / max_steps)


class AdamState:
    def __init__(self, params):
        self.step = 0
        self.m = {name: np.zeros_like(a) for name, a in params.tables().items()}
        self.v = {name: np.zeros_like(a) for name, a in params.tables().items()}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, table in params.tables().items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        table -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------- loop

def train(store, cfg, model_cfg, params=None, log_path=None, evaluate=None):
    """Train on the store's train split; returns (params, log records).

    ``evaluate(params) -> EvalReport`` defaults to filtered ranking on
    ``cfg.eval_split`` (optionally sub-sampled to ``cfg.eval_max_triples``).
    """
    from .evaluation import evaluate_split

    cfg.validate()
    model_cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = mdl.init_model(store.num_entities, store.num_relations, model_cfg, seed=cfg.seed)
    if evaluate is None:
        def evaluate(p):
            return evaluate_split(cfg.eval_split, p, store, threads=cfg.threads,
                                  max_triples=cfg.eval_max_triples, seed=cfg.seed)
    train_triples = store.split("train")
    n = len(train_triples)
    if n == 0:
        raise InvalidConfig("train split is empty")
    B = min(cfg.batch_size, n)
    state = AdamState(params)
    lr_scale = 1.0
    records = []
    order = rng.permutation(n)
    cursor = 0
    running = []
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    out = open(log_path, "w") if log_path else None
    started = time.perf_counter()
    try:
        for step in range(1, cfg.max_steps + 1):
            if cursor + B > n:
                order = rng.permutation(n)
                cursor = 0
            batch = train_triples[order[cursor:cursor + B]]
            cursor += B
            neg = corrupt(batch, cfg.neg_samples, store.num_entities, store.filter_index, rng)
            lr = scheduled_lr(cfg.learning_rate, cfg.decay_rate, step, cfg.max_steps) * lr_scale
            try:
                value, grads = gradients(batch, neg, params, threads=cfg.threads, pool=pool)
            except NonFiniteGradient as exc:
                lr_scale *= 0.5
                log.warning("step %d: %s; halving learning rate", step, exc)
                continue
            if cfg.grad_check_interval and step % cfg.grad_check_interval == 0:
                err, _ = finite_difference_check(params, batch[:2], neg[:2, :4], max_coords=8,
                                                 rng=np.random.default_rng(step))
                log.info("step %d: gradient check max relative error %.3g", step, err)
            adam_step(params, grads, state, lr)
            running.append(value)
            last = step == cfg.max_steps
            if last or (cfg.valid_every and step % cfg.valid_every == 0):
                report = evaluate(params)
                rec = {"step": step, "loss": float(np.mean(running)), "mrr": report.mrr,
                       "hits1": report.hits1, "hits3": report.hits3, "hits10": report.hits10,
                       "lr": lr}
                running = []
                records.append(rec)
                log.info("step %d loss %.4f mrr %.4f (%.1fs)", step, rec["loss"], rec["mrr"],
                         time.perf_counter() - started)
                if out:
                    out.write(json.dumps(rec) + "\n")
                    out.flush()
    finally:
        if out:
            out.close()
        if pool:
            pool.shutdown()
    return params, records


def config_dict(cfg):
    return asdict(cfg)
