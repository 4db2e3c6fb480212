"""Flow-matching training: loss graph, Adam steps, epoch plans, fine-tuning.

A training batch holds same-length items of (data chain, noise chain,
sequence, residue exclusion mask). The loss interpolates each pair at its
sampled time, regresses the network onto the analytic conditional fields,
and averages squared errors over the residues not excluded by the mask.
"""

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .backbone import SequenceRecord, mask_sequence
from .coupling import couple
from .errors import ConfigError, DataError, NumericError
from .geometry import FrameChain, conditional_field, geodesic_interpolant, sample_noise_chain
from .model import ModelConfig, ModelParams, forward_batch
from .tape import Tape

CHECKPOINT_MAGIC = b"SE3FM-CKPT v1\n"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # squared-residue batch budget; desk-scale default, 500000 upstream
    batch_budget: int = 20000
    mask_prob: float = 0.5
    t_min: float = 0.01
    synthetic_fraction: float = 2.0 / 3.0
    noise_trans_scale: float = 10.0
    freeze_seq_embedding: bool = False
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.adam_eps <= 0 or self.batch_budget <= 0:
            raise ConfigError("rates and budgets must be positive")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("mask_prob outside [0, 1]")
        if not 0.0 < self.t_min < 1.0:
            raise ConfigError("t_min outside (0, 1)")
        if not 0.0 <= self.synthetic_fraction <= 1.0:
            raise ConfigError("synthetic_fraction outside [0, 1]")


@dataclass
class BatchItem:
    """One coupled training example; residue_mask=True excludes a residue."""

    x0: FrameChain
    x1: FrameChain
    seq: SequenceRecord
    residue_mask: np.ndarray = None

    def __post_init__(self):
        if self.residue_mask is None:
            self.residue_mask = np.zeros(len(self.x0), dtype=bool)
        self.residue_mask = np.asarray(self.residue_mask, dtype=bool)
        if not len(self.x0) == len(self.x1) == len(self.seq) == self.residue_mask.size:
            raise DataError("batch item field lengths differ")


@dataclass
class TrainState:
    params: ModelParams
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    step: int = 0
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.adam_m is None:
            self.adam_m = np.zeros(self.params.size)
        if self.adam_v is None:
            self.adam_v = np.zeros(self.params.size)
        if self.adam_m.shape != self.params.flat.shape or self.adam_v.shape != self.params.flat.shape:
            raise ConfigError("optimizer moment shapes differ from parameters")


def _loss_graph(params, items, ts, t_min, item_weights, predictions=None, use_skip=True):
    """Build the weighted flow-matching loss on a fresh tape.

    Returns (tape, loss_node, per_item_losses).
    """
    if not items:
        raise DataError("empty batch")
    n = len(items[0].x0)
    ts = np.asarray(ts, dtype=float)
    if ts.shape != (len(items),):
        raise DataError("need one time per batch item")
    targets = np.empty((len(items), n, 6))
    rots = np.empty((len(items), n, 3, 3))
    trans = np.empty((len(items), n, 3))
    tokens = np.empty((len(items), n), dtype=int)
    include = np.empty((len(items), n))
    for i, item in enumerate(items):
        if len(item.x0) != n:
            raise DataError("batch items must share chain length")
        x_t = geodesic_interpolant(item.x0, item.x1, ts[i])
        target = conditional_field(x_t, item.x0, ts[i], t_min=t_min)
        targets[i] = target.as_array()
        rots[i] = x_t.rot
        trans[i] = x_t.trans
        tokens[i] = item.seq.tokens
        include[i] = ~item.residue_mask
        if include[i].sum() == 0:
            raise DataError(f"all residues masked in batch item {i}")
    counts = include.sum(axis=1)

    tape = Tape()
    if predictions is not None:
        out = tape.const(np.stack([p.as_array() for p in predictions]))
    else:
        out = forward_batch(tape, params, ts, rots, trans, tokens, use_skip=use_skip)
    diff = tape.sub(out, tape.const(targets))
    sq = tape.mul(diff, diff)
    masked = tape.mul(sq, tape.const(include[:, :, None]))
    per_item = tape.mul(tape.sum_axes(masked, (1, 2)), tape.const(1.0 / counts))
    loss = tape.sum_all(tape.mul(per_item, tape.const(np.asarray(item_weights, dtype=float))))
    return tape, loss, per_item


def fm_loss(params, items, ts, t_min=0.01, predictions=None):
    """Mean flow-matching loss and its per-item breakdown."""
    weights = np.full(len(items), 1.0 / len(items))
    _, loss, per_item = _loss_graph(params, items, ts, t_min, weights, predictions=predictions)
    return float(loss.value), per_item.value.copy()


def normalized_rewards(rewards):
    """Shift rewards nonnegative (when any are negative) and normalize to sum 1."""
    r = np.asarray(rewards, dtype=float)
    if not np.all(np.isfinite(r)):
        raise DataError("non-finite rewards")
    if r.min() < 0:
        r = r - r.min()
    total = r.sum()
    if total <= 0:
        raise DataError("rewards are all zero after shifting; nothing to weight")
    return r / total


def reft_loss(params, items, ts, rewards, t_min=0.01, predictions=None):
    """Reward-weighted flow-matching loss over a preferential batch."""
    weights = normalized_rewards(rewards)
    _, loss, per_item = _loss_graph(params, items, ts, t_min, weights, predictions=predictions)
    return float(loss.value), per_item.value.copy()


def _adam_update(state: TrainState, grad, cfg: TrainConfig):
    state.step += 1
    state.adam_m = cfg.beta1 * state.adam_m + (1 - cfg.beta1) * grad
    state.adam_v = cfg.beta2 * state.adam_v + (1 - cfg.beta2) * grad * grad
    mhat = state.adam_m / (1 - cfg.beta1**state.step)
    vhat = state.adam_v / (1 - cfg.beta2**state.step)
    new_flat = state.params.flat - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    state.params = ModelParams(state.params.config, new_flat)


def train_step(state: TrainState, data_items, rng, cfg: TrainConfig, rewards=None):
    """One optimizer step: sample times, mask sequences, OT-couple, update.

    `data_items` are (chain, sequence, residue_mask) triples of equal length;
    with `rewards` given the loss is reward-weighted (fine-tuning mode).
    """
    b = len(data_items)
    if b == 0:
        raise DataError("empty batch")
    ts = rng.uniform(cfg.t_min, 1.0, size=b)
    masked_seqs = [
        mask_sequence(seq, "bernoulli", rng=rng, p=cfg.mask_prob)
        for (_, seq, _) in data_items
    ]
    n = len(data_items[0][0])
    noises = [sample_noise_chain(n, rng, cfg.noise_trans_scale) for _ in range(b)]
    pairs = couple([chain for (chain, _, _) in data_items], noises)
    items = [
        BatchItem(x0=pair[0], x1=pair[1], seq=seq, residue_mask=mask)
        for pair, seq, (_, _, mask) in zip(pairs, masked_seqs, data_items)
    ]
    weights = (
        np.full(b, 1.0 / b) if rewards is None else normalized_rewards(rewards)
    )
    tape, loss, _ = _loss_graph(state.params, items, ts, cfg.t_min, weights)
    if not np.isfinite(loss.value):
        raise NumericError(f"non-finite loss {loss.value} at step {state.step}")
    grad = tape.backward(loss, state.params.size)
    if cfg.freeze_seq_embedding:
        off, size = state.params.slice_of("seq_embed")
        grad[off : off + size] = 0.0
    _adam_update(state, grad, cfg)
    state.loss_history.append(float(loss.value))
    return state


def batch_size_for_length(n_residues, budget):
    """Items per batch from the squared-residue budget: ceil(budget / N^2)."""
    return max(1, math.ceil(budget / (n_residues * n_residues)))


def make_epoch_plan(lengths, provenances, cfg: TrainConfig, seed=None):
    """Plan one epoch as a list of index batches.

    Batches group entries of equal length with ceil(budget/N^2) items each;
    synthetic entries are capped at `synthetic_fraction` of the scheduled
    epoch, which with experimental count E allows at most
    floor(f/(1-f) * E) synthetic items.
    """
    lengths = np.asarray(lengths, dtype=int)
    provenances = list(provenances)
    if lengths.size == 0:
        raise DataError("empty dataset")
    if lengths.size != len(provenances):
        raise DataError("lengths and provenances differ in size")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    exp_idx = [i for i, p in enumerate(provenances) if p == "experimental"]
    syn_idx = [i for i, p in enumerate(provenances) if p == "synthetic"]
    if len(exp_idx) + len(syn_idx) != lengths.size:
        raise DataError("provenance must be 'experimental' or 'synthetic'")
    f = cfg.synthetic_fraction
    if f >= 1.0:
        syn_cap = len(syn_idx)
    else:
        # epsilon absorbs float rounding in fractions like 2/3
        syn_cap = min(len(syn_idx), math.floor(f / (1.0 - f) * len(exp_idx) + 1e-9))
    syn_order = list(rng.permutation(len(syn_idx)))
    chosen = exp_idx + [syn_idx[k] for k in syn_order[:syn_cap]]
    if not chosen:
        raise DataError("epoch plan empty after applying the synthetic cap")
    chosen = [chosen[k] for k in rng.permutation(len(chosen))]
    by_length = {}
    for idx in chosen:
        by_length.setdefault(int(lengths[idx]), []).append(idx)
    batches = []
    for n in sorted(by_length):
        group = by_length[n]
        size = batch_size_for_length(n, cfg.batch_budget)
        for start in range(0, len(group), size):
            batches.append(group[start : start + size])
    return batches


def reft_filter(samples_with_rewards, keep_fraction=0.25):
    """Top ceil(fraction * n) samples by reward; ties keep earlier inputs."""
    n = len(samples_with_rewards)
    if n == 0:
        return []
    rewards = np.asarray([r for _, r in samples_with_rewards], dtype=float)
    if not np.all(np.isfinite(rewards)):
        raise DataError("non-finite rewards")
    k = math.ceil(keep_fraction * n)
    order = np.argsort(-rewards, kind="stable")[:k]
    keep = sorted(order)
    return [samples_with_rewards[i] for i in keep]


def save_checkpoint(path, state: TrainState, config_text=""):
    """Versioned binary checkpoint; round-trips bit-exactly."""
    cfg_json = json.dumps(asdict(state.params.config), sort_keys=True)
    config_bytes = config_text.encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(f"model {cfg_json}\n".encode())
        fh.write(f"step {state.step}\n".encode())
        fh.write(f"nparams {state.params.size}\n".encode())
        fh.write(f"config_len {len(config_bytes)}\n".encode())
        fh.write(config_bytes)
        fh.write(state.params.flat.astype("<f8").tobytes())
        fh.write(state.adam_m.astype("<f8").tobytes())
        fh.write(state.adam_v.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (TrainState, config_text)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path} is not a recognized checkpoint")
    rest = blob[len(CHECKPOINT_MAGIC):]
    fields = {}
    for _ in range(4):
        nl = rest.index(b"\n")
        key, _, value = rest[:nl].partition(b" ")
        fields[key.decode()] = value.decode()
        rest = rest[nl + 1:]
    cfg = ModelConfig(**json.loads(fields["model"]))
    step = int(fields["step"])
    nparams = int(fields["nparams"])
    config_len = int(fields["config_len"])
    config_text = rest[:config_len].decode()
    rest = rest[config_len:]
    need = 3 * nparams * 8
    if len(rest) != need:
        raise DataError(f"checkpoint payload has {len(rest)} bytes, expected {need}")
    arrays = np.frombuffer(rest, dtype="<f8")
    params = ModelParams(cfg, arrays[:nparams].copy())
    state = TrainState(
        params=params,
        adam_m=arrays[nparams : 2 * nparams].copy(),
        adam_v=arrays[2 * nparams :].copy(),
        step=step,
    )
    return state, config_text
