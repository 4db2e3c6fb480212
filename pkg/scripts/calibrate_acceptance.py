"""Calibration harness for the training-based acceptance checks.

Runs the learning smoke, conditioning separation, and fine-tuning shift
experiments at candidate settings and prints the measured margins, so the
frozen test settings have known headroom. Not part of the test suite.
"""

import sys
import time

import numpy as np

from se3fm.backbone import SequenceRecord, atoms_to_frames, frames_to_atoms
from se3fm.data import toy_generate
from se3fm.geometry import sample_noise_chain
from se3fm.metrics import assign_secondary, diversity_reward, kabsch_rmsd, tm_score
from se3fm.model import ModelConfig, init_params
from se3fm.sampling import SampleConfig, TaskSpec, euler_sample, fold
from se3fm.training import (
    BatchItem,
    TrainConfig,
    TrainState,
    fm_loss,
    make_epoch_plan,
    reft_filter,
    train_step,
)

MODEL = ModelConfig(hidden=64, trunk_depth=2, seq_embed_dim=16, time_embed_dim=16,
                    pos_embed_dim=16, max_residues=64)


def build_corpus(kinds, n_per_kind, length, class_letters=None, seed0=1000):
    items = []
    for ci, kind in enumerate(kinds):
        for k in range(n_per_kind):
            atoms, seq = toy_generate(kind, length, seed=seed0 + 97 * ci + k)
            if class_letters is not None:
                seq = SequenceRecord.from_letters(class_letters[ci] * length)
            items.append((kind, atoms_to_frames(atoms), seq))
    return items


def train(items, steps, cfg, mcfg=MODEL, state=None, rewards_by_index=None):
    rng = np.random.default_rng(cfg.seed)
    if state is None:
        state = TrainState(params=init_params(mcfg, seed=cfg.seed))
    lengths = [len(c) for _, c, _ in items]
    provs = ["experimental"] * len(items)
    data = [(c, s, np.zeros(len(c), bool)) for _, c, s in items]
    done, epoch = 0, 0
    while done < steps:
        plan = make_epoch_plan(lengths, provs, cfg, seed=cfg.seed + epoch)
        for batch_idx in plan:
            if done >= steps:
                break
            batch = [data[i] for i in batch_idx]
            rewards = None
            if rewards_by_index is not None:
                rewards = np.array([rewards_by_index[i] for i in batch_idx])
            state = train_step(state, batch, rng, cfg, rewards=rewards)
            done += 1
        epoch += 1
    return state


def criterion5(steps=2000, budget=8192, lr=1e-3, length=16):
    t0 = time.time()
    items = build_corpus(["helix", "hairpin"], 64, length)
    cfg = TrainConfig(learning_rate=lr, batch_budget=budget, seed=0)
    eval_rng = np.random.default_rng(77)
    eval_items = [
        BatchItem(x0=c, x1=sample_noise_chain(length, eval_rng), seq=s)
        for _, c, s in items[::4]
    ]
    eval_ts = eval_rng.uniform(cfg.t_min, 1.0, size=len(eval_items))
    state = TrainState(params=init_params(MODEL, seed=0))
    loss0, _ = fm_loss(state.params, eval_items, eval_ts)
    state = train(items, steps, cfg, state=state)
    loss1, _ = fm_loss(state.params, eval_items, eval_ts)
    print(f"[c5] loss {loss0:.1f} -> {loss1:.2f}  ratio {loss0 / loss1:.1f}x "
          f"({time.time() - t0:.0f}s)")

    train_cas = [frames_to_atoms(c)[:, 1] for _, c, _ in items]
    def nearest_rmsd(ca):
        return min(kabsch_rmsd(ca, t)[0] for t in train_cas)
    scfg = SampleConfig(n_steps=50, seed=123)
    gen = []
    for k in range(16):
        task = TaskSpec(mode="unconditional", length=length)
        out = euler_sample(state.params, task, scfg, rng=np.random.default_rng(900 + k))
        gen.append(frames_to_atoms(out)[:, 1])
    noise = [sample_noise_chain(length, np.random.default_rng(4000 + k)).trans
             for k in range(16)]
    g = np.mean([nearest_rmsd(x) for x in gen])
    n = np.mean([nearest_rmsd(x) for x in noise])
    print(f"[c5] mean nearest-RMSD generated {g:.2f} vs noise {n:.2f} "
          f"({time.time() - t0:.0f}s total)")
    return state


def criterion6(steps=2000, budget=8192, lr=1e-3, length=16, n_samples=32):
    t0 = time.time()
    items = build_corpus(["helix", "hairpin"], 64, length, class_letters=["A", "V"])
    cfg = TrainConfig(learning_rate=lr, batch_budget=budget, seed=1, mask_prob=0.5)
    state = train(items, steps, cfg)
    helix_ref = [frames_to_atoms(c)[:, 1] for kind, c, _ in items[:8] if kind == "helix"]
    hairpin_ref = [frames_to_atoms(c)[:, 1] for kind, c, _ in items[-8:] if kind == "hairpin"]

    def classify(ca):
        h = np.mean([tm_score(r, ca) for r in helix_ref])
        p = np.mean([tm_score(r, ca) for r in hairpin_ref])
        return "helix" if h > p else "hairpin"

    scfg = SampleConfig(n_steps=50, seed=10)
    hits = 0
    for k in range(n_samples):
        kind = "helix" if k % 2 == 0 else "hairpin"
        letters = "A" if kind == "helix" else "V"
        seq = SequenceRecord.from_letters(letters * length)
        out = fold(state.params, seq, scfg, rng=np.random.default_rng(7000 + k))
        hits += classify(frames_to_atoms(out)[:, 1]) == kind
    uncond_helix = 0
    for k in range(n_samples):
        task = TaskSpec(mode="unconditional", length=length)
        out = euler_sample(state.params, task, scfg, rng=np.random.default_rng(8000 + k))
        uncond_helix += classify(frames_to_atoms(out)[:, 1]) == "helix"
    print(f"[c6] folding accuracy {hits}/{n_samples}  unconditional helix share "
          f"{uncond_helix}/{n_samples}  ({time.time() - t0:.0f}s)")
    return state


def criterion9(pre_steps=1500, ft_steps=400, budget=8192, lr=1e-3, length=16, n_samples=32):
    t0 = time.time()
    items = build_corpus(["helix", "sheet"], 48, length, seed0=3000)
    cfg = TrainConfig(learning_rate=lr, batch_budget=budget, seed=2)
    state = train(items, pre_steps, cfg)

    def strand_fraction(params, seed0):
        total = 0.0
        scfg = SampleConfig(n_steps=50, seed=seed0)
        for k in range(n_samples):
            task = TaskSpec(mode="unconditional", length=length)
            out = euler_sample(params, task, scfg, rng=np.random.default_rng(seed0 + k))
            labels = assign_secondary(frames_to_atoms(out))
            total += labels.count("E") / length
        return total / n_samples

    before = strand_fraction(state.params, 5000)
    scored = [(i, diversity_reward(assign_secondary(frames_to_atoms(c))))
              for i, (_, c, _) in enumerate(items)]
    kept = reft_filter(scored, keep_fraction=0.25)
    kept_idx = [i for i, _ in kept]
    kinds = [items[i][0] for i in kept_idx]
    print(f"[c9] kept kinds: {dict((k, kinds.count(k)) for k in set(kinds))}")
    ft_items = [items[i] for i in kept_idx]
    rewards = {j: r for j, (i, r) in enumerate(kept)}
    ft_cfg = TrainConfig(learning_rate=lr, batch_budget=budget, seed=3)
    state_ft = train(ft_items, ft_steps, ft_cfg,
                     state=TrainState(params=state.params.copy()),
                     rewards_by_index=rewards)
    after = strand_fraction(state_ft.params, 6000)
    print(f"[c9] strand fraction {before:.3f} -> {after:.3f}  (+{after - before:.3f}) "
          f"({time.time() - t0:.0f}s)")


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "all"
    if which in ("all", "5"):
        criterion5()
    if which in ("all", "6"):
        criterion6()
    if which in ("all", "9"):
        criterion9()
