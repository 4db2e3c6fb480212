"""Acceptance gate: one test per release criterion, each printing a
pass/fail line with its measured margin. Training-based checks run at desk
scale with seeds and settings frozen by calibration; every tolerance is
asserted exactly as stated.
"""

import itertools
import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from se3fm.backbone import ATOM_CA, SequenceRecord, atoms_to_frames, frames_to_atoms
from se3fm.cli import main as cli_main
from se3fm.coupling import pairwise_cost, solve_assignment
from se3fm.data import (
    FilterConfig,
    StructureEntry,
    filter_global,
    mask_low_plddt,
    toy_generate,
    write_manifest,
    write_pdb,
)
from se3fm.geometry import (
    conditional_field,
    geodesic_interpolant,
    random_rotations,
    rotation_distance,
    sample_noise_chain,
    so3_exp,
    so3_log,
    so3_log_at,
)
from se3fm.metrics import (
    diversity_reward,
    kabsch_rmsd,
    sc_rmsd_eval,
    tm_d0,
    tm_score,
    wasserstein2_points,
    assign_secondary,
)
from se3fm.model import ModelConfig, init_params
from se3fm.sampling import SampleConfig, TaskSpec, euler_sample, fold, scaffold
from se3fm.training import (
    BatchItem,
    TrainConfig,
    TrainState,
    fm_loss,
    make_epoch_plan,
    reft_filter,
    train_step,
    _loss_graph,
)

MODEL = ModelConfig(hidden=64, trunk_depth=2, seq_embed_dim=16, time_embed_dim=16,
                    pos_embed_dim=16, max_residues=64)


@contextmanager
def criterion(name, budget_s):
    start = time.time()
    try:
        yield
    except BaseException:
        print(f"[acceptance] {name}: FAIL ({time.time() - start:.1f}s)")
        raise
    elapsed = time.time() - start
    print(f"[acceptance] {name}: PASS ({elapsed:.1f}s, budget {budget_s}s)")
    assert elapsed < budget_s


def build_corpus(kinds, n_per_kind, length=16, class_letters=None, seed0=1000):
    items = []
    for ci, kind in enumerate(kinds):
        for k in range(n_per_kind):
            atoms, seq = toy_generate(kind, length, seed=seed0 + 97 * ci + k)
            if class_letters is not None:
                seq = SequenceRecord.from_letters(class_letters[ci] * length)
            items.append((kind, atoms_to_frames(atoms), seq))
    return items


def run_training(items, steps, cfg, state=None, rewards_by_index=None):
    rng = np.random.default_rng(cfg.seed)
    if state is None:
        state = TrainState(params=init_params(MODEL, seed=cfg.seed))
    lengths = [len(c) for _, c, _ in items]
    provs = ["experimental"] * len(items)
    data = [(c, s, np.zeros(len(c), bool)) for _, c, s in items]
    done, epoch = 0, 0
    while done < steps:
        plan = make_epoch_plan(lengths, provs, cfg, seed=cfg.seed + epoch)
        for batch_idx in plan:
            if done >= steps:
                break
            rewards = None
            if rewards_by_index is not None:
                rewards = np.array([rewards_by_index[i] for i in batch_idx])
            state = train_step(state, [data[i] for i in batch_idx], rng, cfg,
                               rewards=rewards)
            done += 1
        epoch += 1
    return state


def test_criterion_1_geometry_suite():
    with criterion("1 geometry suite", 10):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(10_000, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        v *= rng.uniform(0.0, np.pi - 1e-6, size=10_000)[:, None]
        assert np.abs(so3_log(so3_exp(v)) - v).max() < 1e-9

        x0 = sample_noise_chain(256, rng)
        x1 = sample_noise_chain(256, rng)
        d = rotation_distance(x0.rot, x1.rot)
        for t in (0.1, 0.25, 0.5, 0.75, 0.9):
            xt = geodesic_interpolant(x0, x1, t)
            assert np.abs(rotation_distance(x0.rot, xt.rot) - t * d).max() < 1e-9

        for t in np.linspace(0.05, 1.0, 12):
            xt = geodesic_interpolant(x0, x1, t)
            field = conditional_field(xt, x0, t, t_min=0.05)
            assert np.abs(np.linalg.norm(field.rot, axis=1) - d).max() < 1e-8

        g = random_rotations(1, rng)[0]
        r0 = random_rotations(1000, rng)
        r1 = random_rotations(1000, rng)
        assert np.abs(so3_log_at(g @ r0, g @ r1) - so3_log_at(r0, r1)).max() < 1e-9


def test_criterion_2_analytic_field_transport():
    with criterion("2 analytic-field transport", 30):
        atoms, _ = toy_generate("helix", 16, seed=3)
        x0 = atoms_to_frames(atoms)

        def transport(n_steps):
            # t_min tied to the step size: the endpoint gap scales as t_min,
            # so a fixed clamp would floor the error instead of ~1/n decay
            t_min = 1.0 / (2 * n_steps)
            cfg = SampleConfig(n_steps=n_steps, anneal=False, t_min=t_min,
                               noise_trans_scale=5.0, seed=11)
            task = TaskSpec(mode="unconditional", length=16)
            out = euler_sample(
                None, task, cfg,
                field_fn=lambda t, chain, _s: conditional_field(chain, x0, t, t_min=t_min),
            )
            return (float(rotation_distance(out.rot, x0.rot).mean()),
                    float(np.linalg.norm(out.trans - x0.trans, axis=1).mean()))

        rot500, trans500 = transport(500)
        assert rot500 < 0.02
        assert trans500 < 0.02
        errs = [transport(n) for n in (25, 50, 100, 200)]
        for series in (0, 1):
            vals = [e[series] for e in errs]
            assert all(a > b for a, b in zip(vals, vals[1:]))
            for a, b in zip(vals, vals[1:]):
                assert 0.35 <= b / a <= 0.65


def test_criterion_3_gradient_correctness():
    with criterion("3 gradient vs finite differences", 60):
        cfg = ModelConfig(hidden=16, trunk_depth=2, seq_embed_dim=8,
                          time_embed_dim=8, pos_embed_dim=8, max_residues=64)
        params = init_params(cfg, seed=3)
        rng = np.random.default_rng(0)
        items = [
            BatchItem(
                x0=sample_noise_chain(5, rng, trans_scale=2.0),
                x1=sample_noise_chain(5, rng, trans_scale=2.0),
                seq=SequenceRecord(rng.integers(0, 20, size=5)),
            )
            for _ in range(2)
        ]
        ts = np.array([0.3, 0.8])
        w = np.full(2, 0.5)
        tape, loss, _ = _loss_graph(params, items, ts, 0.01, w)
        grad = tape.backward(loss, params.size)
        eps = 1e-5
        max_rel = 0.0
        for i in range(params.size):
            hi = params.copy()
            hi.flat[i] += eps
            lo = params.copy()
            lo.flat[i] -= eps
            _, lh, _ = _loss_graph(hi, items, ts, 0.01, w)
            _, ll, _ = _loss_graph(lo, items, ts, 0.01, w)
            fd = (lh.value - ll.value) / (2 * eps)
            # 1e-3 floor keeps the check meaningful where the FD signal
            # itself drowns in f64 cancellation noise
            rel = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-3)
            max_rel = max(max_rel, rel)
        assert max_rel < 1e-4, f"max relative gradient error {max_rel:.3e}"


def test_criterion_4_assignment_oracle():
    with criterion("4 optimal-transport oracle", 20):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 8))
            cost = rng.uniform(0, 10, size=(n, n))
            got = solve_assignment(cost).cost
            best = min(
                sum(cost[i, p[i]] for i in range(n))
                for p in itertools.permutations(range(n))
            )
            assert abs(got - best) < 1e-9
        items = build_corpus(["helix", "hairpin"], 16)
        chains = [c for _, c, _ in items]
        for trial in range(10):
            noise = [sample_noise_chain(16, rng) for _ in chains]
            cost = pairwise_cost(chains, noise)
            assert solve_assignment(cost).cost <= np.trace(cost) + 1e-9


@pytest.fixture(scope="module")
def learned_model():
    items = build_corpus(["helix", "hairpin"], 64)
    cfg = TrainConfig(learning_rate=1e-3, batch_budget=8192, seed=0)
    eval_rng = np.random.default_rng(77)
    eval_items = [
        BatchItem(x0=c, x1=sample_noise_chain(16, eval_rng), seq=s)
        for _, c, s in items[::4]
    ]
    eval_ts = eval_rng.uniform(cfg.t_min, 1.0, size=len(eval_items))
    state = TrainState(params=init_params(MODEL, seed=0))
    loss0, _ = fm_loss(state.params, eval_items, eval_ts)
    state = run_training(items, 2000, cfg, state=state)
    loss1, _ = fm_loss(state.params, eval_items, eval_ts)
    return items, state, loss0, loss1


def test_criterion_5_learning_smoke(learned_model):
    with criterion("5 learning smoke", 15 * 60):
        items, state, loss0, loss1 = learned_model
        assert loss1 * 5.0 <= loss0, f"loss {loss0:.1f} -> {loss1:.2f}"

        train_cas = [frames_to_atoms(c)[:, ATOM_CA] for _, c, _ in items]

        def nearest(ca):
            return min(kabsch_rmsd(ca, t)[0] for t in train_cas)

        scfg = SampleConfig(n_steps=50, seed=123)
        gen = []
        for k in range(16):
            out = euler_sample(state.params, TaskSpec(mode="unconditional", length=16),
                               scfg, rng=np.random.default_rng(900 + k))
            gen.append(frames_to_atoms(out)[:, ATOM_CA])
        noise = [sample_noise_chain(16, np.random.default_rng(4000 + k)).trans
                 for k in range(16)]
        gen_mean = float(np.mean([nearest(x) for x in gen]))
        noise_mean = float(np.mean([nearest(x) for x in noise]))
        assert gen_mean < noise_mean, (gen_mean, noise_mean)


def test_criterion_6_conditioning_separation():
    with criterion("6 conditioning separation", 20 * 60):
        length, n_samples = 16, 32
        items = build_corpus(["helix", "hairpin"], 64, class_letters=["A", "V"])
        cfg = TrainConfig(learning_rate=1e-3, batch_budget=8192, seed=1, mask_prob=0.5)
        state = run_training(items, 2000, cfg)
        helix_ref = [frames_to_atoms(c)[:, ATOM_CA]
                     for kind, c, _ in items[:8] if kind == "helix"]
        hairpin_ref = [frames_to_atoms(c)[:, ATOM_CA]
                       for kind, c, _ in items[-8:] if kind == "hairpin"]

        def classify(ca):
            h = np.mean([tm_score(r, ca) for r in helix_ref])
            p = np.mean([tm_score(r, ca) for r in hairpin_ref])
            return "helix" if h > p else "hairpin"

        scfg = SampleConfig(n_steps=50, seed=10)
        hits = 0
        for k in range(n_samples):
            kind = "helix" if k % 2 == 0 else "hairpin"
            seq = SequenceRecord.from_letters(("A" if kind == "helix" else "V") * length)
            out = fold(state.params, seq, scfg, rng=np.random.default_rng(7000 + k))
            hits += classify(frames_to_atoms(out)[:, ATOM_CA]) == kind
        uncond_helix = 0
        for k in range(n_samples):
            out = euler_sample(state.params, TaskSpec(mode="unconditional", length=length),
                               scfg, rng=np.random.default_rng(8000 + k))
            uncond_helix += classify(frames_to_atoms(out)[:, ATOM_CA]) == "helix"
        print(f"  folding accuracy {hits}/{n_samples}, "
              f"unconditional helix share {uncond_helix}/{n_samples}")
        assert hits >= 0.8 * n_samples


def test_criterion_7_inpainting_contract():
    with criterion("7 in-painting motif contract", 60):
        params = init_params(MODEL, seed=4)
        motif_atoms, motif_seq = toy_generate("helix", 6, seed=9)
        motif = atoms_to_frames(motif_atoms)
        idx = np.array([2, 3, 4, 9, 10, 11])
        for k in range(10):
            out = scaffold(params, motif, motif_seq, idx, total_length=16,
                           cfg=SampleConfig(n_steps=20, seed=50 + k))
            rmsd, _ = kabsch_rmsd(out.trans[idx], motif.trans)
            assert rmsd < 1e-9


def test_criterion_8_metrics_oracles():
    with criterion("8 metrics oracles", 30):
        atoms, _ = toy_generate("mixed", 40, seed=0)
        ca = atoms[:, ATOM_CA]
        assert tm_score(ca, ca) == pytest.approx(1.0, abs=1e-12)
        assert abs(tm_d0(100) - 3.6517) < 1e-3

        assert diversity_reward("H" * 12) == pytest.approx(1.0, abs=1e-6)
        assert diversity_reward("E" * 12) == pytest.approx(2.0, abs=1e-6)
        expected = (7.0 / 6.0) * (1.0 - math.log(3.0))
        assert diversity_reward("HCE" * 4) == pytest.approx(expected, abs=1e-6)

        rng = np.random.default_rng(1)
        for m in (3, 5, 6):
            p = rng.normal(size=(m, 2))
            q = rng.normal(size=(m, 2))
            best = min(
                np.mean([np.sum((p[i] - q[perm[i]]) ** 2) for i in range(m)])
                for perm in itertools.permutations(range(m))
            )
            assert wasserstein2_points(p, q) == pytest.approx(math.sqrt(best), abs=1e-9)

        # filtering boundaries
        fc = FilterConfig(min_residues=4)
        atoms70, seq70 = toy_generate("helix", 70, seed=2)
        low = StructureEntry("a", atoms70, seq70, np.full(70, 84.9), "synthetic", "c")
        high = StructureEntry("b", atoms70, seq70, np.full(70, 85.1), "synthetic", "c")
        ok_low, reason = filter_global(low, fc)
        ok_high, _ = filter_global(high, fc)
        assert not ok_low and "avg pLDDT" in reason
        assert ok_high
        assert list(mask_low_plddt(np.array([69.999, 70.0, 70.001]))) == [True, False, False]

        # scRMSD strict threshold at exactly 2.0
        noise = rng.normal(size=ca.shape)
        noise -= noise.mean(axis=0)
        _, (rot, t) = kabsch_rmsd(ca, ca + noise)
        resid = (ca + noise) @ rot.T + t - ca
        resid *= 2.0 / np.sqrt(np.mean(np.sum(resid**2, axis=1)))
        verdict = sc_rmsd_eval(ca, [ca + resid])
        assert verdict.scrmsd == pytest.approx(2.0, abs=1e-6)
        assert not verdict.designable


def test_criterion_9_reft_shift():
    with criterion("9 fine-tuning shifts composition", 20 * 60):
        length, n_samples = 16, 32
        items = build_corpus(["helix", "sheet"], 48, seed0=3000)
        cfg = TrainConfig(learning_rate=1e-3, batch_budget=8192, seed=2)
        state = run_training(items, 1500, cfg)

        def strand_fraction(params, seed0):
            total = 0.0
            scfg = SampleConfig(n_steps=50, seed=seed0)
            for k in range(n_samples):
                out = euler_sample(params, TaskSpec(mode="unconditional", length=length),
                                   scfg, rng=np.random.default_rng(seed0 + k))
                labels = assign_secondary(frames_to_atoms(out))
                total += labels.count("E") / length
            return total / n_samples

        before = strand_fraction(state.params, 5000)
        scored = [(i, diversity_reward(assign_secondary(frames_to_atoms(c))))
                  for i, (_, c, _) in enumerate(items)]
        kept = reft_filter(scored, keep_fraction=0.25)
        ft_items = [items[i] for i, _ in kept]
        rewards = {j: r for j, (_, r) in enumerate(kept)}
        ft_cfg = TrainConfig(learning_rate=1e-3, batch_budget=8192, seed=3)
        # optimizer moments reset; weights continue from the pretrained model
        state_ft = run_training(ft_items, 1000, ft_cfg,
                                state=TrainState(params=state.params.copy()),
                                rewards_by_index=rewards)
        after = strand_fraction(state_ft.params, 6000)
        print(f"  strand fraction {before:.3f} -> {after:.3f}")
        assert after - before >= 0.10


def test_criterion_10_pipeline_determinism(tmp_path):
    with criterion("10 pipeline determinism", 10 * 60):
        config_text = (
            "[model]\nhidden = 16\ntrunk_depth = 2\nseq_embed_dim = 8\n"
            "time_embed_dim = 8\npos_embed_dim = 8\nmax_residues = 64\n\n"
            "[train]\nlearning_rate = 0.001\nbatch_budget = 2000\nseed = 0\n\n"
            "[sample]\nn_steps = 8\n\n[filter]\nmin_residues = 4\nrg_coeff = 9.0\n"
        )
        cfg_path = tmp_path / "config.ini"
        cfg_path.write_text(config_text)
        corpus_dir = tmp_path / "corpus"
        corpus_dir.mkdir()
        rows = []
        for k in range(8):
            atoms, seq = toy_generate("helix" if k % 2 == 0 else "hairpin", 16,
                                      seed=600 + k)
            (corpus_dir / f"toy_{k}.pdb").write_text(write_pdb(atoms, seq))
            rows.append((f"toy_{k}", f"toy_{k}.pdb", "experimental", f"c{k % 2}"))
        write_manifest(corpus_dir / "manifest.tsv", rows)

        def pipeline(tag, threads):
            root = tmp_path / tag
            root.mkdir()
            filtered = root / "filtered.tsv"
            ckpt = root / "model.ckpt"
            samples = root / "samples"
            evals = root / "eval"
            args = ["--threads", str(threads)]
            assert cli_main(args + ["filter", "--manifest-in", str(corpus_dir / "manifest.tsv"),
                                    "--manifest-out", str(filtered), "--config", str(cfg_path)]) == 0
            assert cli_main(args + ["train", "--manifest", str(filtered),
                                    "--checkpoint-out", str(ckpt), "--config", str(cfg_path),
                                    "--steps", "200", "--seed", "0"]) == 0
            assert cli_main(args + ["sample", "--checkpoint", str(ckpt), "--n-samples", "8",
                                    "--length", "16", "--out-dir", str(samples),
                                    "--config", str(cfg_path), "--seed", "0"]) == 0
            assert cli_main(args + ["eval", "--samples-dir", str(samples),
                                    "--reference-manifest", str(filtered),
                                    "--out-dir", str(evals), "--config", str(cfg_path)]) == 0
            return root

        a = pipeline("run_a", 1)
        b = pipeline("run_b", 4)
        for rel in ("filtered.tsv", "model.ckpt", "samples/sampling_manifest.json",
                    "eval/summary.json", "eval/eval_report.txt"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
        sample_names = sorted(p.name for p in (a / "samples").glob("*.pdb"))
        assert len(sample_names) == 8
        for name in sample_names:
            assert (a / "samples" / name).read_bytes() == (b / "samples" / name).read_bytes()
        summary = json.loads((a / "eval" / "summary.json").read_text())
        assert summary["n_samples"] == 8
