"""Command-line pipelines: selfcheck, filter, train, reft, sample, fold,
scaffold, eval.

Config files are INI-style key/value sections ([model], [train], [sample],
[filter]); the raw text is echoed verbatim into run manifests so runs diff
cleanly. Every command writes a run manifest (command, seed, version,
config echo, wall clock) next to its primary outputs; primary outputs are
byte-deterministic given identical inputs, seed, and thread count.

Exit codes: 0 ok, 1 selfcheck failure, 2 config error, 3 data error,
4 numeric error.

External sequence-embedding files (``--external-embeddings``) come in two
layouts, both row-major with a (N, DIM) header; values feed the sequence
encoder in place of the learned embedding table and DIM must match the
model's sequence embedding width ``seq_embed_dim``:

- text: first line ``N DIM``, then N whitespace-separated rows of DIM floats;
- binary: magic line ``SE3FM-EMB v1``, a header line ``N DIM DTYPE`` with
  DTYPE ``f4`` or ``f8``, then N*DIM raw little-endian values.
"""

import argparse
import configparser
import itertools
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, metrics, model as model_mod, training
from .backbone import SequenceRecord, atoms_to_frames, frames_to_atoms, token_from_letter
from .coupling import solve_assignment
from .data import (
    FilterConfig,
    StructureDataset,
    load_entry,
    mask_low_plddt,
    parse_pdb,
    read_manifest,
    run_filter_pipeline,
    write_manifest,
    write_pdb,
)
from .errors import ConfigError, DataError, NumericError
from .geometry import FrameChain, rotation_distance, so3_exp, so3_log
from .model import ModelConfig, init_params
from .sampling import SampleConfig, TaskSpec, euler_sample
from .training import TrainConfig, TrainState, load_checkpoint, save_checkpoint, train_step

log = logging.getLogger("se3fm")

VERSION_STRING = f"se3fm-{__version__}"


def _setup_logging():
    level = os.environ.get("SE3FM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _dataclass_from_section(cls, section):
    kwargs = {}
    valid = {f.name: f.type for f in fields(cls)}
    for key, value in section.items():
        if key not in valid:
            raise ConfigError(f"unknown {cls.__name__} key {key!r}")
        current = getattr(cls(), key)
        if isinstance(current, bool):
            kwargs[key] = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            kwargs[key] = int(value)
        elif isinstance(current, float):
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def load_config(path):
    """Returns (raw_text, model_cfg, train_cfg, sample_cfg, filter_cfg)."""
    if path is None:
        return "", ModelConfig(), TrainConfig(), SampleConfig(), FilterConfig()
    raw = Path(path).read_text()
    parser = configparser.ConfigParser()
    try:
        parser.read_string(raw)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    known = {"model", "train", "sample", "filter"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    model_cfg = _dataclass_from_section(ModelConfig, parser["model"] if "model" in parser else {})
    train_cfg = _dataclass_from_section(TrainConfig, parser["train"] if "train" in parser else {})
    sample_cfg = _dataclass_from_section(SampleConfig, parser["sample"] if "sample" in parser else {})
    filter_cfg = _dataclass_from_section(FilterConfig, parser["filter"] if "filter" in parser else {})
    return raw, model_cfg, train_cfg, sample_cfg, filter_cfg


def write_run_manifest(out_dir, command, seed, config_text, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"command {command}",
        f"version {VERSION_STRING}",
        f"seed {seed}",
        f"wall_clock_utc {time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime())}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"{key} {value}")
    # length-prefixed echo keeps the config bytes exact, trailing newlines included
    blob = config_text.encode()
    lines.append(f"config_echo_begin {len(blob)}")
    head = ("\n".join(lines) + "\n").encode()
    (out_dir / "run_manifest.txt").write_bytes(head + blob + b"config_echo_end\n")


def read_manifest_config_echo(path):
    blob = Path(path).read_bytes()
    marker = b"config_echo_begin "
    start = blob.index(marker) + len(marker)
    nl = blob.index(b"\n", start)
    n = int(blob[start:nl])
    return blob[nl + 1 : nl + 1 + n].decode()


def read_sequence_file(path):
    """Header line plus one-letter codes; 'X' maps to the mask token."""
    lines = Path(path).read_text().splitlines()
    body = [ln.strip() for ln in lines if ln.strip() and not ln.startswith(">")]
    letters = "".join(body).upper()
    if not letters:
        raise DataError(f"no sequence letters in {path}")
    tokens = np.array([token_from_letter(c) for c in letters], dtype=int)
    return SequenceRecord(tokens)


EMBEDDING_MAGIC = b"SE3FM-EMB v1\n"


def read_external_embeddings(path):
    blob = Path(path).read_bytes()
    if blob.startswith(EMBEDDING_MAGIC):
        rest = blob[len(EMBEDDING_MAGIC):]
        nl = rest.index(b"\n")
        parts = rest[:nl].split()
        if len(parts) != 3 or parts[2] not in (b"f4", b"f8"):
            raise DataError("binary embedding header must be 'N DIM f4|f8'")
        n, dim = int(parts[0]), int(parts[1])
        dtype = "<f4" if parts[2] == b"f4" else "<f8"
        payload = rest[nl + 1:]
        expected = n * dim * (4 if dtype == "<f4" else 8)
        if len(payload) != expected:
            raise DataError(f"embedding payload has {len(payload)} bytes, expected {expected}")
        return np.frombuffer(payload, dtype=dtype).astype(float).reshape(n, dim)
    lines = blob.decode().split("\n")
    header = lines[0].split()
    if len(header) != 2:
        raise DataError("embedding file must start with 'N DIM'")
    n, dim = int(header[0]), int(header[1])
    values = []
    for ln in lines[1 : n + 1]:
        row = [float(x) for x in ln.split()]
        if len(row) != dim:
            raise DataError(f"embedding row has {len(row)} values, header says {dim}")
        values.append(row)
    if len(values) != n:
        raise DataError(f"embedding file has {len(values)} rows, header says {n}")
    return np.asarray(values, dtype=float)


def write_external_embeddings(path, matrix, dtype="f8"):
    """Binary layout counterpart of `read_external_embeddings`."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2:
        raise DataError("embedding matrix must be 2-D")
    if dtype not in ("f4", "f8"):
        raise DataError("dtype must be 'f4' or 'f8'")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]} {dtype}\n".encode())
        fh.write(matrix.astype("<" + dtype).tobytes())


def parse_index_spec(spec):
    """'2-5,9,12-14' -> sorted unique indices."""
    out = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if len(out) != len(set(out)):
        raise ConfigError(f"index spec {spec!r} has duplicates")
    return np.array(sorted(out), dtype=int)


def _load_training_items(manifest_path, filter_cfg):
    rows = read_manifest(manifest_path)
    if not rows:
        raise DataError(f"empty manifest {manifest_path}")
    base = Path(manifest_path).parent
    items = []
    lengths = []
    provenances = []
    for entry_id, rel_path, provenance, cluster in rows:
        path = Path(rel_path)
        if not path.is_absolute():
            path = base / path
        entry = load_entry(entry_id, path, provenance, cluster)
        chain = atoms_to_frames(entry.atoms)
        residue_mask = (
            mask_low_plddt(entry.plddt, filter_cfg.residue_plddt_threshold)
            if entry.provenance == "synthetic"
            else np.zeros(len(entry), dtype=bool)
        )
        items.append((chain, entry.seq, residue_mask))
        lengths.append(len(entry))
        provenances.append(provenance)
    return items, lengths, provenances


def _run_training(state, items, lengths, provenances, train_cfg, n_steps, rng):
    done = 0
    epoch = 0
    while done < n_steps:
        plan = training.make_epoch_plan(lengths, provenances, train_cfg, seed=train_cfg.seed + epoch)
        for batch_idx in plan:
            if done >= n_steps:
                break
            batch = [items[i] for i in batch_idx]
            state = train_step(state, batch, rng, train_cfg)
            done += 1
            if done % 100 == 0:
                log.info("step %d loss %.4f", done, state.loss_history[-1])
        epoch += 1
    return state


# ---------------------------------------------------------------------------
# Commands

def cmd_selfcheck(args):
    seed = args.seed
    rng = np.random.default_rng(seed)
    failures = 0

    def report(name, ok, detail=""):
        nonlocal failures
        line = f"{'PASS' if ok else 'FAIL'} {name}"
        if detail:
            line += f" ({detail})"
        print(line)
        if not ok:
            failures += 1

    v = rng.uniform(-1, 1, size=(2000, 3))
    v *= (rng.uniform(0, np.pi - 1e-6, size=2000) / np.linalg.norm(v, axis=1))[:, None]
    err = np.abs(so3_log(so3_exp(v)) - v).max()
    report("geometry.exp_log_roundtrip", err < 1e-9, f"max err {err:.2e}")

    from .geometry import geodesic_interpolant, random_rotations

    r0 = random_rotations(200, rng)
    r1 = random_rotations(200, rng)
    d = rotation_distance(r0, r1)
    t = 0.37
    c0 = FrameChain(r0, np.zeros((200, 3)))
    c1 = FrameChain(r1, np.zeros((200, 3)))
    mid = geodesic_interpolant(c0, c1, t)
    lin_err = np.abs(rotation_distance(r0, mid.rot) - t * d).max()
    report("geometry.interpolant_linearity", lin_err < 1e-9, f"max err {lin_err:.2e}")

    ok = True
    worst = 0.0
    for n in (3, 5, 6):
        for _ in range(20):
            c = rng.uniform(0, 10, size=(n, n))
            best = min(
                sum(c[i, p[i]] for i in range(n))
                for p in itertools.permutations(range(n))
            )
            got = solve_assignment(c).cost
            worst = max(worst, abs(got - best))
            ok = ok and abs(got - best) < 1e-9
    report("coupling.assignment_vs_bruteforce", ok, f"max gap {worst:.2e}")

    cfg = ModelConfig(hidden=8, trunk_depth=2, seq_embed_dim=4, time_embed_dim=4, pos_embed_dim=4)
    params = init_params(cfg, seed=seed)
    from .geometry import sample_noise_chain as snc

    chain = snc(5, rng)
    seq = SequenceRecord.fully_masked(5)
    item = training.BatchItem(x0=chain, x1=snc(5, rng), seq=seq)
    tape, loss, _ = training._loss_graph(params, [item], np.array([0.5]), 0.01, np.array([1.0]))
    grad = tape.backward(loss, params.size)
    eps = 1e-5
    idx = rng.integers(0, params.size, size=25)
    max_rel = 0.0
    for i in idx:
        p_hi = params.copy()
        p_hi.flat[i] += eps
        p_lo = params.copy()
        p_lo.flat[i] -= eps
        _, l_hi, _ = training._loss_graph(p_hi, [item], np.array([0.5]), 0.01, np.array([1.0]))
        _, l_lo, _ = training._loss_graph(p_lo, [item], np.array([0.5]), 0.01, np.array([1.0]))
        fd = (l_hi.value - l_lo.value) / (2 * eps)
        denom = max(abs(fd), abs(grad[i]), 1e-8)
        max_rel = max(max_rel, abs(fd - grad[i]) / denom)
    report("model.gradient_vs_finite_difference", max_rel < 1e-4, f"max rel {max_rel:.2e}")

    print(f"selfcheck {'ok' if failures == 0 else 'FAILED'} (seed {seed})")
    return 0 if failures == 0 else 1


def cmd_filter(args):
    config_text, _, _, _, filter_cfg = load_config(args.config)
    rows = read_manifest(args.manifest_in)
    if not rows:
        raise DataError(f"empty manifest {args.manifest_in}")
    base = Path(args.manifest_in).parent
    out_base = Path(args.manifest_out).parent.resolve()
    entries = []
    skipped = []
    for entry_id, rel_path, provenance, cluster in rows:
        path = Path(rel_path)
        if not path.is_absolute():
            path = base / path
        try:
            entries.append((load_entry(entry_id, path, provenance, cluster),
                            os.path.relpath(path.resolve(), out_base), cluster))
        except (OSError, DataError) as exc:
            skipped.append((entry_id, str(exc)))
            log.warning("skipping %s: %s", entry_id, exc)
    dataset = StructureDataset([e for e, _, _ in entries])
    accepted, _, report = run_filter_pipeline(dataset, filter_cfg)
    accepted_ids = {e.id for e in accepted}
    out_rows = [
        (e.id, rel, e.provenance, cluster)
        for (e, rel, cluster) in entries
        if e.id in accepted_ids
    ]
    out_dir = Path(args.manifest_out).parent
    write_run_manifest(out_dir, "filter", args.seed, config_text,
                       {"input": args.manifest_in})
    write_manifest(args.manifest_out, out_rows)
    report_lines = [f"input {report.n_input + len(skipped)}",
                    f"parsed {report.n_input}",
                    f"accepted {report.n_accepted}"]
    for reason, count in sorted(report.reasons.items()):
        report_lines.append(f"rejected[{reason}] {count}")
    for entry_id, why in skipped:
        report_lines.append(f"skipped[{entry_id}] {why}")
    Path(str(args.manifest_out) + ".report").write_text("\n".join(report_lines) + "\n")
    print("\n".join(report_lines))
    if not out_rows:
        raise DataError("no entries survived filtering")
    return 0


def cmd_train(args):
    config_text, model_cfg, train_cfg, _, filter_cfg = load_config(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    items, lengths, provenances = _load_training_items(args.manifest, filter_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(model_cfg, seed=train_cfg.seed)
    if args.freeze_seq_encoder:
        train_cfg.freeze_seq_embedding = True
    state = TrainState(params=params)
    n_steps = args.steps if args.steps is not None else train_cfg.epochs * len(
        training.make_epoch_plan(lengths, provenances, train_cfg)
    )
    state = _run_training(state, items, lengths, provenances, train_cfg, n_steps, rng)
    Path(args.checkpoint_out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.checkpoint_out, state, config_text)
    out_dir = Path(args.checkpoint_out).parent
    final_loss = f"{state.loss_history[-1]:.6f}" if state.loss_history else "nan"
    write_run_manifest(out_dir, "train", train_cfg.seed, config_text,
                       {"steps": n_steps, "final_loss": final_loss})
    print(f"trained {n_steps} steps, final loss {final_loss}")
    return 0


def cmd_reft(args):
    config_text, _, train_cfg, _, filter_cfg = load_config(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    state, _ = load_checkpoint(args.checkpoint_in)
    # optimizer moments reset: fine-tuning starts fresh from the weights
    state = TrainState(params=state.params, step=0)
    sample_paths = sorted(Path(args.samples_dir).glob("*.pdb"))
    if not sample_paths:
        raise DataError(f"no PDB samples under {args.samples_dir}")
    scored = []
    for path in sample_paths:
        atoms, seq, _ = parse_pdb(path.read_text())
        ss = metrics.assign_secondary(atoms)
        reward = metrics.diversity_reward(ss)
        scored.append(((atoms, seq), reward))
    kept = training.reft_filter(scored, keep_fraction=0.25)
    log.info("reft keeps %d of %d samples", len(kept), len(scored))
    items = []
    rewards = []
    for (atoms, seq), reward in kept:
        items.append((atoms_to_frames(atoms), seq, np.zeros(atoms.shape[0], dtype=bool)))
        rewards.append(reward)
    rewards = np.asarray(rewards)
    lengths = {len(chain) for chain, _, _ in items}
    if len(lengths) != 1:
        raise DataError("fine-tuning corpus must share one length at desk scale")
    rng = np.random.default_rng(train_cfg.seed)
    n_steps = args.steps if args.steps is not None else 200
    for _ in range(n_steps):
        state = train_step(state, items, rng, train_cfg, rewards=rewards)
    Path(args.checkpoint_out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.checkpoint_out, state, config_text)
    write_run_manifest(Path(args.checkpoint_out).parent, "reft", train_cfg.seed, config_text, {
        "kept": len(kept),
        "steps": n_steps,
    })
    print(f"reft fine-tuned on {len(kept)} samples for {n_steps} steps")
    return 0


def _sample_common(args, task_builder, command):
    config_text, _, _, sample_cfg, _ = load_config(args.config)
    if args.steps is not None:
        sample_cfg.n_steps = args.steps
    if args.anneal is not None:
        if args.anneal <= 0:
            sample_cfg.anneal = False
        else:
            sample_cfg.anneal = True
            sample_cfg.anneal_scale = args.anneal
    if args.seed is not None:
        sample_cfg.seed = args.seed
    state, _ = load_checkpoint(args.checkpoint)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": VERSION_STRING,
        "seed": sample_cfg.seed,
        "n_steps": sample_cfg.n_steps,
        "anneal": sample_cfg.anneal,
        "anneal_scale": sample_cfg.anneal_scale,
        "t_min": sample_cfg.t_min,
        "noise_trans_scale": sample_cfg.noise_trans_scale,
        "samples": [],
    }
    external = None
    if getattr(args, "external_embeddings", None):
        external = read_external_embeddings(args.external_embeddings)
    for k in range(args.n_samples):
        rng = np.random.default_rng(sample_cfg.seed + k)
        task = task_builder(k)
        if external is not None and len(task.seq) != external.shape[0]:
            raise DataError("external embeddings row count differs from task length")
        if external is not None:
            def field_fn(t, chain, seq):
                return model_mod.forward(state.params, t, chain, seq, external=external)
            chain = euler_sample(state.params, task, sample_cfg, field_fn=field_fn, rng=rng)
        else:
            chain = euler_sample(state.params, task, sample_cfg, rng=rng)
        atoms = frames_to_atoms(chain)
        name = f"sample_{k:03d}"
        (out_dir / f"{name}.pdb").write_text(write_pdb(atoms, task.seq))
        manifest["samples"].append({
            "id": name,
            "mode": task.mode,
            "length": task.length,
            "seed": sample_cfg.seed + k,
            "sequence": task.seq.to_letters(),
        })
    (out_dir / "sampling_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_run_manifest(out_dir, command, sample_cfg.seed, config_text,
                       {"n_samples": args.n_samples})
    print(f"wrote {args.n_samples} samples to {out_dir}")
    return 0


def cmd_sample(args):
    if args.length is None:
        raise ConfigError("--length is required for unconditional sampling")

    def build(_k):
        return TaskSpec(mode="unconditional", length=args.length)

    return _sample_common(args, build, "sample")


def cmd_fold(args):
    seq = read_sequence_file(args.sequence)
    if not seq.observed.all():
        raise ConfigError("folding requires a fully observed sequence (no 'X')")

    def build(_k):
        return TaskSpec(mode="folding", length=len(seq), seq=seq)

    return _sample_common(args, build, "fold")


def cmd_scaffold(args):
    if args.length is None:
        raise ConfigError("--length is required for scaffolding")
    motif_atoms, motif_seq, _ = parse_pdb(Path(args.motif_pdb).read_text())
    indices = parse_index_spec(args.motif_indices)
    if indices.size != motif_atoms.shape[0]:
        raise ConfigError(
            f"motif has {motif_atoms.shape[0]} residues but {indices.size} indices given"
        )
    if indices.size and indices.max() >= args.length:
        raise ConfigError("motif index out of range for --length")
    from .geometry import remove_com
    from .backbone import MASK_TOKEN

    motif_chain = remove_com(atoms_to_frames(motif_atoms))
    tokens = np.full(args.length, MASK_TOKEN, dtype=int)
    tokens[indices] = motif_seq.tokens

    def build(_k):
        return TaskSpec(
            mode="inpaint",
            length=args.length,
            seq=SequenceRecord(tokens),
            fixed_indices=indices,
            fixed_frames=motif_chain,
        )

    code = _sample_common(args, build, "scaffold")
    # record the motif region for downstream evaluation
    out_dir = Path(args.out_dir)
    meta = {"motif_indices": indices.tolist(), "length": args.length}
    (out_dir / "scaffold_spec.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return code


def cmd_eval(args):
    config_text, _, _, _, _ = load_config(args.config)
    sample_paths = sorted(Path(args.samples_dir).glob("*.pdb"))
    if not sample_paths:
        raise DataError(f"no samples under {args.samples_dir}")
    samples = []
    for path in sample_paths:
        atoms, seq, _ = parse_pdb(path.read_text())
        samples.append((path.stem, atoms))
    summary = {"version": VERSION_STRING, "n_samples": len(samples)}

    ss_fractions = {"H": 0.0, "E": 0.0, "C": 0.0}
    rewards = []
    for _, atoms in samples:
        ss = metrics.assign_secondary(atoms)
        for label in ss_fractions:
            ss_fractions[label] += ss.count(label) / len(ss) / len(samples)
        rewards.append(metrics.diversity_reward(ss))
    summary["secondary_fractions"] = {k: round(v, 6) for k, v in sorted(ss_fractions.items())}
    summary["mean_diversity_reward"] = round(float(np.mean(rewards)), 6)

    lengths = {a.shape[0] for _, a in samples}
    if len(lengths) == 1 and len(samples) >= 2:
        cas = [a for _, a in samples]
        summary["mean_pairwise_tm"] = round(metrics.diversity_stats(cas), 6)
        n_clusters, _ = metrics.greedy_cluster(cas)
        summary["clusters_tm_0.5"] = n_clusters

    if args.refolds_dir:
        verdicts = []
        scrmsds = []
        for name, atoms in samples:
            refold_dir = Path(args.refolds_dir) / name
            refolds = []
            for rp in sorted(refold_dir.glob("refold_*.pdb")):
                r_atoms, _, _ = parse_pdb(rp.read_text())
                refolds.append(r_atoms)
            if not refolds:
                log.warning("no refolds for %s", name)
                continue
            verdict = metrics.sc_rmsd_eval(atoms, refolds)
            verdicts.append(verdict.designable)
            scrmsds.append(verdict.scrmsd)
        if verdicts:
            summary["designable_fraction"] = round(float(np.mean(verdicts)), 6)
            summary["mean_scrmsd"] = round(float(np.mean(scrmsds)), 6)

    if args.reference_manifest:
        rows = read_manifest(args.reference_manifest)
        base = Path(args.reference_manifest).parent
        refs = []
        for entry_id, rel_path, provenance, cluster in rows:
            path = Path(rel_path)
            if not path.is_absolute():
                path = base / path
            entry = load_entry(entry_id, path, provenance, cluster)
            refs.append(entry.atoms)
        same_len = [r for r in refs if r.shape[0] in lengths] if len(lengths) == 1 else []
        if same_len:
            frac, mean_max = metrics.novelty_stats([a for _, a in samples], same_len)
            summary["novelty_fraction_tm_below_0.3"] = round(frac, 6)
            summary["mean_max_tm_to_reference"] = round(mean_max, 6)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    table = ["metric\tvalue"]
    for key in sorted(summary):
        if key in ("version",):
            continue
        table.append(f"{key}\t{summary[key]}")
    (out_dir / "eval_report.txt").write_text("\n".join(table) + "\n")
    write_run_manifest(out_dir, "eval", args.seed, config_text, {"samples": len(samples)})
    print("\n".join(table))
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="se3fm", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads; outputs are identical for any value")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0, needs_checkpoint=False, sampling=False):
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=seed_default)
        if needs_checkpoint:
            p.add_argument("--checkpoint", required=True)
        if sampling:
            p.add_argument("--steps", type=int, default=None)
            p.add_argument("--anneal", type=float, default=None,
                           help="annealing scale c in i(t)=c*t; <=0 disables")
            p.add_argument("--n-samples", type=int, default=8)
            p.add_argument("--out-dir", required=True)
            p.add_argument("--external-embeddings", default=None)

    p = sub.add_parser("selfcheck", help="run built-in property suites")
    common(p)
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("filter", help="apply the dataset filtering pipeline")
    common(p)
    p.add_argument("--manifest-in", required=True)
    p.add_argument("--manifest-out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("train", help="flow-matching training")
    common(p, seed_default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--freeze-seq-encoder", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reft", help="reward-filtered fine-tuning")
    common(p, seed_default=None)
    p.add_argument("--checkpoint-in", required=True)
    p.add_argument("--samples-dir", required=True)
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_reft)

    p = sub.add_parser("sample", help="unconditional generation")
    common(p, seed_default=None, needs_checkpoint=True, sampling=True)
    p.add_argument("--length", type=int, default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("fold", help="structure generation conditioned on a sequence")
    common(p, seed_default=None, needs_checkpoint=True, sampling=True)
    p.add_argument("--sequence", required=True, help="header line + one-letter codes")
    p.set_defaults(func=cmd_fold)

    p = sub.add_parser("scaffold", help="in-painting around a fixed motif")
    common(p, seed_default=None, needs_checkpoint=True, sampling=True)
    p.add_argument("--motif-pdb", required=True)
    p.add_argument("--motif-indices", required=True,
                   help="target positions of motif residues, e.g. '5-12,30'")
    p.add_argument("--length", type=int, default=None)
    p.set_defaults(func=cmd_scaffold)

    p = sub.add_parser("eval", help="metrics over generated samples")
    common(p)
    p.add_argument("--samples-dir", required=True)
    p.add_argument("--refolds-dir", default=None)
    p.add_argument("--reference-manifest", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
