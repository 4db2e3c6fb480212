"""Multi-modal vector-field network v(t, x_t, seq).

Topology: a structure encoder (per-residue frame features plus sinusoidal
time and position embeddings through a 2-layer MLP), a sequence encoder
(learned 21-token embedding table plus a 1-layer MLP, or externally supplied
per-residue embeddings), a project-and-concatenate fusion trunk whose final
block sees a mean-pooled global context row, and a decoder head that consumes
the fused representation concatenated with a skip connection from the
structure encoder. Time enters through the structure encoder only.

The forward pass can run batched over same-length chains, shape (B, N, ...);
all stages are pure functions of (params, inputs).
"""

from dataclasses import dataclass, field

import numpy as np

from .backbone import SequenceRecord, VOCAB_SIZE
from .errors import ConfigError, DataError, NumericError
from .geometry import FrameChain, TangentField
from .tape import Tape

OUT_DIM = 6  # 3 rotation + 3 translation coordinates per residue


@dataclass
class ModelConfig:
    hidden: int = 128
    trunk_depth: int = 2
    seq_embed_dim: int = 32
    time_embed_dim: int = 16
    pos_embed_dim: int = 16
    max_residues: int = 512

    def __post_init__(self):
        for name in ("hidden", "trunk_depth", "seq_embed_dim", "time_embed_dim",
                     "pos_embed_dim", "max_residues"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.time_embed_dim % 2 or self.pos_embed_dim % 2:
            raise ConfigError("embedding dims must be even")
        if self.hidden % 2:
            raise ConfigError("hidden width must be even")

    @property
    def struct_in_dim(self):
        return 9 + 3 + self.time_embed_dim + self.pos_embed_dim


def layer_table(cfg: ModelConfig):
    """Ordered map layer name -> (offset, shape) into the flat vector."""
    h = cfg.hidden
    shapes = [
        ("struct_w1", (cfg.struct_in_dim, h)), ("struct_b1", (h,)),
        ("struct_ln1_g", (h,)), ("struct_ln1_b", (h,)),
        ("struct_w2", (h, h)), ("struct_b2", (h,)),
        ("struct_ln2_g", (h,)), ("struct_ln2_b", (h,)),
        ("seq_embed", (VOCAB_SIZE, cfg.seq_embed_dim)),
        ("seq_w", (cfg.seq_embed_dim, h)), ("seq_b", (h,)),
        ("seq_ln_g", (h,)), ("seq_ln_b", (h,)),
        ("fuse_proj_struct", (h, h // 2)), ("fuse_proj_seq", (h, h // 2)),
        ("fuse_ln_g", (h,)), ("fuse_ln_b", (h,)),
    ]
    for k in range(cfg.trunk_depth - 1):
        shapes += [
            (f"trunk{k}_w", (h, h)), (f"trunk{k}_b", (h,)),
            (f"trunk{k}_ln_g", (h,)), (f"trunk{k}_ln_b", (h,)),
        ]
    shapes += [
        ("trunk_ctx_w", (2 * h, h)), ("trunk_ctx_b", (h,)),
        ("trunk_ctx_ln_g", (h,)), ("trunk_ctx_ln_b", (h,)),
        ("dec_w1", (2 * h, h)), ("dec_b1", (h,)),
        ("dec_w2", (h, OUT_DIM)), ("dec_b2", (OUT_DIM,)),
    ]
    table = {}
    offset = 0
    for name, shape in shapes:
        table[name] = (offset, shape)
        offset += int(np.prod(shape))
    return table, offset


@dataclass
class ModelParams:
    """Flat trainable vector plus the layer shape table it is cut from."""

    config: ModelConfig
    flat: np.ndarray
    table: dict = field(default=None)

    def __post_init__(self):
        table, size = layer_table(self.config)
        if self.table is None:
            self.table = table
        self.flat = np.asarray(self.flat, dtype=float)
        if self.flat.shape != (size,):
            raise ConfigError(f"parameter vector has size {self.flat.shape}, expected ({size},)")
        if not np.all(np.isfinite(self.flat)):
            raise NumericError("non-finite model parameters")

    @property
    def size(self):
        return self.flat.size

    def view(self, name):
        offset, shape = self.table[name]
        return self.flat[offset : offset + int(np.prod(shape))].reshape(shape)

    def slice_of(self, name):
        offset, shape = self.table[name]
        return offset, int(np.prod(shape))

    def copy(self):
        return ModelParams(self.config, self.flat.copy())


def init_params(cfg: ModelConfig, seed=0) -> ModelParams:
    """Seeded initialization: scaled Gaussian weights, unit layernorm gains."""
    rng = np.random.default_rng(seed)
    table, size = layer_table(cfg)
    flat = np.zeros(size)
    for name, (offset, shape) in table.items():
        sl = flat[offset : offset + int(np.prod(shape))]
        if name == "seq_embed":
            sl[:] = rng.normal(size=int(np.prod(shape))) / np.sqrt(shape[1])
        elif len(shape) == 2:  # weight matrix
            sl[:] = rng.normal(size=int(np.prod(shape))) / np.sqrt(shape[0])
        elif name.endswith("_g"):  # layernorm gain
            sl[:] = 1.0
        # biases and layernorm shifts stay zero
    return ModelParams(cfg, flat)


def time_embedding(t, dim):
    """Sinusoidal features of scalar times t (shape (B,)) -> (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    k = np.arange(dim // 2)
    freqs = np.pi * 2.0**k
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def positional_embedding(n, dim):
    """Transformer-style positional features -> (n, dim)."""
    pos = np.arange(n, dtype=float)[:, None]
    k = np.arange(dim // 2, dtype=float)[None, :]
    ang = pos / (10000.0 ** (2.0 * k / dim))
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _p(tape, params, name):
    offset, shape = params.table[name]
    return tape.param(params.flat, offset, shape)


def _mlp_block(tape, params, x, prefix):
    h = tape.add(tape.matmul(x, _p(tape, params, f"{prefix}_w")), _p(tape, params, f"{prefix}_b"))
    h = tape.layernorm(h, _p(tape, params, f"{prefix}_ln_g"), _p(tape, params, f"{prefix}_ln_b"))
    return tape.gelu(h)


def structure_features(chains_rot, chains_trans, t, cfg: ModelConfig):
    """Raw per-residue structure input rows (B, N, struct_in_dim); constants."""
    b, n = chains_rot.shape[:2]
    if n > cfg.max_residues:
        raise ConfigError(f"chain length {n} exceeds max_residues {cfg.max_residues}")
    rot_flat = chains_rot.reshape(b, n, 9)
    te = np.broadcast_to(time_embedding(t, cfg.time_embed_dim)[:, None, :], (b, n, cfg.time_embed_dim))
    pe = np.broadcast_to(positional_embedding(n, cfg.pos_embed_dim)[None], (b, n, cfg.pos_embed_dim))
    return np.concatenate([rot_flat, chains_trans, te, pe], axis=2)


def encode_structure_node(tape, params, chains_rot, chains_trans, t):
    feats = tape.const(structure_features(chains_rot, chains_trans, t, params.config))
    h = tape.add(tape.matmul(feats, _p(tape, params, "struct_w1")), _p(tape, params, "struct_b1"))
    h = tape.gelu(tape.layernorm(h, _p(tape, params, "struct_ln1_g"), _p(tape, params, "struct_ln1_b")))
    h = tape.add(tape.matmul(h, _p(tape, params, "struct_w2")), _p(tape, params, "struct_b2"))
    return tape.gelu(tape.layernorm(h, _p(tape, params, "struct_ln2_g"), _p(tape, params, "struct_ln2_b")))


def encode_sequence_node(tape, params, tokens=None, external=None):
    cfg = params.config
    if external is not None:
        external = np.asarray(external, dtype=float)
        if external.shape[-1] != cfg.seq_embed_dim:
            raise DataError(
                f"external embedding dim {external.shape[-1]} != configured {cfg.seq_embed_dim}"
            )
        emb = tape.const(external)
    else:
        emb = tape.gather(_p(tape, params, "seq_embed"), np.asarray(tokens, dtype=int))
    h = tape.add(tape.matmul(emb, _p(tape, params, "seq_w")), _p(tape, params, "seq_b"))
    return tape.gelu(tape.layernorm(h, _p(tape, params, "seq_ln_g"), _p(tape, params, "seq_ln_b")))


def fuse_node(tape, params, struct_feats, seq_feats):
    cfg = params.config
    if struct_feats.value.shape[:-1] != seq_feats.value.shape[:-1]:
        raise DataError("structure and sequence feature lengths differ")
    f = tape.concat(
        [
            tape.matmul(struct_feats, _p(tape, params, "fuse_proj_struct")),
            tape.matmul(seq_feats, _p(tape, params, "fuse_proj_seq")),
        ]
    )
    f = tape.layernorm(f, _p(tape, params, "fuse_ln_g"), _p(tape, params, "fuse_ln_b"))
    for k in range(cfg.trunk_depth - 1):
        f = _mlp_block(tape, params, f, f"trunk{k}")
    ctx = tape.broadcast(tape.mean_axis(f, axis=-2), f.value.shape)
    f = tape.concat([f, ctx])
    return _mlp_block(tape, params, f, "trunk_ctx")


def decode_node(tape, params, fused, struct_skip, use_skip=True):
    if use_skip:
        skip = struct_skip
    else:
        skip = tape.const(np.zeros_like(struct_skip.value))
    d = tape.concat([fused, skip])
    d = tape.gelu(tape.add(tape.matmul(d, _p(tape, params, "dec_w1")), _p(tape, params, "dec_b1")))
    return tape.add(tape.matmul(d, _p(tape, params, "dec_w2")), _p(tape, params, "dec_b2"))


def forward_batch(tape, params, t, chains_rot, chains_trans, tokens, external=None, use_skip=True):
    """Build the full network on `tape`; returns the (B, N, 6) output node."""
    struct = encode_structure_node(tape, params, chains_rot, chains_trans, t)
    seq = encode_sequence_node(tape, params, tokens=tokens, external=external)
    fused = fuse_node(tape, params, struct, seq)
    return decode_node(tape, params, fused, struct, use_skip=use_skip)


# Convenience single-chain wrappers returning plain arrays.

def _check_t(t):
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"time {t} outside [0, 1]")
    return t


def encode_structure(params, chain: FrameChain, t):
    t = _check_t(t)
    node = encode_structure_node(Tape(), params, chain.rot[None], chain.trans[None], np.array([t]))
    return node.value[0]


def encode_sequence(params, seq: SequenceRecord = None, external=None):
    tokens = None if seq is None else seq.tokens[None]
    ext = None if external is None else np.asarray(external, dtype=float)[None]
    node = encode_sequence_node(Tape(), params, tokens=tokens, external=ext)
    return node.value[0]


def fuse(params, struct_feats, seq_feats):
    tape = Tape()
    node = fuse_node(
        tape,
        params,
        tape.const(np.asarray(struct_feats)[None]),
        tape.const(np.asarray(seq_feats)[None]),
    )
    return node.value[0]


def decode(params, fused, struct_skip, use_skip=True) -> TangentField:
    tape = Tape()
    node = decode_node(
        tape,
        params,
        tape.const(np.asarray(fused)[None]),
        tape.const(np.asarray(struct_skip)[None]),
        use_skip=use_skip,
    )
    out = node.value[0]
    return TangentField(out[:, :3], out[:, 3:])


def forward(params, t, chain: FrameChain, seq: SequenceRecord, external=None, use_skip=True) -> TangentField:
    """Evaluate the vector field at one state; output is per-residue (rot, trans)."""
    t = _check_t(t)
    if len(chain) != len(seq):
        raise DataError("chain and sequence length differ")
    ext = None if external is None else np.asarray(external, dtype=float)[None]
    node = forward_batch(
        Tape(), params, np.array([t]), chain.rot[None], chain.trans[None],
        seq.tokens[None], external=ext, use_skip=use_skip,
    )
    out = node.value[0]
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite vector-field output")
    return TangentField(out[:, :3], out[:, 3:])


def backward(tape: Tape, loss_node, params: ModelParams, adjoint=1.0):
    """Exact reverse-mode gradient of a recorded scalar loss."""
    return tape.backward(loss_node, params.size, adjoint=adjoint)
