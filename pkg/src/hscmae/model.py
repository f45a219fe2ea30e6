"""The dual-path network: two modality encoders, single-token cross-attention
fusion, linear projectors into the retrieval space, and per-modality decoders.

Each sample is treated as one token in the fusion block; with a length-1 key
sequence the attention softmax weight is identically 1, so the block reduces
to a learnable cross-modal mixer with residual connection and layer norm.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class ModelConfig:
    audio_widths: tuple = (128, 1024, 1024, 1024)
    visual_widths: tuple = (1024, 1024, 1024, 1024)
    heads: int = 64
    proj_dim: int = 32
    dropout: float = 0.2

    def __post_init__(self):
        if len(self.audio_widths) < 2 or len(self.visual_widths) < 2:
            raise ValueError("encoder widths must contain at least one layer")
        if self.audio_widths[-1] != self.visual_widths[-1]:
            raise ValueError("encoder output widths must match for fusion")
        if self.audio_widths[-1] % self.heads:
            raise ValueError(f"model dim {self.audio_widths[-1]} not divisible by {self.heads} heads")
        if self.proj_dim < 1:
            raise ValueError("proj_dim must be >= 1")

    @property
    def model_dim(self):
        return self.audio_widths[-1]

    @property
    def d_audio(self):
        return self.audio_widths[0]

    @property
    def d_visual(self):
        return self.visual_widths[0]


LOSS_NAMES = ("rec", "cca", "infonce", "dis")


class ModelParams:
    """All learnable weights plus batch-norm running statistics.

    ``params`` maps name -> Parameter, ``buffers`` maps name -> ndarray
    (running mean/var of the first-layer batch norms). Insertion order is
    fixed by construction and reused for checkpoints and optimizer walks.
    """

    def __init__(self, config, seed=0, init=True):
        self.config = config
        self.params = {}
        self.buffers = {}
        self.zero_row_warnings = 0
        rng = np.random.default_rng(seed)

        def linear(name, fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-lim, lim, (fan_in, fan_out)) if init else np.zeros((fan_in, fan_out))
            self.params[f"{name}.w"] = dc.Parameter(w, name=f"{name}.w")
            self.params[f"{name}.b"] = dc.Parameter(np.zeros((1, fan_out)), name=f"{name}.b")

        def norm(name, d):
            self.params[f"{name}.gamma"] = dc.Parameter(np.ones((1, d)), name=f"{name}.gamma")
            self.params[f"{name}.beta"] = dc.Parameter(np.zeros((1, d)), name=f"{name}.beta")

        for mod, widths in (("a", config.audio_widths), ("v", config.visual_widths)):
            for i in range(len(widths) - 1):
                linear(f"enc.{mod}.{i}", widths[i], widths[i + 1])
                if i == 0:
                    norm(f"enc.{mod}.{i}.bn", widths[i + 1])
                    self.buffers[f"enc.{mod}.{i}.bn.mean"] = np.zeros((1, widths[i + 1]))
                    self.buffers[f"enc.{mod}.{i}.bn.var"] = np.ones((1, widths[i + 1]))
                else:
                    norm(f"enc.{mod}.{i}.ln", widths[i + 1])

        m = config.model_dim
        for direction in ("a2v", "v2a"):
            for proj in ("wq", "wk", "wv", "wo"):
                lim = np.sqrt(6.0 / (m + m))
                w = rng.uniform(-lim, lim, (m, m)) if init else np.zeros((m, m))
                self.params[f"fuse.{direction}.{proj}"] = dc.Parameter(w, name=f"fuse.{direction}.{proj}")
            norm(f"fuse.{direction}.ln", m)

        for mod in ("a", "v"):
            linear(f"proj.{mod}", m, config.proj_dim)

        for mod, d_out in (("a", config.d_audio), ("v", config.d_visual)):
            dec_widths = (m, m, m, d_out)
            for i in range(3):
                linear(f"dec.{mod}.{i}", dec_widths[i], dec_widths[i + 1])

        for name in LOSS_NAMES:
            self.params[f"sigma.{name}"] = dc.Parameter(np.zeros((1, 1)), name=f"sigma.{name}", decay=False)

    # -- access helpers ----------------------------------------------------

    def t(self, name):
        return self.params[name].tensor()

    def sigma(self, loss_name):
        return self.params[f"sigma.{loss_name}"]

    def parameters(self):
        return list(self.params.values())

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def copy(self):
        other = ModelParams(self.config, init=False)
        for name, p in self.params.items():
            other.params[name].value[...] = p.value
        for name, b in self.buffers.items():
            other.buffers[name][...] = b
        return other

    def state_entries(self):
        entries = {name: p.value for name, p in self.params.items()}
        entries.update(self.buffers)
        return entries

    def load_state_entries(self, entries, prefix=""):
        for name, p in self.params.items():
            p.value[...] = entries[prefix + name]
        for name in self.buffers:
            self.buffers[name][...] = entries[prefix + name]


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def encode(mp, xa, xv, train, rng=None):
    """Per-modality MLP pipeline: linear -> norm -> tanh -> dropout."""
    cfg = mp.config
    if train and xa.shape[0] < 2:
        raise dc.ShapeError("encode: train mode needs a batch of at least 2 samples")
    if xa.shape[1] != cfg.d_audio or xv.shape[1] != cfg.d_visual:
        raise dc.ShapeError(f"encode: inputs {xa.shape}/{xv.shape} vs dims "
                            f"{cfg.d_audio}/{cfg.d_visual}")

    def run(mod, widths, h):
        for i in range(len(widths) - 1):
            h = dc.add(dc.matmul(h, mp.t(f"enc.{mod}.{i}.w")), mp.t(f"enc.{mod}.{i}.b"))
            if i == 0:
                h = dc.batch_norm(h, mp.t(f"enc.{mod}.{i}.bn.gamma"), mp.t(f"enc.{mod}.{i}.bn.beta"),
                                  mp.buffers[f"enc.{mod}.{i}.bn.mean"],
                                  mp.buffers[f"enc.{mod}.{i}.bn.var"],
                                  train, update_stats=train)
            else:
                h = dc.layer_norm(h, mp.t(f"enc.{mod}.{i}.ln.gamma"), mp.t(f"enc.{mod}.{i}.ln.beta"))
            h = dc.tanh(h)
            h = dc.dropout(h, cfg.dropout, train, rng)
        return h

    return run("a", cfg.audio_widths, xa), run("v", cfg.visual_widths, xv)


def fuse(mp, ha, hv):
    """Cross-modal attention with one token per sample.

    The softmax over a length-1 key sequence is identically 1, so the Q/K
    projections cannot influence the output (their gradients are exactly
    zero) and the concatenated per-head value slices equal the full value
    projection. The block therefore computes
    layernorm(h_query + W_o(W_v h_other)).
    """
    if ha.shape != hv.shape or ha.shape[1] != mp.config.model_dim:
        raise dc.ShapeError(f"fuse: {ha.shape} vs {hv.shape}, model dim {mp.config.model_dim}")

    def one(direction, hq, hkv):
        attended = dc.matmul(dc.matmul(hkv, mp.t(f"fuse.{direction}.wv")), mp.t(f"fuse.{direction}.wo"))
        return dc.layer_norm(dc.add(hq, attended),
                             mp.t(f"fuse.{direction}.ln.gamma"), mp.t(f"fuse.{direction}.ln.beta"))

    return one("a2v", ha, hv), one("v2a", hv, ha)


def project(mp, ua, uv):
    """Linear projection to the retrieval space, rows L2-normalized.

    Rows whose pre-normalization norm is below 1e-12 stay zero and bump
    ``mp.zero_row_warnings``.
    """
    out = []
    for mod, u in (("a", ua), ("v", uv)):
        z = dc.add(dc.matmul(u, mp.t(f"proj.{mod}.w")), mp.t(f"proj.{mod}.b"))
        mp.zero_row_warnings += int((np.linalg.norm(z.value, axis=1) < 1e-12).sum())
        out.append(dc.l2_normalize_rows(z))
    return tuple(out)


def decode(mp, ua, uv):
    """Mirror-image 3-layer MLP per modality; tanh hidden, linear output."""
    def run(mod, h):
        for i in range(3):
            h = dc.add(dc.matmul(h, mp.t(f"dec.{mod}.{i}.w")), mp.t(f"dec.{mod}.{i}.b"))
            if i < 2:
                h = dc.tanh(h)
        return h

    return run("a", ua), run("v", uv)


def forward_embed(mp, xa, xv, train, rng=None):
    """encode -> fuse -> project; returns (z_a, z_v, u_a, u_v) tape nodes."""
    ha, hv = encode(mp, xa, xv, train, rng)
    ua, uv = fuse(mp, ha, hv)
    za, zv = project(mp, ua, uv)
    return za, zv, ua, uv


def embed_arrays(mp, audio, visual):
    """Clean eval-mode embeddings as plain arrays (no gradients consumed)."""
    za, zv, _, _ = forward_embed(mp, dc.const(audio), dc.const(visual), train=False)
    return za.value, zv.value


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"HSCMAE01"


class CheckpointError(Exception):
    pass


def save_entries(path, entries):
    """Versioned binary container: magic, then per-matrix records
    (u32 name length, UTF-8 name, u32 rows, u32 cols, little-endian f64)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in entries.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            if arr.ndim != 2:
                raise CheckpointError(f"entry {name!r} is not a matrix")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.tobytes())


def load_entries(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    entries = {}
    off = 8
    while off < len(blob):
        if off + 4 > len(blob):
            raise CheckpointError(f"{path}: truncated record header at offset {off}")
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + nlen + 8 > len(blob):
            raise CheckpointError(f"{path}: truncated record at offset {off}")
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        nbytes = rows * cols * 8
        if off + nbytes > len(blob):
            raise CheckpointError(f"{path}: entry {name!r} expects {nbytes} bytes, "
                                  f"{len(blob) - off} available")
        entries[name] = np.frombuffer(blob, dtype="<f8", count=rows * cols,
                                      offset=off).reshape(rows, cols).copy()
        off += nbytes
    return entries


def config_entries(config):
    return {
        "config/audio_widths": np.array([config.audio_widths], dtype=np.float64),
        "config/visual_widths": np.array([config.visual_widths], dtype=np.float64),
        "config/heads": np.array([[config.heads]], dtype=np.float64),
        "config/proj_dim": np.array([[config.proj_dim]], dtype=np.float64),
        "config/dropout": np.array([[config.dropout]], dtype=np.float64),
    }


def config_from_entries(entries):
    return ModelConfig(
        audio_widths=tuple(int(w) for w in entries["config/audio_widths"][0]),
        visual_widths=tuple(int(w) for w in entries["config/visual_widths"][0]),
        heads=int(entries["config/heads"][0, 0]),
        proj_dim=int(entries["config/proj_dim"][0, 0]),
        dropout=float(entries["config/dropout"][0, 0]),
    )
