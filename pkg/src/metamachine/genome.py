"""One-hot design serialization and a small variational autoencoder in plain numpy.

The network is a pair of dense tanh stacks with a hand-written backward pass
and an Adam optimizer. The encoder maps the 192-dimensional one-hot genome to
8 means and 8 log-variances; the decoder maps an 8-vector back to per-slot
logits.

Model file layout (little-endian throughout)::

    offset 0   8 bytes   magic b"MMVAE\\x00\\x01\\x00"
    offset 8   uint32    length H of the JSON header
    offset 12  H bytes   UTF-8 JSON: layout_version, slot_vocab, spec
                         (widths, activation, beta, warm-up, optimizer
                         settings), training metadata and the ordered list of
                         tensors as [name, shape]
    then                 each tensor as float64, C order, in header order
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import interference_rule, self_collides
from .morphology import (
    N_DOCKS,
    N_ORIENT,
    NULL_GROUP,
    SEQ_LEN,
    SLOT_VOCAB,
    ConfigTree,
    InvalidDesignError,
    MalformedSequenceError,
    decode_seq,
    encode_tree,
    enumerate_two_module,
    sample_trees,
)

log = logging.getLogger(__name__)

LAYOUT_VERSION = 1
MAGIC = b"MMVAE\x00\x01\x00"
LATENT_DIM = 8
SLOT_SIZES = SLOT_VOCAB * (SEQ_LEN // 4)
SLOT_OFFSETS = tuple(int(x) for x in np.concatenate([[0], np.cumsum(SLOT_SIZES)[:-1]]))
ONEHOT_DIM = int(sum(SLOT_SIZES))

VALID = "valid"
MALFORMED = "malformed"
SELF_COLLIDING = "self-colliding"


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training loss became non-finite ({loss}) in epoch {epoch}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# One-hot layout
# ---------------------------------------------------------------------------


def onehot(seq: Sequence[int]) -> np.ndarray:
    """The 192-vector with a single one in every slot block."""
    return onehot_batch([seq])[0]


def onehot_batch(seqs) -> np.ndarray:
    tokens = np.asarray(seqs, dtype=int).reshape(-1, SEQ_LEN)
    sizes = np.array(SLOT_SIZES)
    if np.any(tokens < 0) or np.any(tokens >= sizes):
        raise MalformedSequenceError("token outside its slot vocabulary")
    out = np.zeros((len(tokens), ONEHOT_DIM))
    cols = tokens + np.array(SLOT_OFFSETS)
    np.put_along_axis(out, cols, 1.0, axis=1)
    return out


def slot_blocks(x: np.ndarray) -> list[np.ndarray]:
    """Split (..., 192) arrays into the 16 per-slot blocks."""
    return [x[..., o: o + n] for o, n in zip(SLOT_OFFSETS, SLOT_SIZES)]


def unhot(vec: np.ndarray) -> tuple[int, ...]:
    """Per-slot argmax of a vector of one-hot values or logits."""
    return tuple(int(t) for t in unhot_batch(np.asarray(vec)[None])[0])


def unhot_batch(x: np.ndarray) -> np.ndarray:
    return np.stack([np.argmax(b, axis=-1) for b in slot_blocks(np.asarray(x))], axis=-1)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AutoencoderSpec:
    encoder_widths: tuple[int, ...] = (512, 128, 64, 64)  # then a 16-wide output: 8 means + 8 log-variances
    decoder_widths: tuple[int, ...] = (64, 64, 128, 512)
    latent_dim: int = LATENT_DIM
    activation: str = "tanh"
    learning_rate: float = 1e-3
    epochs: int = 40
    batch_size: int = 128
    beta: float = 1.0
    warmup_fraction: float = 0.1  # beta ramps linearly from 0 over this share of all steps
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.activation != "tanh":
            raise ValueError("only the tanh activation is implemented")
        if self.beta < 0 or self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid training hyperparameters")

    def layer_shapes(self) -> list[tuple[str, tuple[int, int]]]:
        enc = (ONEHOT_DIM,) + tuple(self.encoder_widths) + (2 * self.latent_dim,)
        dec = (self.latent_dim,) + tuple(self.decoder_widths) + (ONEHOT_DIM,)
        shapes = [(f"enc{i}", (enc[i], enc[i + 1])) for i in range(len(enc) - 1)]
        shapes += [(f"dec{i}", (dec[i], dec[i + 1])) for i in range(len(dec) - 1)]
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AutoencoderSpec":
        d = dict(d)
        for k in ("encoder_widths", "decoder_widths", "adam_betas"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class VAE:
    spec: AutoencoderSpec
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, spec: AutoencoderSpec = AutoencoderSpec(), seed=0) -> "VAE":
        rng = np.random.default_rng(seed)
        params = {}
        for name, (fan_in, fan_out) in spec.layer_shapes():
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            params[name + ".W"] = rng.uniform(-lim, lim, (fan_in, fan_out))
            params[name + ".b"] = np.zeros(fan_out)
        return cls(spec, params)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def _layers(self, prefix: str) -> list[str]:
        return [n for n, _ in self.spec.layer_shapes() if n.startswith(prefix)]

    def _stack(self, prefix: str, x: np.ndarray):
        hs = [x]
        names = self._layers(prefix)
        for i, n in enumerate(names):
            a = hs[-1] @ self.params[n + ".W"] + self.params[n + ".b"]
            hs.append(np.tanh(a) if i < len(names) - 1 else a)
        return hs

    def _stack_backward(self, prefix: str, hs, grad_out: np.ndarray, grads: dict) -> np.ndarray:
        names = self._layers(prefix)
        g = grad_out
        for i in range(len(names) - 1, -1, -1):
            n = names[i]
            if i < len(names) - 1:
                g = g * (1.0 - hs[i + 1] ** 2)
            grads[n + ".W"] = hs[i].T @ g
            grads[n + ".b"] = g.sum(axis=0)
            g = g @ self.params[n + ".W"].T
        return g

    def encode_stats(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self._stack("enc", np.atleast_2d(x))[-1]
        L = self.spec.latent_dim
        return out[:, :L], out[:, L:]

    def decode_logits(self, z: np.ndarray) -> np.ndarray:
        return self._stack("dec", np.atleast_2d(np.asarray(z, dtype=float)))[-1]

    def loss_and_grad(self, x: np.ndarray, eps: np.ndarray, beta: float, need_grad: bool = True):
        """Mean over the batch of slot cross-entropy plus ``beta`` times KL.

        Returns ``(loss, recon, kl, grads)``; ``eps`` is the reparameterization
        noise, passed in so the loss is a deterministic function of the weights.
        """
        N = len(x)
        L = self.spec.latent_dim
        enc = self._stack("enc", x)
        mu, logvar = enc[-1][:, :L], enc[-1][:, L:]
        std = np.exp(0.5 * logvar)
        z = mu + std * eps
        dec = self._stack("dec", z)
        logits = dec[-1]
        recon = 0.0
        dlogits = np.empty_like(logits)
        for o, n in zip(SLOT_OFFSETS, SLOT_SIZES):
            blk = logits[:, o: o + n]
            shifted = blk - blk.max(axis=1, keepdims=True)
            lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            logp = shifted - lse
            tgt = x[:, o: o + n]
            recon -= np.sum(tgt * logp)
            dlogits[:, o: o + n] = (np.exp(logp) - tgt) / N
        recon /= N
        kl_items = 0.5 * np.sum(np.exp(logvar) + mu**2 - 1.0 - logvar, axis=1)
        kl = float(np.mean(kl_items))
        loss = recon + beta * kl
        if not need_grad:
            return loss, recon, kl, None
        grads: dict[str, np.ndarray] = {}
        dz = self._stack_backward("dec", dec, dlogits, grads)
        dmu = dz + beta * mu / N
        dlogvar = dz * eps * 0.5 * std + beta * 0.5 * (np.exp(logvar) - 1.0) / N
        self._stack_backward("enc", enc, np.concatenate([dmu, dlogvar], axis=1), grads)
        return loss, recon, kl, grads

    # -- inference --------------------------------------------------------

    def encode(self, seqs) -> np.ndarray:
        """Posterior means, shape (N, 8); a single sequence gives shape (8,)."""
        arr = np.asarray(seqs)
        single = arr.ndim == 1
        mu, _ = self.encode_stats(onehot_batch(arr))
        return mu[0] if single else mu

    def reconstruct(self, seqs) -> np.ndarray:
        return unhot_batch(self.decode_logits(self.encode(np.atleast_2d(seqs))))

    def decode(self, z) -> "DecodeResult":
        return decode_latent(self, z)

    # -- persistence ------------------------------------------------------

    def to_bytes(self) -> bytes:
        names = [n + s for n, _ in self.spec.layer_shapes() for s in (".W", ".b")]
        header = {
            "layout_version": LAYOUT_VERSION,
            "slot_vocab": list(SLOT_SIZES),
            "spec": self.spec.to_dict(),
            "meta": self.meta,
            "tensors": [[n, list(self.params[n].shape)] for n in names],
        }
        hb = json.dumps(header, sort_keys=True).encode()
        body = b"".join(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes() for n in names)
        return MAGIC + struct.pack("<I", len(hb)) + hb + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "VAE":
        if data[:8] != MAGIC:
            raise ValueError("not a model file")
        (h,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12: 12 + h].decode())
        if header["layout_version"] != LAYOUT_VERSION or tuple(header["slot_vocab"]) != SLOT_SIZES:
            raise ValueError("model file has an incompatible one-hot layout")
        spec = AutoencoderSpec.from_dict(header["spec"])
        params = {}
        off = 12 + h
        for name, shape in header["tensors"]:
            n = int(np.prod(shape))
            params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(float)
            off += 8 * n
        if off != len(data):
            raise ValueError("model file has trailing or missing bytes")
        return cls(spec, params, header.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "VAE":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: VAE
    loss_curve: list[float]
    recon_curve: list[float]
    kl_curve: list[float]


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def vae_train(data, spec: AutoencoderSpec = AutoencoderSpec(), seed=0, progress=None) -> TrainResult:
    """Train on genome sequences (or their one-hot rows) with Adam and a KL warm-up."""
    X = np.asarray(data, dtype=float)
    if X.ndim != 2 or X.shape[1] != ONEHOT_DIM:
        X = onehot_batch(np.asarray(data, dtype=int))
    rng = np.random.default_rng(seed)
    model = VAE.init(spec, rng)
    opt = Adam(model.params, spec.learning_rate, spec.adam_betas, spec.adam_eps)
    n = len(X)
    per_epoch = max(1, -(-n // spec.batch_size))
    warm = spec.warmup_fraction * spec.epochs * per_epoch
    losses, recons, kls = [], [], []
    step = 0
    for epoch in range(spec.epochs):
        order = rng.permutation(n)
        tot = rec = kl_sum = 0.0
        for s in range(0, n, spec.batch_size):
            xb = X[order[s: s + spec.batch_size]]
            eps = rng.standard_normal((len(xb), spec.latent_dim))
            beta = spec.beta * (min(1.0, step / warm) if warm > 0 else 1.0)
            loss, recon, kl, grads = model.loss_and_grad(xb, eps, beta)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            opt.step(model.params, grads)
            tot += loss * len(xb)
            rec += recon * len(xb)
            kl_sum += kl * len(xb)
            step += 1
        losses.append(tot / n)
        recons.append(rec / n)
        kls.append(kl_sum / n)
        log.debug("epoch %d loss %.4f recon %.4f kl %.4f", epoch, losses[-1], recons[-1], kls[-1])
        if progress is not None:
            progress(epoch, losses[-1])
    model.meta = {"seed": seed if isinstance(seed, (int, np.integer)) else None, "n_train": n,
                  "epochs": spec.epochs, "final_loss": losses[-1] if losses else None,
                  "loss_curve": losses}
    return TrainResult(model, losses, recons, kls)


def design_dataset(seed, count: int, n_modules=None) -> np.ndarray:
    """Encoded sequences of ``count`` seeded random trees, shape (count, 16)."""
    return np.array([encode_tree(t) for t in sample_trees(seed, count, n_modules)], dtype=int)


def two_module_space(ordered: bool = True) -> np.ndarray:
    """Every rule-valid two-module genome sequence.

    The ordered space keeps both (a, b, o) and (b, a, o), as the sampler does;
    otherwise only one representative per assembly is returned.
    """
    if ordered:
        triples = [(a, b, o) for a in range(N_DOCKS) for b in range(N_DOCKS) for o in range(N_ORIENT)
                   if not interference_rule(a, b, o)]
    else:
        triples = enumerate_two_module()
    return np.array([(0, a, b, o) + NULL_GROUP * 3 for a, b, o in triples], dtype=int)


def slot_accuracy(model: VAE, seqs) -> np.ndarray:
    """Fraction of correctly reconstructed tokens per slot, from posterior means."""
    seqs = np.asarray(seqs, dtype=int)
    return np.mean(model.reconstruct(seqs) == seqs, axis=0)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


@dataclass
class DecodeResult:
    seq: tuple[int, ...]
    verdict: str
    tree: ConfigTree | None = None
    reason: str = ""


def classify_seq(seq: Sequence[int]) -> DecodeResult:
    seq = tuple(int(t) for t in seq)
    try:
        tree = decode_seq(seq)
    except MalformedSequenceError as exc:
        return DecodeResult(seq, MALFORMED, None, str(exc))
    except InvalidDesignError as exc:
        return DecodeResult(seq, SELF_COLLIDING, None, str(exc))
    if self_collides(tree, np.zeros(tree.n_modules)):
        return DecodeResult(seq, SELF_COLLIDING, tree, "modules overlap at zero joint angles")
    return DecodeResult(seq, VALID, tree)


def decode_latent(model: VAE, z) -> DecodeResult:
    """Argmax decode of a latent vector, with a validity verdict."""
    z = np.asarray(z, dtype=float)
    if z.shape != (model.spec.latent_dim,) or not np.all(np.isfinite(z)):
        raise ValueError(f"latent must be {model.spec.latent_dim} finite reals")
    return classify_seq(unhot(model.decode_logits(z)[0]))


def interpolate(model: VAE, z0, z1, steps: int = 11) -> list[DecodeResult]:
    """Decode evenly spaced points on the segment from ``z0`` to ``z1``."""
    z0, z1 = np.asarray(z0, float), np.asarray(z1, float)
    return [decode_latent(model, z0 + t * (z1 - z0)) for t in np.linspace(0.0, 1.0, steps)]


def min_pairwise_distance(z: np.ndarray) -> float:
    z = np.asarray(z, dtype=float)
    sq = np.sum(z * z, axis=1)
    d2 = sq[:, None] + sq[None] - 2 * z @ z.T
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(max(d2.min(), 0.0)))
