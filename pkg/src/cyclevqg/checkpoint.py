"""Versioned binary checkpoints with byte-exact round trips.

Layout (little endian), followed by a sha256 digest of everything before it:

    magic "CVQGCKP1" | u32 format version | 32-byte sha256 of the config blob
    | config TOML blob | vocab token list | u32 vocab min freq
    | category name list | u64 epoch | u64 step
    | loss history (7 f64 per step) | center bank (f64 scale + tensor)
    | model parameter map | Adam state (per-parameter step + moments)

Strings are u32-length-prefixed UTF-8; tensors are name + u8 ndim +
u32 dims + raw f64 bytes.  Field order is fixed, so identical states
serialize to identical bytes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import config as config_mod
from .data import Vocabulary
from .losses import CenterBank, LossBreakdown
from .model import QuestionGenerator
from .training import TrainState, make_optimizer

MAGIC = b"CVQGCKP1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Unreadable, truncated, or incompatible checkpoint file."""


class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def raw(self, data):
        self.buf += data

    def u8(self, v):
        self.buf += struct.pack("<B", v)

    def u32(self, v):
        self.buf += struct.pack("<I", v)

    def u64(self, v):
        self.buf += struct.pack("<Q", v)

    def f64(self, v):
        self.buf += struct.pack("<d", v)

    def string(self, s):
        data = s.encode("utf-8")
        self.u32(len(data))
        self.raw(data)

    def tensor(self, t):
        t = t.detach().contiguous()
        if t.dtype != torch.float64:
            raise CheckpointError(f"only float64 tensors are serialized, got {t.dtype}")
        self.u8(t.dim())
        for d in t.shape:
            self.u32(d)
        self.raw(t.numpy().tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.off = 0

    def raw(self, n):
        if self.off + n > len(self.data):
            raise CheckpointError("truncated checkpoint file")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u8(self):
        return struct.unpack("<B", self.raw(1))[0]

    def u32(self):
        return struct.unpack("<I", self.raw(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.raw(8))[0]

    def f64(self):
        return struct.unpack("<d", self.raw(8))[0]

    def string(self):
        return self.raw(self.u32()).decode("utf-8")

    def tensor(self):
        ndim = self.u8()
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.raw(8 * count), dtype="<f8").reshape(shape)
        return torch.from_numpy(arr.copy())


def _adam_entries(state):
    """(step count, exp_avg, exp_avg_sq) per parameter, in parameter order."""
    entries = []
    for _, param in state.model.named_parameters():
        st = state.optimizer.state.get(param)
        if st is None:
            entries.append(None)
        else:
            step = st["step"]
            step = int(step.item()) if torch.is_tensor(step) else int(step)
            entries.append((step, st["exp_avg"], st["exp_avg_sq"]))
    return entries


def save_checkpoint(state, path, config, vocab, category_names):
    """Serialize a TrainState plus the config/vocab needed to rebuild it."""
    config_blob = config_mod.to_toml(config).encode("utf-8")
    w = _Writer()
    w.raw(MAGIC)
    w.u32(FORMAT_VERSION)
    w.raw(hashlib.sha256(config_blob).digest())
    w.u32(len(config_blob))
    w.raw(config_blob)

    w.u32(len(vocab.tokens))
    for token in vocab.tokens:
        w.string(token)
    w.u32(vocab.min_freq)
    w.u32(len(category_names))
    for name in category_names:
        w.string(name)

    w.u64(state.epoch)
    w.u64(state.step)
    w.u64(len(state.history))
    for entry in state.history:
        for value in (*entry.parts().values(), entry.total):
            w.f64(value)

    w.f64(state.bank.update_scale)
    w.tensor(state.bank.centers)

    named = list(state.model.named_parameters())
    w.u32(len(named))
    for name, param in named:
        w.string(name)
        w.tensor(param)

    for (name, _), entry in zip(named, _adam_entries(state)):
        w.u8(0 if entry is None else 1)
        if entry is not None:
            step, m1, m2 = entry
            w.u64(step)
            w.tensor(m1)
            w.tensor(m2)

    w.raw(hashlib.sha256(bytes(w.buf)).digest())
    with open(path, "wb") as fh:
        fh.write(bytes(w.buf))


@dataclass
class LoadedCheckpoint:
    state: TrainState
    config: object
    vocab: Vocabulary
    category_names: list


def load_checkpoint(path):
    """Rebuild a TrainState (model, optimizer, bank, counters, history)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    if len(data) < len(MAGIC) + 4 + 32:
        raise CheckpointError("truncated checkpoint file")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("corrupt checkpoint file (digest mismatch)")

    r = _Reader(body)
    r.raw(len(MAGIC))
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )
    config_hash = r.raw(32)
    config_blob = r.raw(r.u32())
    if hashlib.sha256(config_blob).digest() != config_hash:
        raise CheckpointError("corrupt checkpoint file (config hash mismatch)")
    config = config_mod.from_toml_text(config_blob.decode("utf-8"))

    tokens = [r.string() for _ in range(r.u32())]
    vocab = Vocabulary(tokens, min_freq=r.u32())
    category_names = [r.string() for _ in range(r.u32())]

    epoch = r.u64()
    step = r.u64()
    history = []
    for _ in range(r.u64()):
        values = [r.f64() for _ in range(7)]
        history.append(
            LossBreakdown(
                question=values[0], image_recon=values[1], category_recon=values[2],
                consistency=values[3], center=values[4], hyperprior=values[5],
                total=values[6],
            )
        )

    update_scale = r.f64()
    centers = r.tensor()
    bank = CenterBank(centers.shape[0], centers.shape[1], update_scale=update_scale)
    bank.centers = centers

    model_config = replace(
        config.model, vocab_size=len(vocab), n_categories=len(category_names)
    )
    model = QuestionGenerator(model_config)
    saved = {}
    for _ in range(r.u32()):
        name = r.string()
        saved[name] = r.tensor()
    model_names = {name for name, _ in model.named_parameters()}
    if set(saved) != model_names:
        raise CheckpointError("checkpoint parameter names do not match the model")
    with torch.no_grad():
        for name, param in model.named_parameters():
            if saved[name].shape != param.shape:
                raise CheckpointError(f"shape mismatch for parameter {name}")
            param.copy_(saved[name])

    optimizer = make_optimizer(model, config.train)
    adam_state = {}
    for idx, _ in enumerate(model.named_parameters()):
        if r.u8():
            adam_state[idx] = {
                "step": torch.tensor(float(r.u64())),
                "exp_avg": r.tensor(),
                "exp_avg_sq": r.tensor(),
            }
    if adam_state:
        sd = optimizer.state_dict()
        sd["state"] = adam_state
        optimizer.load_state_dict(sd)
    if r.off != len(body):
        raise CheckpointError("trailing bytes after checkpoint payload")

    state = TrainState(
        model=model, optimizer=optimizer, bank=bank,
        epoch=epoch, step=step, history=history,
    )
    return LoadedCheckpoint(state, config, vocab, category_names)
