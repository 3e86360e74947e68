"""Inference: decode a question for an image conditioned on a category.

The weak-supervision contract holds throughout: generation reads only the
image and the requested answer category, never ground-truth questions or
answers.  Greedy mode is fully deterministic (latent noise fixed at zero,
argmax decoding); sample mode draws latent noise and softmax token samples
from a seeded generator.
"""

from __future__ import annotations

import torch

from .data import END, START
from .losses import TrainingError
from .metrics import GenerationRecord
from .model import DTYPE, sample_latent

MODES = ("greedy", "sample")


def _check_params(model):
    for name, param in model.named_parameters():
        if not bool(torch.isfinite(param).all()):
            raise TrainingError(f"model parameter {name} is non-finite; cannot generate")


def _sequence_from_row(tokens):
    seq = [START]
    for t in tokens:
        seq.append(int(t))
        if t == END:
            break
    return seq


def generate(model, image, category, mode="greedy", seed=0, temperature=1.0,
             max_len=None, check_params=True):
    """Decode one question; returns token ids from start marker to end/max_len."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if check_params:
        _check_params(model)
    with torch.no_grad():
        image_enc = model.encode_image(image.to(DTYPE).unsqueeze(0))
        category_enc = model.encode_category(torch.tensor([category]))
        dist = model.fuse(image_enc, category_enc)
        if mode == "greedy":
            z = dist.mean
            tokens, _ = model.rollout(z, max_len=max_len)
        else:
            gen = torch.Generator().manual_seed(seed)
            noise = torch.randn(dist.mean.shape, dtype=DTYPE, generator=gen)
            z = sample_latent(dist, noise)
            tokens, _ = model.rollout(
                z, max_len=max_len, temperature=temperature, generator=gen
            )
    return _sequence_from_row(tokens[0].tolist())


def generate_all(model, image, mode="greedy", seed=0, temperature=1.0, max_len=None):
    """One question per configured category; per-category seeds are derived
    from (seed, category) so results do not depend on iteration order."""
    _check_params(model)
    out = {}
    for category in range(model.config.n_categories):
        out[category] = generate(
            model, image, category, mode=mode,
            seed=seed * 1_000_003 + category,
            temperature=temperature, max_len=max_len, check_params=False,
        )
    return out


def generate_records(model, samples, images, vocab, mode="greedy", seed=0,
                     temperature=1.0, max_len=None):
    """Generation records for every (image, category) pair over a sample set.

    References are the ground-truth questions attached to the same image and
    category in ``samples``; pairs without references still produce records
    (they feed the diversity metrics only).
    """
    references = {}
    image_order = []
    for s in samples:
        if s.image_id not in references:
            image_order.append(s.image_id)
            references[s.image_id] = {}
        references[s.image_id].setdefault(s.category, []).append(vocab.decode(s.question))

    records = []
    _check_params(model)
    for image_id in image_order:
        image = images.get(image_id)
        for category, tokens in generate_all(
            model, image, mode=mode, seed=seed, temperature=temperature, max_len=max_len
        ).items():
            records.append(GenerationRecord(
                image_id=image_id,
                category=category,
                question=vocab.decode(tokens),
                references=references[image_id].get(category, []),
            ))
    return records
