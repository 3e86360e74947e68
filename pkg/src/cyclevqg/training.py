"""Training: Kaiming init, the two-stage cyclic step, epoch loop, Adam.

One step runs the generation stage (encode, fuse, sample, decode,
reconstruct) and the consistency stage (classify the generated question)
as a single forward pass, backpropagates the weighted total once, applies
Adam to every parameter including the hyper-prior, then nudges the center
bank.  The loss trajectory is a pure function of (seed, dataset, config):
batch order and reparameterization noise derive from the seed and the
step counter, so resumed runs reproduce uninterrupted ones exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch

from .data import PAD
from .losses import (
    CenterBank,
    LossBreakdown,
    TrainingError,
    category_recon_loss,
    center_loss,
    consistency_loss,
    hyperprior_kl,
    hyperprior_reg,
    image_recon_loss,
    question_loss,
    total_loss,
    update_centers,
)
from .model import DTYPE, QuestionGenerator, sample_latent

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 15
    learning_rate: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    center_update_scale: float = 0.5
    grad_clip_norm: float = 0.0  # 0 disables; stability extension, not default
    classifier_temperature: float = 1.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class TrainState:
    model: QuestionGenerator
    optimizer: torch.optim.Adam
    bank: CenterBank
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)


@dataclass
class Batch:
    images: torch.Tensor
    questions: torch.Tensor
    categories: torch.Tensor


def collate(samples, images):
    """Stack samples into padded tensors plus the image batch."""
    max_len = max(len(s.question) for s in samples)
    questions = torch.full((len(samples), max_len), PAD, dtype=torch.long)
    for i, s in enumerate(samples):
        questions[i, : len(s.question)] = torch.tensor(s.question, dtype=torch.long)
    categories = torch.tensor([s.category for s in samples], dtype=torch.long)
    return Batch(images.batch([s.image_id for s in samples]).to(DTYPE), questions, categories)


def init_params(model_config, seed):
    """Build the model with Kaiming fan-in normal weights and zero biases.

    Layer weights (>= 2 dims) draw from N(0, 2/fan_in); embedding tables
    keep the standard N(0, 1) lookup init (fan-in scaling leaves category
    vectors indistinguishable under the latent noise); 1-D tensors (biases,
    the prior's log-alpha) start at zero.
    """
    model = QuestionGenerator(model_config)
    gen = torch.Generator().manual_seed(seed)
    embedding_tables = {
        f"{name}.weight"
        for name, module in model.named_modules()
        if isinstance(module, torch.nn.Embedding)
    }
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name in embedding_tables:
                param.normal_(0.0, 1.0, generator=gen)
            elif param.dim() >= 2:
                fan_in = param.shape[1:].numel()
                param.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            else:
                param.zero_()
    return model


def make_optimizer(model, config):
    return torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS
    )


def init_state(model_config, config):
    model = init_params(model_config, config.seed)
    bank = CenterBank(
        model_config.n_categories, model_config.latent_dim,
        update_scale=config.center_update_scale,
    )
    return TrainState(model=model, optimizer=make_optimizer(model, config), bank=bank)


def _step_generator(seed, step):
    gen = torch.Generator()
    gen.manual_seed((seed * 1_000_003 + step) % (2 ** 63 - 1))
    return gen


def _check_finite(name, value):
    if not bool(torch.isfinite(value).all()):
        raise TrainingError(f"non-finite {name} loss at training step")
    return value


def forward_losses(model, bank, batch, weights, noise, classifier_temperature=1.0):
    """Both stages of the cyclic pass; returns (loss tensors dict, z)."""
    image_enc = model.encode_image(batch.images)
    category_enc = model.encode_category(batch.categories)
    dist = model.fuse(image_enc, category_enc)
    z = sample_latent(dist, noise)

    logits = model.decode_question(z, teacher=batch.questions)
    l_question = question_loss(logits, batch.questions)
    l_image = image_recon_loss(model.reconstruct_image_encoding(z), image_enc)
    l_category = category_recon_loss(model.reconstruct_category_encoding(z), category_enc)

    # Stage two: the classifier reads the decoder's own token distributions
    # over the same positions the hard path would see (everything after the
    # start marker through the end marker).
    lengths = (batch.questions != PAD).sum(dim=1) - 1
    predicted = model.classify_question(
        logits, lengths=lengths, temperature=classifier_temperature
    )
    l_consistency = consistency_loss(predicted, batch.categories)

    l_center = center_loss(z, batch.categories, bank)
    l_hyper = hyperprior_kl(dist, model.prior) + hyperprior_reg(
        model.prior, weights.hyperprior_reg
    )
    losses = {
        "question": _check_finite("question", l_question),
        "image_recon": _check_finite("image_recon", l_image),
        "category_recon": _check_finite("category_recon", l_category),
        "consistency": _check_finite("consistency", l_consistency),
        "center": _check_finite("center", l_center),
        "hyperprior": _check_finite("hyperprior", l_hyper),
    }
    return losses, z


def train_step(state, batch, config, weights):
    """One optimization step; returns (state, pre-update LossBreakdown)."""
    if batch.questions.shape[0] == 0:
        raise ValueError("cannot train on an empty batch")
    model = state.model
    gen = _step_generator(config.seed, state.step)
    noise = torch.randn(
        (batch.questions.shape[0], model.config.latent_dim), dtype=DTYPE, generator=gen
    )
    losses, z = forward_losses(
        model, state.bank, batch, weights, noise,
        classifier_temperature=config.classifier_temperature,
    )
    parts = LossBreakdown(**{k: v for k, v in losses.items()})
    total = total_loss(parts, weights)

    state.optimizer.zero_grad()
    total.backward()
    if config.grad_clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
    state.optimizer.step()
    for name, param in model.named_parameters():
        if not bool(torch.isfinite(param).all()):
            raise TrainingError(f"parameter {name} became non-finite after update")
    update_centers(z.detach(), batch.categories, state.bank)

    breakdown = LossBreakdown(
        **{k: v.detach().item() for k, v in losses.items()},
        total=total.detach().item(),
    )
    state.step += 1
    state.history.append(breakdown)
    return state, breakdown


def epoch_batches(samples, batch_size, seed, epoch):
    """Seed-determined shuffle of one epoch, cut into batches."""
    order = torch.randperm(
        len(samples), generator=_step_generator(seed, -(epoch + 1))
    ).tolist()
    for start in range(0, len(order), batch_size):
        yield [samples[i] for i in order[start : start + batch_size]]


def train(dataset, config, weights, model_config, state=None, log=None):
    """Run the epoch loop over a DatasetBundle; resumes from ``state`` if given."""
    if not dataset.samples:
        raise ValueError("cannot train on an empty dataset")
    model_config = replace(
        model_config,
        vocab_size=len(dataset.vocab),
        n_categories=len(dataset.category_names),
    )
    if state is None:
        state = init_state(model_config, config)
    for epoch in range(state.epoch, config.epochs):
        last = None
        for samples in epoch_batches(dataset.samples, config.batch_size, config.seed, epoch):
            batch = collate(samples, dataset.images)
            state, last = train_step(state, batch, config, weights)
        state.epoch = epoch + 1
        if log is not None and last is not None:
            log(
                f"epoch {state.epoch}/{config.epochs} "
                f"loss {last.total:.6f} "
                f"(question {last.question:.4f} image {last.image_recon:.4f} "
                f"category {last.category_recon:.4f} consistency {last.consistency:.4f} "
                f"center {last.center:.4f} hyperprior {last.hyperprior:.4f})"
            )
    return state
