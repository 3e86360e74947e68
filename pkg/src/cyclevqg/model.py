"""Learnable networks: encoders, latent fusion, question decoder, heads.

All modules run in float64 and take a leading batch dimension.  Forward
passes are pure functions of (parameters, inputs, explicit noise); any
sampling happens through generators passed in by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import END, PAD, START
from .losses import HyperPrior

DTYPE = torch.float64


@dataclass
class ModelConfig:
    vocab_size: int = 0  # 0 means "bind from the dataset"
    n_categories: int = 0
    latent_dim: int = 64
    image_embed: int = 128
    category_embed: int = 64
    fusion_hidden: int = 256
    token_embed: int = 64
    decoder_hidden: int = 128
    classifier_embed: int = 64
    classifier_hidden: int = 128
    max_len: int = 20
    image_size: int = 64
    image_channels: int = 3
    encoder: str = "conv"
    feature_dim: int = 0
    # Frozen random features stand in for a pretrained backbone at desk
    # scale; a jointly-trained encoder collapses to constant encodings
    # because the encoding-reconstruction loss anchors nothing to the image.
    freeze_image_encoder: bool = True

    def __post_init__(self):
        if self.encoder not in ("conv", "features"):
            raise ValueError(f"unknown encoder kind {self.encoder!r}")
        if self.encoder == "features" and self.feature_dim <= 0:
            raise ValueError("feature encoder requires feature_dim > 0")


@dataclass
class LatentDistribution:
    """Diagonal Gaussian over the fused image+category encoding."""

    mean: torch.Tensor
    stddev: torch.Tensor

    @property
    def dim(self):
        return self.mean.shape[-1]


def sample_latent(dist, noise):
    """Reparameterized draw: mean + stddev * noise (elementwise)."""
    if noise.shape != dist.mean.shape:
        raise ValueError(
            f"noise shape {tuple(noise.shape)} != distribution shape {tuple(dist.mean.shape)}"
        )
    return dist.mean + dist.stddev * noise


class ConvImageEncoder(nn.Module):
    """Small strided CNN for desk-scale square images.

    The final grid is flattened rather than pooled: global pooling loses
    the spatial cues (shape, layout) the questions depend on.
    """

    def __init__(self, channels, image_size, out_dim):
        super().__init__()
        if image_size % 8 != 0:
            raise ValueError("image size must be a multiple of 8")
        self.channels = channels
        self.image_size = image_size
        self.net = nn.Sequential(
            nn.Conv2d(channels, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.proj = nn.Linear(128 * (image_size // 8) ** 2, out_dim)
        # Non-affine norm pins the encoding scale; otherwise the encoder can
        # shrink its output and drain the reconstruction loss of signal.
        self.norm = nn.LayerNorm(out_dim, elementwise_affine=False)

    def forward(self, images):
        if images.dim() != 4 or images.shape[1:] != (self.channels, self.image_size, self.image_size):
            raise ValueError(
                f"expected images of shape [B, {self.channels}, {self.image_size}, "
                f"{self.image_size}], got {tuple(images.shape)}"
            )
        return self.norm(self.proj(self.net(images).flatten(1)))


class FeatureImageEncoder(nn.Module):
    """Alternative image path: projects precomputed feature vectors."""

    def __init__(self, feature_dim, out_dim):
        super().__init__()
        self.feature_dim = feature_dim
        self.proj = nn.Linear(feature_dim, out_dim)
        self.norm = nn.LayerNorm(out_dim, elementwise_affine=False)

    def forward(self, features):
        if features.dim() != 2 or features.shape[1] != self.feature_dim:
            raise ValueError(
                f"expected feature vectors of shape [B, {self.feature_dim}], "
                f"got {tuple(features.shape)}"
            )
        return self.norm(self.proj(features))


class QuestionDecoder(nn.Module):
    """LSTM over token embeddings, conditioned on the latent code.

    The latent initializes the LSTM state and is also concatenated to every
    step's input; without the per-step path the teacher prefix alone can
    carry the sequence and the latent stops receiving useful gradient.
    """

    def __init__(self, vocab_size, embed_dim, hidden_dim, latent_dim):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, embed_dim)
        self.init_h = nn.Linear(latent_dim, hidden_dim)
        self.init_c = nn.Linear(latent_dim, hidden_dim)
        self.lstm = nn.LSTM(embed_dim + latent_dim, hidden_dim, batch_first=True)
        self.output = nn.Linear(hidden_dim, vocab_size)

    def initial_state(self, z):
        h0 = torch.tanh(self.init_h(z)).unsqueeze(0)
        c0 = torch.tanh(self.init_c(z)).unsqueeze(0)
        return h0, c0

    def step_inputs(self, tokens, z):
        emb = self.embedding(tokens)
        tiled = z.unsqueeze(1).expand(-1, emb.shape[1], -1)
        return torch.cat([emb, tiled], dim=-1)


class CategoryClassifier(nn.Module):
    """Temporal classifier: reads a question, predicts its answer category."""

    def __init__(self, vocab_size, embed_dim, hidden_dim, n_categories):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, embed_dim)
        self.lstm = nn.LSTM(embed_dim, hidden_dim, batch_first=True)
        self.head = nn.Linear(hidden_dim, n_categories)


class QuestionGenerator(nn.Module):
    """The full generator: encoders, fusion, decoder, heads, classifier.

    Weak-supervision contract: question generation consumes only an image
    and a target answer category; ground-truth questions appear solely as
    decoder teacher input and loss targets during training.
    """

    def __init__(self, config):
        super().__init__()
        if config.vocab_size < 5:  # 4 specials plus at least one word
            raise ValueError("model config has no bound vocabulary size")
        if config.n_categories < 2:
            raise ValueError("model config needs at least 2 categories")
        self.config = config
        if config.encoder == "conv":
            self.image_encoder = ConvImageEncoder(
                config.image_channels, config.image_size, config.image_embed
            )
        else:
            self.image_encoder = FeatureImageEncoder(config.feature_dim, config.image_embed)
        if config.freeze_image_encoder:
            for param in self.image_encoder.parameters():
                param.requires_grad_(False)
        self.category_embedding = nn.Embedding(config.n_categories, config.category_embed)
        self.fusion = nn.Sequential(
            nn.Linear(config.image_embed + config.category_embed, config.fusion_hidden),
            nn.ReLU(),
            nn.Linear(config.fusion_hidden, 2 * config.latent_dim),
        )
        self.decoder = QuestionDecoder(
            config.vocab_size, config.token_embed, config.decoder_hidden, config.latent_dim
        )
        self.image_head = nn.Sequential(
            nn.Linear(config.latent_dim, config.fusion_hidden),
            nn.ReLU(),
            nn.Linear(config.fusion_hidden, config.image_embed),
        )
        self.category_head = nn.Sequential(
            nn.Linear(config.latent_dim, config.fusion_hidden),
            nn.ReLU(),
            nn.Linear(config.fusion_hidden, config.category_embed),
        )
        self.classifier = CategoryClassifier(
            config.vocab_size, config.classifier_embed, config.classifier_hidden,
            config.n_categories,
        )
        self.prior = HyperPrior(config.latent_dim)
        self.to(DTYPE)

    # -- encoders ----------------------------------------------------------

    def encode_image(self, images):
        return self.image_encoder(images.to(DTYPE))

    def encode_category(self, categories):
        categories = torch.as_tensor(categories, dtype=torch.long)
        if categories.dim() != 1:
            raise ValueError("categories must be a 1-D id tensor")
        n = self.config.n_categories
        if ((categories < 0) | (categories >= n)).any():
            raise ValueError(f"category id out of range [0, {n})")
        return self.category_embedding(categories)

    def fuse(self, image_encoding, category_encoding):
        """Concatenate [image || category] and map to a latent Gaussian.

        The raw head emits log-variance; stddev = exp(logvar / 2) keeps the
        scale strictly positive without constraining the optimizer.
        """
        if image_encoding.shape[-1] != self.config.image_embed:
            raise ValueError("image encoding dimension mismatch")
        if category_encoding.shape[-1] != self.config.category_embed:
            raise ValueError("category encoding dimension mismatch")
        raw = self.fusion(torch.cat([image_encoding, category_encoding], dim=-1))
        mean, logvar = raw.chunk(2, dim=-1)
        return LatentDistribution(mean=mean, stddev=torch.exp(0.5 * logvar))

    # -- decoder -----------------------------------------------------------

    def decode_question(self, z, teacher=None, max_len=None):
        """Per-step vocabulary logits for the question decoded from ``z``.

        With ``teacher`` given, runs teacher-forced: logits row t scores the
        token following teacher position t, one row per teacher token.
        Without it, decodes greedily from the start marker.
        """
        if teacher is not None:
            if teacher.dim() != 2 or teacher.shape[1] == 0:
                raise ValueError("teacher sequence must be a nonempty [B, L] tensor")
            inputs = self.decoder.step_inputs(teacher, z)
            out, _ = self.decoder.lstm(inputs, self.decoder.initial_state(z))
            return self.decoder.output(out)
        _, logits = self.rollout(z, max_len=max_len)
        return logits

    def rollout(self, z, max_len=None, temperature=None, generator=None):
        """Free-running decode until every row emits the end marker.

        Returns (tokens, logits): tokens [B, T] are the emitted ids (pad
        after end), logits [B, T, V] the scores that produced them.  Greedy
        when ``temperature`` is None, else softmax sampling at the given
        temperature using ``generator``.
        """
        max_len = max_len or self.config.max_len
        batch = z.shape[0]
        current = torch.full((batch, 1), START, dtype=torch.long)
        state = self.decoder.initial_state(z)
        finished = torch.zeros(batch, dtype=torch.bool)
        steps, step_logits = [], []
        for _ in range(max_len):
            out, state = self.decoder.lstm(self.decoder.step_inputs(current, z), state)
            logits = self.decoder.output(out[:, 0])
            if temperature is None:
                chosen = logits.argmax(dim=-1)
            else:
                probs = F.softmax(logits / temperature, dim=-1)
                chosen = torch.multinomial(probs, 1, generator=generator).squeeze(1)
            chosen = torch.where(finished, torch.full_like(chosen, PAD), chosen)
            steps.append(chosen)
            step_logits.append(logits)
            finished = finished | (chosen == END)
            if bool(finished.all()):
                break
            current = chosen.unsqueeze(1)
        return torch.stack(steps, dim=1), torch.stack(step_logits, dim=1)

    # -- reconstruction heads ------------------------------------------------

    def reconstruct_image_encoding(self, z):
        return self.image_head(z)

    def reconstruct_category_encoding(self, z):
        return self.category_head(z)

    # -- cyclic classifier ---------------------------------------------------

    def classify_question(self, question, lengths=None, temperature=1.0):
        """Category distribution for a question.

        Accepts either discrete token ids [B, L] (the leading start marker
        is dropped, trailing pads ignored) or decoder logits [B, T, V],
        consumed as the per-step softmax-weighted token embedding so the
        cyclic loss stays differentiable.  One-hot logits reduce to the
        discrete path.
        """
        if question.dim() == 2 and not question.is_floating_point():
            body = question[:, 1:] if (question[:, 0] == START).all() else question
            emb = self.classifier.embedding(body)
            lengths = (body != PAD).sum(dim=1)
        elif question.dim() == 3:
            probs = F.softmax(question / temperature, dim=-1)
            emb = probs @ self.classifier.embedding.weight
            if lengths is None:
                lengths = torch.full((question.shape[0],), question.shape[1], dtype=torch.long)
        else:
            raise ValueError("question must be [B, L] token ids or [B, T, V] logits")
        if emb.shape[1] == 0 or (lengths <= 0).any():
            raise ValueError("cannot classify an empty question")
        out, _ = self.classifier.lstm(emb)
        last = out[torch.arange(out.shape[0]), lengths - 1]
        return F.softmax(self.classifier.head(last), dim=-1)
