"""Attention-based sequence-to-spectrogram teacher with accent transfer.

Phone encoder plus speaker/accent embeddings feed a location-sensitive
attention decoder; a small VAE latent (prior mean at inference) absorbs
residual variation. Pairing a speaker with a non-native accent at
inference performs the transfer. The model receives no style input:
style enters only through whatever the text itself implies.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..audio import N_MELS
from ..features import FeatureCache
from .common import (CheckpointError, Vocab, batched_indices, load_checkpoint_doc,
                     load_state, save_checkpoint)

log = logging.getLogger("accentforge.teacher")

EOS = "</s>"


@dataclass
class TeacherConfig:
    phone_embed_dim: int = 32
    encoder_dim: int = 64
    encoder_context: str = "bigru"      # bigru | none
    token_dropout: float = 0.15         # blank whole tokens while training so
                                        # neighbors cannot carry skipped content
    decoder_dim: int = 128
    attention_dim: int = 64
    location_channels: int = 16
    location_kernel: int = 15
    reduction: int = 2                  # mel frames per decoder step
    speaker_embed_dim: int = 16
    accent_embed_dim: int = 8
    latent_dim: int = 8
    segment_latent_dim: int = 4
    hierarchical: bool = False          # optional per-segment latents
    segment_frames: int = 80            # one second per segment
    prenet_dim: int = 64
    prenet_dropout: float = 0.5
    position_dim: int = 8               # sinusoidal channels in the memory;
                                        # CV texts repeat tokens heavily, so
                                        # content alone cannot disambiguate
    attention_forward_prior: float = 1.5
    attention_prior_center: float = 0.3  # expected token advance per step
    attention_prior_width: float = 1.5
    kl_weight: float = 0.01
    kl_free_bits: float = 0.05          # per latent dimension, in nats
    kl_warmup_steps: int = 300
    max_decoder_steps: int = 400
    stop_threshold: float = 0.5
    steps: int = 3000
    batch_size: int = 16
    learning_rate: float = 1e-3
    grad_clip: float = 1.0
    stop_pos_weight: float = 6.0
    log_every: int = 50

    def validate(self):
        for name in ("phone_embed_dim", "encoder_dim", "decoder_dim", "attention_dim",
                     "reduction", "speaker_embed_dim", "accent_embed_dim", "latent_dim",
                     "max_decoder_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TeacherConfig.{name} must be > 0")


@dataclass
class TeacherSynthesis:
    mel: np.ndarray                     # (T, N_MELS) log-mel, denormalized
    attention: np.ndarray               # (decoder steps, text tokens)
    stop_step: int | None               # None when the step limit was hit
    runaway: bool = False

    @property
    def num_frames(self) -> int:
        return self.mel.shape[0]


class LocationAttention(nn.Module):
    def __init__(self, cfg: TeacherConfig, memory_dim: int):
        super().__init__()
        self.query = nn.Linear(cfg.decoder_dim, cfg.attention_dim, bias=False)
        self.memory = nn.Linear(memory_dim, cfg.attention_dim, bias=False)
        self.location_conv = nn.Conv1d(2, cfg.location_channels, cfg.location_kernel,
                                       padding=cfg.location_kernel // 2, bias=False)
        self.location = nn.Linear(cfg.location_channels, cfg.attention_dim, bias=False)
        self.v = nn.Linear(cfg.attention_dim, 1, bias=False)
        self.forward_prior = cfg.attention_forward_prior
        self.prior_center = cfg.attention_prior_center
        self.prior_width = cfg.attention_prior_width

    def precompute(self, memory):
        return self.memory(memory)

    def forward(self, state, keys, attn_prev, attn_cum, mask, step):
        # the cumulative channel is normalized by the step count so the
        # location conv sees bounded inputs at any decoder length
        cum = attn_cum / float(step + 1)
        loc = self.location_conv(torch.stack([attn_prev, cum], dim=1))
        loc = self.location(loc.transpose(1, 2))
        energy = self.v(torch.tanh(keys + self.query(state).unsqueeze(1) + loc)).squeeze(-1)
        if self.forward_prior > 0:
            # soft stay-or-advance bump around the previous peak: a transition
            # prior, not a constraint, so attention can still fail
            prev_peak = attn_prev.detach().argmax(dim=-1, keepdim=True).float()
            pos = torch.arange(energy.shape[-1], device=energy.device).float().unsqueeze(0)
            energy = energy - self.forward_prior \
                * ((pos - prev_peak - self.prior_center) ** 2) \
                / (2.0 * self.prior_width ** 2)
        energy = energy.masked_fill(~mask, -1e9)
        return torch.softmax(energy, dim=-1)


class Prenet(nn.Module):
    def __init__(self, cfg: TeacherConfig):
        super().__init__()
        self.fc1 = nn.Linear(N_MELS, cfg.prenet_dim)
        self.fc2 = nn.Linear(cfg.prenet_dim, cfg.prenet_dim)
        self.dropout = cfg.prenet_dropout

    def forward(self, x):
        x = F.relu(self.fc1(x))
        x = F.dropout(x, self.dropout, training=self.training)
        x = F.relu(self.fc2(x))
        return F.dropout(x, self.dropout, training=self.training)


class TeacherModel(nn.Module):
    def __init__(self, cfg: TeacherConfig, vocab: Vocab):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.token_embed = nn.Embedding(len(vocab.tokens), cfg.phone_embed_dim)
        self.speaker_embed = nn.Embedding(len(vocab.speakers), cfg.speaker_embed_dim)
        self.accent_embed = nn.Embedding(len(vocab.accents), cfg.accent_embed_dim)
        if cfg.encoder_context == "bigru":
            self.encoder = nn.GRU(cfg.phone_embed_dim, cfg.encoder_dim // 2,
                                  batch_first=True, bidirectional=True)
        else:
            self.encoder = nn.Sequential(
                nn.Linear(cfg.phone_embed_dim, cfg.encoder_dim), nn.ReLU(),
                nn.Linear(cfg.encoder_dim, cfg.encoder_dim))
        memory_dim = (cfg.encoder_dim + cfg.speaker_embed_dim + cfg.accent_embed_dim
                      + cfg.position_dim + 1)
        self.attention = LocationAttention(cfg, memory_dim)
        latent_total = cfg.latent_dim + (cfg.segment_latent_dim if cfg.hierarchical else 0)
        self.prenet = Prenet(cfg)
        self.cell = nn.GRUCell(cfg.prenet_dim + memory_dim + latent_total, cfg.decoder_dim)
        self.mel_proj = nn.Linear(cfg.decoder_dim + memory_dim, N_MELS * cfg.reduction)
        self.stop_proj = nn.Linear(cfg.decoder_dim + memory_dim, 1)
        # posterior encoders over the reference mel
        self.ref_encoder = nn.GRU(N_MELS, 64, batch_first=True)
        self.ref_proj = nn.Linear(64, 2 * cfg.latent_dim)
        if cfg.hierarchical:
            self.seg_encoder = nn.GRU(N_MELS, 64, batch_first=True)
            self.seg_proj = nn.Linear(64 + cfg.latent_dim, 2 * cfg.segment_latent_dim)
        self.memory_dim = memory_dim
        self.latent_total = latent_total

    def encode_text(self, token_ids, lengths, speaker_ids, accent_ids):
        emb = self.token_embed(token_ids)
        if self.training and self.cfg.token_dropout > 0:
            keep = (torch.rand(emb.shape[:2], device=emb.device)
                    >= self.cfg.token_dropout).float().unsqueeze(-1)
            emb = emb * keep / (1.0 - self.cfg.token_dropout)
        if self.cfg.encoder_context == "bigru":
            packed = nn.utils.rnn.pack_padded_sequence(emb, lengths.cpu(), batch_first=True,
                                                       enforce_sorted=False)
            enc, _ = self.encoder(packed)
            enc, _ = nn.utils.rnn.pad_packed_sequence(enc, batch_first=True,
                                                      total_length=token_ids.shape[1])
        else:
            enc = self.encoder(emb)
        b, l, _ = enc.shape
        spk = self.speaker_embed(speaker_ids).unsqueeze(1).expand(b, l, -1)
        acc = self.accent_embed(accent_ids).unsqueeze(1).expand(b, l, -1)
        pos = self._positions(b, l, lengths, enc)
        return torch.cat([enc, spk, acc, pos], dim=-1)

    def _positions(self, b, l, lengths, like):
        """Sinusoidal position channels plus a normalized-position channel."""
        idx = torch.arange(l, dtype=torch.float32, device=like.device)
        dims = torch.arange(self.cfg.position_dim // 2, dtype=torch.float32,
                            device=like.device)
        rates = 1.0 / (4.0 * (8.0 ** dims))      # wavelengths from ~6 to ~400 tokens
        angles = idx[:, None] * rates[None, :] * 2.0 * np.pi
        pe = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
        pe = pe.unsqueeze(0).expand(b, l, -1)
        norm = idx[None, :, None].expand(b, l, 1) \
            / lengths.to(like.dtype).clamp(min=1)[:, None, None]
        return torch.cat([pe, norm], dim=-1)

    def posterior(self, mel, mel_lengths):
        packed = nn.utils.rnn.pack_padded_sequence(mel, mel_lengths.cpu(), batch_first=True,
                                                   enforce_sorted=False)
        _, h = self.ref_encoder(packed)
        stats = self.ref_proj(h.squeeze(0))
        mu, logvar = stats.chunk(2, dim=-1)
        return mu, logvar.clamp(-8.0, 8.0)

    def segment_posterior(self, mel, z):
        """Per-segment latents conditioned on the global latent."""
        b, t, _ = mel.shape
        seg = self.cfg.segment_frames
        n_seg = max(1, math.ceil(t / seg))
        pad = n_seg * seg - t
        if pad:
            mel = F.pad(mel, (0, 0, 0, pad))
        chunks = mel.reshape(b * n_seg, seg, N_MELS)
        _, h = self.seg_encoder(chunks)
        h = h.squeeze(0).reshape(b, n_seg, -1)
        stats = self.seg_proj(torch.cat([h, z.unsqueeze(1).expand(b, n_seg, -1)], dim=-1))
        mu, logvar = stats.chunk(2, dim=-1)
        return mu, logvar.clamp(-8.0, 8.0)

    def decode_steps(self, memory, memory_mask, latents, go_frames, n_steps, seg_latents=None):
        """Teacher-forced decoding; go_frames holds the previous-group frames."""
        b, l, _ = memory.shape
        keys = self.attention.precompute(memory)
        state = memory.new_zeros(b, self.cfg.decoder_dim)
        attn = memory.new_zeros(b, l)
        attn[:, 0] = 1.0
        attn_cum = attn.clone()
        mels, stops, attns = [], [], []
        for step in range(n_steps):
            pre = self.prenet(go_frames[:, step])
            context = torch.bmm(attn.unsqueeze(1), memory).squeeze(1)
            z = latents if seg_latents is None else torch.cat(
                [latents, seg_latents[:, step]], dim=-1)
            state = self.cell(torch.cat([pre, context, z], dim=-1), state)
            attn = self.attention(state, keys, attn, attn_cum, memory_mask, step)
            attn_cum = attn_cum + attn
            context = torch.bmm(attn.unsqueeze(1), memory).squeeze(1)
            hidden = torch.cat([state, context], dim=-1)
            mels.append(self.mel_proj(hidden).reshape(b, self.cfg.reduction, N_MELS))
            stops.append(self.stop_proj(hidden).squeeze(-1))
            attns.append(attn)
        return (torch.stack(mels, dim=1).reshape(b, n_steps * self.cfg.reduction, N_MELS),
                torch.stack(stops, dim=1), torch.stack(attns, dim=1))


@dataclass
class TeacherCheckpoint:
    directory: Path
    config: TeacherConfig
    vocab: Vocab
    mel_mean: np.ndarray
    mel_std: np.ndarray
    model: TeacherModel
    step: int = 0
    corpus_fingerprint: str = ""

    @classmethod
    def load(cls, directory) -> "TeacherCheckpoint":
        doc, meta = load_checkpoint_doc(directory)
        cfg = TeacherConfig(**doc["config"])
        vocab = Vocab(**doc["vocab"])
        model = TeacherModel(cfg, vocab)
        load_state(directory, model)
        model.eval()
        return cls(directory=Path(directory), config=cfg, vocab=vocab,
                   mel_mean=np.array(doc["mel_mean"], dtype=np.float32),
                   mel_std=np.array(doc["mel_std"], dtype=np.float32),
                   model=model, step=meta["step"],
                   corpus_fingerprint=doc.get("corpus_fingerprint", ""))

    def save(self) -> None:
        save_checkpoint(self.directory, self.model, self.config, {
            "vocab": {"tokens": self.vocab.tokens, "speakers": self.vocab.speakers,
                      "accents": self.vocab.accents, "styles": self.vocab.styles},
            "mel_mean": [float(v) for v in self.mel_mean],
            "mel_std": [float(v) for v in self.mel_std],
            "corpus_fingerprint": self.corpus_fingerprint,
            "step": self.step,
        })


def _load_training_set(manifest, cache: FeatureCache, vocab: Vocab):
    items = []
    for u in manifest:
        mel = cache.mel(u.id, lambda u=u: u.load_wave(manifest.root))
        tokens = list(u.text) + [EOS]
        items.append({
            "tokens": vocab.encode_tokens(tokens),
            "speaker": vocab.speaker_index[u.speaker_id],
            "accent": vocab.accent_index[u.accent_id],
            "mel": mel,
        })
    return items


def _mel_stats(items):
    acc = np.concatenate([it["mel"] for it in items[:1000]], axis=0)
    return acc.mean(axis=0), np.maximum(acc.std(axis=0), 1e-3)


def _collate(items, idx, mel_mean, mel_std, r):
    batch = [items[i] for i in idx]
    b = len(batch)
    max_l = max(len(it["tokens"]) for it in batch)
    max_t = max(it["mel"].shape[0] for it in batch)
    max_t = ((max_t + r - 1) // r) * r
    tokens = torch.zeros(b, max_l, dtype=torch.long)
    tok_len = torch.zeros(b, dtype=torch.long)
    mel = torch.zeros(b, max_t, N_MELS)
    mel_len = torch.zeros(b, dtype=torch.long)
    speaker = torch.zeros(b, dtype=torch.long)
    accent = torch.zeros(b, dtype=torch.long)
    for i, it in enumerate(batch):
        l = len(it["tokens"])
        tokens[i, :l] = it["tokens"]
        tok_len[i] = l
        m = (it["mel"] - mel_mean) / mel_std
        t = m.shape[0]
        mel[i, :t] = torch.from_numpy(m)
        # padding frames repeat the floor so the stop region is quiet
        mel[i, t:] = torch.from_numpy(m[-1])
        mel_len[i] = t
        speaker[i] = it["speaker"]
        accent[i] = it["accent"]
    return tokens, tok_len, mel, mel_len, speaker, accent


def train_teacher(train_manifest, val_manifest, config: TeacherConfig, seed: int,
                  workdir, cache: FeatureCache,
                  corpus_fingerprint: str = "") -> TeacherCheckpoint:
    """Train the transfer teacher; aborts on divergence with the last good state.

    The input schema is (tokens, speaker, accent) only: there is
    deliberately no style field.
    """
    config.validate()
    torch.manual_seed(seed)
    vocab = Vocab.from_manifests(train_manifest, val_manifest)
    vocab.tokens = sorted(set(vocab.tokens) | {EOS})
    vocab = Vocab(vocab.tokens, vocab.speakers, vocab.accents, vocab.styles)

    items = _load_training_set(train_manifest, cache, vocab)
    val_items = _load_training_set(val_manifest, cache, vocab) if len(val_manifest) else []
    mel_mean, mel_std = _mel_stats(items)
    r = config.reduction
    longest = max(it["mel"].shape[0] for it in items)
    if config.max_decoder_steps * r < 2 * longest:
        raise ValueError(
            f"max_decoder_steps={config.max_decoder_steps} is below twice the "
            f"longest training mel ({longest} frames, reduction {r})")

    model = TeacherModel(config, vocab)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    losses = []
    last_good = {k: v.clone() for k, v in model.state_dict().items()}

    lengths = [it["mel"].shape[0] for it in items]
    step = 0
    for idx in batched_indices(len(items), config.batch_size, lengths, seed, config.steps):
        tokens, tok_len, mel, mel_len, speaker, accent = _collate(
            items, idx, mel_mean, mel_std, r)
        b, max_t, _ = mel.shape
        n_steps = max_t // r

        memory = model.encode_text(tokens, tok_len, speaker, accent)
        mask = torch.arange(tokens.shape[1])[None, :] < tok_len[:, None]
        mu, logvar = model.posterior(mel, mel_len)
        z = mu + torch.exp(0.5 * logvar) * torch.randn_like(mu)
        seg = None
        if config.hierarchical:
            smu, slogvar = model.segment_posterior(mel, z)
            zseg = smu + torch.exp(0.5 * slogvar) * torch.randn_like(smu)
            seg_idx = (torch.arange(n_steps) * r) // config.segment_frames
            seg_idx = seg_idx.clamp(max=zseg.shape[1] - 1)
            seg = zseg[:, seg_idx]

        go = torch.cat([mel.new_zeros(b, 1, N_MELS),
                        mel[:, r - 1:-1:r]], dim=1)
        pred, stop_logits, _ = model.decode_steps(memory, mask, z, go, n_steps, seg)

        frame_mask = (torch.arange(max_t)[None, :] < mel_len[:, None]).float()
        mel_l1 = (torch.abs(pred - mel).mean(-1) * frame_mask).sum() / frame_mask.sum()
        last_step = ((mel_len + r - 1) // r - 1).clamp(min=0)
        stop_target = (torch.arange(n_steps)[None, :] >= last_step[:, None]).float()
        step_mask = (torch.arange(n_steps)[None, :] <= last_step[:, None]).float()
        stop_bce = F.binary_cross_entropy_with_logits(
            stop_logits, stop_target, reduction="none",
            pos_weight=torch.tensor(config.stop_pos_weight))
        stop_bce = (stop_bce * step_mask).sum() / step_mask.sum()

        kl_per_dim = 0.5 * (mu ** 2 + logvar.exp() - 1.0 - logvar).mean(0)
        kl_raw = float(kl_per_dim.sum().detach())
        kl_loss = torch.clamp(kl_per_dim, min=config.kl_free_bits).sum()
        if config.hierarchical:
            skl = 0.5 * (smu ** 2 + slogvar.exp() - 1.0 - slogvar).mean(0).mean(0)
            kl_loss = kl_loss + torch.clamp(skl, min=config.kl_free_bits).sum()
        warm = min(1.0, (step + 1) / max(config.kl_warmup_steps, 1))
        loss = mel_l1 + stop_bce + config.kl_weight * warm * kl_loss

        if not torch.isfinite(loss):
            log.warning("teacher loss diverged at step %d; keeping last good state", step)
            model.load_state_dict(last_good)
            break
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        step += 1
        if step % config.log_every == 0 or step == 1:
            losses.append({"step": step, "mel_l1": float(mel_l1.detach()),
                           "stop_bce": float(stop_bce.detach()), "kl": kl_raw})
            last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}

    model.eval()
    val_l1 = _validation_l1(model, val_items, mel_mean, mel_std, config) if val_items else None
    ckpt = TeacherCheckpoint(directory=Path(workdir), config=config, vocab=vocab,
                             mel_mean=mel_mean, mel_std=mel_std, model=model,
                             step=step, corpus_fingerprint=corpus_fingerprint)
    ckpt.save()
    log_path = Path(workdir) / "training_log.json"
    log_path.write_text(json.dumps(
        {"losses": losses, "validation_l1": val_l1}, indent=2) + "\n", encoding="utf-8")
    return ckpt


def _validation_l1(model, val_items, mel_mean, mel_std, config, limit: int = 64):
    total = count = 0.0
    r = config.reduction
    with torch.no_grad():
        for start in range(0, min(len(val_items), limit), 8):
            idx = list(range(start, min(start + 8, len(val_items), limit)))
            tokens, tok_len, mel, mel_len, speaker, accent = _collate(
                val_items, idx, mel_mean, mel_std, r)
            b, max_t, _ = mel.shape
            memory = model.encode_text(tokens, tok_len, speaker, accent)
            mask = torch.arange(tokens.shape[1])[None, :] < tok_len[:, None]
            mu, _ = model.posterior(mel, mel_len)
            seg = None
            if config.hierarchical:
                smu, _ = model.segment_posterior(mel, mu)
                seg_idx = (torch.arange(max_t // r) * r) // config.segment_frames
                seg = smu[:, seg_idx.clamp(max=smu.shape[1] - 1)]
            go = torch.cat([mel.new_zeros(b, 1, N_MELS), mel[:, r - 1:-1:r]], dim=1)
            pred, _, _ = model.decode_steps(memory, mask, mu, go, max_t // r, seg)
            frame_mask = (torch.arange(max_t)[None, :] < mel_len[:, None]).float()
            total += float((torch.abs(pred - mel).mean(-1) * frame_mask).sum())
            count += float(frame_mask.sum())
    return total / max(count, 1.0)


def teacher_forced_l1(ckpt: TeacherCheckpoint, manifest, cache: FeatureCache,
                      limit: int = 64) -> float:
    """Teacher-forced validation L1 in normalized mel units."""
    items = _load_training_set(manifest, cache, ckpt.vocab)
    return _validation_l1(ckpt.model, items[:limit], ckpt.mel_mean, ckpt.mel_std, ckpt.config)


def synthesize_mel(ckpt: TeacherCheckpoint, tokens, speaker_id: str, accent_id: str,
                   latent: np.ndarray | None = None,
                   max_steps: int | None = None) -> TeacherSynthesis:
    """Generate a mel for one text; see synthesize_mel_batch."""
    return synthesize_mel_batch(ckpt, [(tokens, speaker_id, accent_id)],
                                latent=latent, max_steps=max_steps)[0]


def synthesize_mel_batch(ckpt: TeacherCheckpoint, jobs, latent: np.ndarray | None = None,
                         max_steps: int | None = None) -> list[TeacherSynthesis]:
    """Decode a batch of (tokens, speaker_id, accent_id) jobs.

    Deterministic: prior-mean latent by default, no dropout, stop threshold
    from the config. Jobs hitting the step limit come back flagged runaway.
    """
    model = ckpt.model
    model.eval()
    cfg = ckpt.config
    r = cfg.reduction
    max_steps = max_steps or cfg.max_decoder_steps
    b = len(jobs)
    if b == 0:
        return []
    for tokens, speaker_id, accent_id in jobs:
        if speaker_id not in ckpt.vocab.speaker_index:
            raise CheckpointError(f"speaker {speaker_id!r} not seen in training")
        if accent_id not in ckpt.vocab.accent_index:
            raise CheckpointError(f"accent {accent_id!r} not seen in training")

    enc_tokens = [ckpt.vocab.encode_tokens(list(t) + [EOS]) for t, _, _ in jobs]
    tok_len = torch.tensor([len(t) for t in enc_tokens])
    max_l = int(tok_len.max())
    token_ids = torch.zeros(b, max_l, dtype=torch.long)
    for i, t in enumerate(enc_tokens):
        token_ids[i, :len(t)] = t
    speaker = torch.tensor([ckpt.vocab.speaker_index[s] for _, s, _ in jobs])
    accent = torch.tensor([ckpt.vocab.accent_index[a] for _, _, a in jobs])

    with torch.no_grad():
        memory = model.encode_text(token_ids, tok_len, speaker, accent)
        mask = torch.arange(max_l)[None, :] < tok_len[:, None]
        if latent is None:
            z = memory.new_zeros(b, cfg.latent_dim)
        else:
            z = torch.as_tensor(latent, dtype=torch.float32).expand(b, cfg.latent_dim).clone()
        if cfg.hierarchical:
            z = torch.cat([z, memory.new_zeros(b, cfg.segment_latent_dim)], dim=-1)

        keys = model.attention.precompute(memory)
        state = memory.new_zeros(b, cfg.decoder_dim)
        attn = memory.new_zeros(b, max_l)
        attn[:, 0] = 1.0
        attn_cum = attn.clone()
        prev = memory.new_zeros(b, N_MELS)
        done = torch.zeros(b, dtype=torch.bool)
        stop_steps = [None] * b
        mel_steps, attn_steps = [], []
        for step in range(max_steps):
            pre = model.prenet(prev)
            context = torch.bmm(attn.unsqueeze(1), memory).squeeze(1)
            state = model.cell(torch.cat([pre, context, z], dim=-1), state)
            attn = model.attention(state, keys, attn, attn_cum, mask, step)
            attn_cum = attn_cum + attn
            context = torch.bmm(attn.unsqueeze(1), memory).squeeze(1)
            hidden = torch.cat([state, context], dim=-1)
            frames = model.mel_proj(hidden).reshape(b, r, N_MELS)
            stop = torch.sigmoid(model.stop_proj(hidden).squeeze(-1))
            mel_steps.append(frames)
            attn_steps.append(attn)
            prev = frames[:, -1]
            newly = (stop > cfg.stop_threshold) & ~done
            for i in torch.nonzero(newly).flatten().tolist():
                stop_steps[i] = step
            done |= newly
            if bool(done.all()):
                break

        mel = torch.stack(mel_steps, dim=1)          # (b, steps, r, N_MELS)
        att = torch.stack(attn_steps, dim=1)         # (b, steps, max_l)

    results = []
    mean = torch.from_numpy(ckpt.mel_mean)
    std = torch.from_numpy(ckpt.mel_std)
    for i in range(b):
        n_steps = (stop_steps[i] + 1) if stop_steps[i] is not None else mel.shape[1]
        m = mel[i, :n_steps].reshape(n_steps * r, N_MELS) * std + mean
        a = att[i, :n_steps, :tok_len[i] - 1]        # trim padding and the EOS column
        results.append(TeacherSynthesis(
            mel=m.numpy().astype(np.float32),
            attention=a.numpy().astype(np.float32),
            stop_step=stop_steps[i],
            runaway=stop_steps[i] is None))
    return results
