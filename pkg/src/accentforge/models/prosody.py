"""Per-accent prosody student: durations and F0 from linguistic features.

Trained on synthetic data only. A short-range convolutional context encoder
feeds a per-token duration head and a frame-rate F0/voicing head after
duration-driven upsampling. No attention, no autoregression: output length
is an explicit function of the predicted durations, so the decoder failure
modes cannot occur by construction.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..features import LinguisticFeatures, ProsodyTrack
from .common import (CheckpointError, Vocab, batched_indices, load_checkpoint_doc,
                     load_state, save_checkpoint)

log = logging.getLogger("accentforge.prosody")

N_SCALAR_FEATS = 7          # LinguisticFeatures.scalar_matrix columns
N_FRAME_FEATS = 3           # frac-in-token, seconds-from-start, token frames
F0_SCALE = 100.0            # predict f0 / F0_SCALE
MAX_TOKEN_FRAMES = 50


@dataclass
class StudentConfig:
    accent_id: str = ""
    phone_embed_dim: int = 32
    speaker_embed_dim: int = 16
    style_embed_dim: int = 4
    encoder_dim: int = 64
    encoder_kernel: int = 3             # short range on purpose: rate cues must
    encoder_layers: int = 2             # flow through the style embedding
    f0_hidden_dim: int = 64
    steps: int = 800
    batch_size: int = 16
    learning_rate: float = 2e-3
    grad_clip: float = 1.0
    log_every: int = 50

    def validate(self):
        if not self.accent_id:
            raise ValueError("StudentConfig.accent_id must name the accent this instance serves")


class StudentModel(nn.Module):
    def __init__(self, cfg: StudentConfig, vocab: Vocab):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.token_embed = nn.Embedding(len(vocab.tokens), cfg.phone_embed_dim)
        self.speaker_embed = nn.Embedding(len(vocab.speakers), cfg.speaker_embed_dim)
        self.style_embed = nn.Embedding(len(vocab.styles), cfg.style_embed_dim)
        in_dim = cfg.phone_embed_dim + N_SCALAR_FEATS + cfg.speaker_embed_dim + cfg.style_embed_dim
        convs = []
        for i in range(cfg.encoder_layers):
            convs.append(nn.Conv1d(in_dim if i == 0 else cfg.encoder_dim, cfg.encoder_dim,
                                   cfg.encoder_kernel, padding=cfg.encoder_kernel // 2))
            convs.append(nn.ReLU())
        self.encoder = nn.Sequential(*convs)
        self.duration_head = nn.Linear(cfg.encoder_dim, 1)
        self.f0_net = nn.Sequential(
            nn.Linear(cfg.encoder_dim + N_FRAME_FEATS, cfg.f0_hidden_dim), nn.ReLU(),
            nn.Linear(cfg.f0_hidden_dim, cfg.f0_hidden_dim), nn.ReLU(),
            nn.Linear(cfg.f0_hidden_dim, 2))       # f0 value, voicing logit

    def encode(self, token_ids, scalars, speaker_ids, style_ids):
        b, l = token_ids.shape
        x = torch.cat([
            self.token_embed(token_ids),
            scalars,
            self.speaker_embed(speaker_ids).unsqueeze(1).expand(b, l, -1),
            self.style_embed(style_ids).unsqueeze(1).expand(b, l, -1),
        ], dim=-1)
        return self.encoder(x.transpose(1, 2)).transpose(1, 2)

    def predict_durations(self, encoded):
        return self.duration_head(encoded).squeeze(-1)       # log frames

    def frame_outputs(self, encoded_frames, frame_feats):
        out = self.f0_net(torch.cat([encoded_frames, frame_feats], dim=-1))
        return out[..., 0], out[..., 1]


def frame_features(durations: np.ndarray, hop_seconds: float = 0.0125) -> np.ndarray:
    """Per-frame scalars for duration-driven upsampling."""
    total = int(np.sum(durations))
    feats = np.zeros((total, N_FRAME_FEATS), dtype=np.float32)
    pos = 0
    t = 0.0
    for d in np.asarray(durations, dtype=np.int64):
        idx = np.arange(d)
        feats[pos:pos + d, 0] = (idx + 0.5) / d
        feats[pos:pos + d, 1] = (t + (idx + 0.5) * hop_seconds) / 4.0
        feats[pos:pos + d, 2] = d / 25.0
        pos += d
        t += d * hop_seconds
    return feats


def expand_by_durations(encoded: torch.Tensor, durations: np.ndarray) -> torch.Tensor:
    """Repeat per-token encodings into the frame grid (one utterance)."""
    reps = torch.as_tensor(np.asarray(durations, dtype=np.int64))
    return torch.repeat_interleave(encoded, reps, dim=0)


@dataclass
class StudentCheckpoint:
    directory: Path
    config: StudentConfig
    vocab: Vocab
    model: StudentModel
    step: int = 0
    corpus_fingerprint: str = ""

    @classmethod
    def load(cls, directory) -> "StudentCheckpoint":
        doc, meta = load_checkpoint_doc(directory)
        cfg = StudentConfig(**doc["config"])
        vocab = Vocab(**doc["vocab"])
        model = StudentModel(cfg, vocab)
        load_state(directory, model)
        model.eval()
        return cls(directory=Path(directory), config=cfg, vocab=vocab, model=model,
                   step=meta["step"], corpus_fingerprint=doc.get("corpus_fingerprint", ""))

    def save(self) -> None:
        save_checkpoint(self.directory, self.model, self.config, {
            "vocab": {"tokens": self.vocab.tokens, "speakers": self.vocab.speakers,
                      "accents": self.vocab.accents, "styles": self.vocab.styles},
            "corpus_fingerprint": self.corpus_fingerprint,
            "step": self.step,
        })


def _training_items(manifest, vocab: Vocab):
    from ..features import linguistic_features
    items = []
    for u in manifest:
        track = u.load_ground_truth(manifest.root)
        if track is None or track.durations is None:
            raise CheckpointError(f"utterance {u.id} lacks prosody targets")
        feats = linguistic_features(list(u.text), style_id=u.style_id, speaker_id=u.speaker_id)
        items.append({
            "tokens": vocab.encode_tokens(list(u.text)),
            "scalars": torch.from_numpy(feats.scalar_matrix()),
            "speaker": vocab.speaker_index[u.speaker_id],
            "style": vocab.style_index[u.style_id],
            "durations": np.asarray(track.durations, dtype=np.int64),
            "f0": np.asarray(track.f0, dtype=np.float32),
            "voicing": np.asarray(track.voicing, dtype=bool),
        })
    return items


def train_student(manifest, config: StudentConfig, seed: int, workdir,
                  corpus_fingerprint: str = "") -> StudentCheckpoint:
    """Train one per-accent prosody student on an all-synthetic manifest."""
    config.validate()
    natural = [u.id for u in manifest if u.provenance != "synthetic"]
    if natural:
        raise CheckpointError(
            f"prosody training data must be all-synthetic; natural records: {natural[:3]}")
    mismatched = [u.id for u in manifest if u.accent_id != config.accent_id]
    if mismatched:
        raise CheckpointError(
            f"manifest contains accents other than {config.accent_id}: {mismatched[:3]}")

    torch.manual_seed(seed)
    vocab = Vocab.from_manifests(manifest)
    items = _training_items(manifest, vocab)
    model = StudentModel(config, vocab)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    losses = []

    lengths = [len(it["tokens"]) for it in items]
    step = 0
    for idx in batched_indices(len(items), config.batch_size, lengths, seed, config.steps):
        batch = [items[i] for i in idx]
        b = len(batch)
        max_l = max(len(it["tokens"]) for it in batch)
        token_ids = torch.zeros(b, max_l, dtype=torch.long)
        scalars = torch.zeros(b, max_l, N_SCALAR_FEATS)
        speaker = torch.tensor([it["speaker"] for it in batch])
        style = torch.tensor([it["style"] for it in batch])
        tok_mask = torch.zeros(b, max_l, dtype=torch.bool)
        for i, it in enumerate(batch):
            l = len(it["tokens"])
            token_ids[i, :l] = it["tokens"]
            scalars[i, :l] = it["scalars"]
            tok_mask[i, :l] = True

        encoded = model.encode(token_ids, scalars, speaker, style)
        log_dur = model.predict_durations(encoded)
        dur_target = torch.zeros(b, max_l)
        for i, it in enumerate(batch):
            dur_target[i, :len(it["tokens"])] = torch.log(
                torch.as_tensor(it["durations"], dtype=torch.float32))
        dur_loss = ((log_dur - dur_target) ** 2)[tok_mask].mean()

        # frame-rate heads run on target durations during training
        enc_frames, ffeats, f0_t, voice_t = [], [], [], []
        for i, it in enumerate(batch):
            enc_frames.append(expand_by_durations(encoded[i, :len(it["tokens"])],
                                                  it["durations"]))
            ffeats.append(torch.from_numpy(frame_features(it["durations"])))
            f0_t.append(torch.from_numpy(it["f0"]))
            voice_t.append(torch.from_numpy(it["voicing"].astype(np.float32)))
        f0_pred, voice_logit = model.frame_outputs(torch.cat(enc_frames),
                                                   torch.cat(ffeats))
        f0_target = torch.cat(f0_t) / F0_SCALE
        voice_target = torch.cat(voice_t)
        voiced_mask = voice_target > 0.5
        f0_loss = ((f0_pred - f0_target) ** 2)[voiced_mask].mean() if voiced_mask.any() \
            else f0_pred.new_zeros(())
        voice_loss = F.binary_cross_entropy_with_logits(voice_logit, voice_target)
        loss = dur_loss + f0_loss + voice_loss

        if not torch.isfinite(loss):
            log.warning("student loss diverged at step %d", step)
            break
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        step += 1
        if step % config.log_every == 0 or step == 1:
            losses.append({"step": step, "duration_mse": float(dur_loss.detach()),
                           "f0_mse": float(f0_loss.detach()),
                           "voicing_bce": float(voice_loss.detach())})

    model.eval()
    ckpt = StudentCheckpoint(directory=Path(workdir), config=config, vocab=vocab,
                             model=model, step=step, corpus_fingerprint=corpus_fingerprint)
    ckpt.save()
    (Path(workdir) / "training_log.json").write_text(
        json.dumps({"losses": losses}, indent=2) + "\n", encoding="utf-8")
    return ckpt


def predict_prosody(ckpt: StudentCheckpoint, feats: LinguisticFeatures,
                    speaker_id: str, style_id: str) -> ProsodyTrack:
    """Deterministic prosody prediction for one utterance."""
    if speaker_id not in ckpt.vocab.speaker_index:
        raise CheckpointError(f"speaker {speaker_id!r} not in the synthetic training data")
    if style_id not in ckpt.vocab.style_index:
        raise CheckpointError(f"style {style_id!r} not in the synthetic training data")
    model = ckpt.model
    model.eval()
    with torch.no_grad():
        token_ids = ckpt.vocab.encode_tokens(feats.tokens).unsqueeze(0)
        scalars = torch.from_numpy(feats.scalar_matrix()).unsqueeze(0)
        speaker = torch.tensor([ckpt.vocab.speaker_index[speaker_id]])
        style = torch.tensor([ckpt.vocab.style_index[style_id]])
        encoded = model.encode(token_ids, scalars, speaker, style)
        log_dur = model.predict_durations(encoded)[0]
        durations = torch.clamp(torch.round(torch.exp(log_dur)), 1, MAX_TOKEN_FRAMES)
        durations = durations.long().numpy()
        enc_frames = expand_by_durations(encoded[0], durations)
        ffeats = torch.from_numpy(frame_features(durations))
        f0_pred, voice_logit = model.frame_outputs(enc_frames, ffeats)
        voicing = (voice_logit > 0).numpy()
        f0 = np.clip(f0_pred.numpy() * F0_SCALE, 60.0, 400.0)
        f0 = np.where(voicing, f0, 0.0).astype(np.float32)
    return ProsodyTrack(f0=f0, voicing=voicing, durations=durations)
