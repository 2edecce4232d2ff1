"""Per-accent waveform synthesizer: conditional sample-level recurrence.

A single simplified-gating recurrent cell (one forget gate shared between
state mixing and candidate gating) predicts a 5-component logistic mixture
over the next sample, conditioned on linguistic features plus F0/voicing
upsampled from frame rate by repetition through a learned smoothing conv.
Trained per accent on synthetic data plus the accent anchor's natural
recordings. Generation length is fixed by the prosody durations, so the
model cannot run away.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..audio import HOP
from ..data import CorpusManifest, ManifestError
from ..features import LinguisticFeatures, ProsodyTrack, linguistic_features
from .common import (CheckpointError, Vocab, load_checkpoint_doc, load_state,
                     save_checkpoint)
from .prosody import F0_SCALE

log = logging.getLogger("accentforge.wavegru")

COMPONENT_ID = "wavegru"            # architecture marker checked against the
                                    # data-generation vocoder ("phase-recon")


@dataclass
class SynthConfig:
    accent_id: str = ""
    hidden_dim: int = 384
    cond_dim: int = 48
    phone_embed_dim: int = 16
    speaker_embed_dim: int = 8
    style_embed_dim: int = 4
    mixture_components: int = 5
    head_dim: int = 64
    crop_frames: int = 8
    steps: int = 600
    batch_size: int = 12
    learning_rate: float = 3e-4
    grad_clip: float = 1.0
    log_every: int = 25
    temperature: float = 1.0

    def validate(self):
        if not self.accent_id:
            raise ValueError("SynthConfig.accent_id must name the accent this instance serves")
        if self.hidden_dim <= 0 or self.mixture_components <= 0:
            raise ValueError("SynthConfig dims must be > 0")


class SynthModel(nn.Module):
    def __init__(self, cfg: SynthConfig, vocab: Vocab):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.token_embed = nn.Embedding(len(vocab.tokens), cfg.phone_embed_dim)
        self.speaker_embed = nn.Embedding(len(vocab.speakers), cfg.speaker_embed_dim)
        self.style_embed = nn.Embedding(len(vocab.styles), cfg.style_embed_dim)
        conv_out = cfg.cond_dim - cfg.speaker_embed_dim - cfg.style_embed_dim
        self.cond_conv = nn.Conv1d(cfg.phone_embed_dim + 3, conv_out, 3, padding=1)
        in_dim = 1 + cfg.cond_dim
        h = cfg.hidden_dim
        self.x_gate = nn.Linear(in_dim, h)
        self.x_cand = nn.Linear(in_dim, h)
        self.h_gate = nn.Linear(h, h, bias=False)
        self.h_cand = nn.Linear(h, h, bias=False)
        self.head1 = nn.Linear(h, cfg.head_dim)
        self.head2 = nn.Linear(cfg.head_dim, 3 * cfg.mixture_components)

    def frame_conditioning(self, token_ids_per_frame, frame_scalars, speaker_id, style_id):
        """(T, cond_dim) conditioning for one utterance's frame grid."""
        emb = self.token_embed(token_ids_per_frame)
        x = torch.cat([emb, frame_scalars], dim=-1).T.unsqueeze(0)
        smooth = self.cond_conv(x).squeeze(0).T
        t = smooth.shape[0]
        spk = self.speaker_embed(speaker_id).expand(t, -1)
        sty = self.style_embed(style_id).expand(t, -1)
        return torch.cat([smooth, spk, sty], dim=-1)

    def cell_sequence(self, x_seq, h0=None):
        """Run the simplified-gating cell over (B, T, in); returns (B, T, H)."""
        b, t, _ = x_seq.shape
        h = x_seq.new_zeros(b, self.cfg.hidden_dim) if h0 is None else h0
        xg = self.x_gate(x_seq)
        xc = self.x_cand(x_seq)
        states = []
        for step in range(t):
            f = torch.sigmoid(xg[:, step] + self.h_gate(h))
            cand = torch.tanh(xc[:, step] + self.h_cand(f * h))
            h = (1.0 - f) * h + f * cand
            states.append(h)
        return torch.stack(states, dim=1)

    def mixture_params(self, states):
        out = self.head2(F.relu(self.head1(states)))
        logits, mu, log_s = out.chunk(3, dim=-1)
        return logits, mu, log_s.clamp(-7.0, 5.0)


def mixture_nll(logits, mu, log_s, target):
    """Negative log-likelihood of a continuous logistic mixture, nats/sample."""
    z = (target.unsqueeze(-1) - mu) * torch.exp(-log_s)
    log_pdf = -z - log_s - 2.0 * F.softplus(-z)
    log_mix = torch.logsumexp(torch.log_softmax(logits, dim=-1) + log_pdf, dim=-1)
    return -log_mix


def single_logistic_baseline_nll(samples: np.ndarray) -> float:
    """NLL of the best single logistic fit to the sample marginal."""
    mu = float(np.median(samples))
    s = max(float(np.std(samples)) * math.sqrt(3.0) / math.pi, 1e-5)
    z = (samples - mu) / s
    log_pdf = -z - math.log(s) - 2.0 * np.logaddexp(0.0, -z)
    return float(-log_pdf.mean())


def assemble_synth_trainset(synthetic: CorpusManifest, natural: CorpusManifest,
                            target_accent: str) -> CorpusManifest:
    """Union of synthetic data and the accent anchor's natural recordings.

    Natural records must belong to native speakers of the target accent.
    Provenance labels are preserved; counts per provenance are logged.
    """
    for u in synthetic:
        if u.provenance != "synthetic":
            raise ManifestError(f"record {u.id} in the synthetic manifest is {u.provenance}")
    for u in natural:
        entry = natural.speaker_table[u.speaker_id]
        if entry.native_accent != target_accent:
            raise ManifestError(
                f"natural record {u.id}: speaker {u.speaker_id} is native "
                f"{entry.native_accent}, not {target_accent}")
    if len(natural) == 0:
        log.warning("no natural recordings in the synthesizer trainset; "
                    "audio fidelity usually improves when the accent anchor's "
                    "recordings are mixed in")
    table = dict(synthetic.speaker_table)
    table.update(natural.speaker_table)
    merged = CorpusManifest(list(synthetic) + list(natural), table, root=synthetic.root)
    log.info("synthesizer trainset: %d synthetic + %d natural",
             len(synthetic), len(natural))
    return merged


@dataclass
class SynthCheckpoint:
    directory: Path
    config: SynthConfig
    vocab: Vocab
    model: SynthModel
    step: int = 0
    corpus_fingerprint: str = ""
    final_nll: float = 0.0
    baseline_nll: float = 0.0

    @classmethod
    def load(cls, directory) -> "SynthCheckpoint":
        doc, meta = load_checkpoint_doc(directory)
        cfg = SynthConfig(**doc["config"])
        vocab = Vocab(**doc["vocab"])
        model = SynthModel(cfg, vocab)
        load_state(directory, model)
        model.eval()
        return cls(directory=Path(directory), config=cfg, vocab=vocab, model=model,
                   step=meta["step"], corpus_fingerprint=doc.get("corpus_fingerprint", ""),
                   final_nll=doc.get("final_nll", 0.0), baseline_nll=doc.get("baseline_nll", 0.0))

    def save(self) -> None:
        save_checkpoint(self.directory, self.model, self.config, {
            "vocab": {"tokens": self.vocab.tokens, "speakers": self.vocab.speakers,
                      "accents": self.vocab.accents, "styles": self.vocab.styles},
            "corpus_fingerprint": self.corpus_fingerprint,
            "final_nll": self.final_nll,
            "baseline_nll": self.baseline_nll,
            "step": self.step,
        })


def _utterance_arrays(u, root, vocab: Vocab):
    track = u.load_ground_truth(root)
    if track is None or track.durations is None:
        raise CheckpointError(f"utterance {u.id} lacks prosody for conditioning")
    feats = linguistic_features(list(u.text), style_id=u.style_id, speaker_id=u.speaker_id)
    return build_conditioning_arrays(feats, track, vocab), u.load_wave(root)


def build_conditioning_arrays(feats: LinguisticFeatures, track: ProsodyTrack, vocab: Vocab):
    """Frame-grid token ids and scalars driving the conditioning stack."""
    durations = np.asarray(track.durations, dtype=np.int64)
    if len(durations) != len(feats):
        raise ManifestError("prosody durations do not match the linguistic features")
    token_ids = np.repeat(
        np.array([vocab.token_index[t] for t in feats.tokens], dtype=np.int64), durations)
    total = int(durations.sum())
    frac = np.zeros(total, dtype=np.float32)
    pos = 0
    for d in durations:
        frac[pos:pos + d] = (np.arange(d) + 0.5) / d
        pos += d
    f0n = np.asarray(track.f0, dtype=np.float32)[:total] / F0_SCALE
    voiced = np.asarray(track.voicing, dtype=np.float32)[:total]
    scalars = np.stack([frac, f0n, voiced], axis=1)
    return token_ids, scalars


def train_synth(trainset: CorpusManifest, config: SynthConfig, seed: int, workdir,
                corpus_fingerprint: str = "") -> SynthCheckpoint:
    """Train the waveform synthesizer; NLL must end below the single-logistic
    baseline on the same data."""
    config.validate()
    torch.manual_seed(seed)
    vocab = Vocab.from_manifests(trainset)
    model = SynthModel(config, vocab)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    data = []
    for u in trainset:
        (token_ids, scalars), wave = _utterance_arrays(u, trainset.root, vocab)
        n = min(len(token_ids) * HOP, len(wave))
        frames = n // HOP
        if frames < config.crop_frames + 1:
            continue
        data.append({
            "token_ids": torch.from_numpy(token_ids),
            "scalars": torch.from_numpy(scalars),
            "speaker": torch.tensor(vocab.speaker_index[u.speaker_id]),
            "style": torch.tensor(vocab.style_index[u.style_id]),
            "wave": wave[:frames * HOP].astype(np.float32),
            "frames": frames,
        })
    if not data:
        raise ManifestError("no usable records in the synthesizer trainset")

    pool = np.concatenate([d["wave"][:4000] for d in data[:64]])
    baseline = single_logistic_baseline_nll(pool)

    rng = np.random.default_rng(seed)
    crop = config.crop_frames
    samples_per_crop = crop * HOP
    losses = []
    nll_value = float("inf")
    smoothed = None
    step = 0
    while step < config.steps:
        idx = rng.integers(0, len(data), size=config.batch_size)
        xs, targets = [], []
        for i in idx:
            d = data[int(i)]
            start = int(rng.integers(0, d["frames"] - crop))
            cond = model.frame_conditioning(
                d["token_ids"][start:start + crop],
                d["scalars"][start:start + crop],
                d["speaker"], d["style"])
            cond = cond.repeat_interleave(HOP, dim=0)
            s0 = start * HOP
            target = torch.from_numpy(d["wave"][s0:s0 + samples_per_crop])
            prev = torch.from_numpy(
                np.concatenate([[d["wave"][s0 - 1] if s0 else 0.0],
                                d["wave"][s0:s0 + samples_per_crop - 1]]).astype(np.float32))
            xs.append(torch.cat([prev.unsqueeze(-1), cond], dim=-1))
            targets.append(target)
        x = torch.stack(xs)
        target = torch.stack(targets)
        states = model.cell_sequence(x)
        logits, mu, log_s = model.mixture_params(states)
        nll = mixture_nll(logits, mu, log_s, target).mean()
        if not torch.isfinite(nll):
            log.warning("synthesizer loss diverged at step %d; stopping", step)
            break
        opt.zero_grad()
        nll.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        step += 1
        raw = float(nll.detach())
        smoothed = raw if smoothed is None else 0.9 * smoothed + 0.1 * raw
        nll_value = smoothed
        if step % config.log_every == 0 or step == 1:
            losses.append({"step": step, "nll": smoothed, "nll_batch": raw,
                           "baseline_nll": baseline})

    model.eval()
    ckpt = SynthCheckpoint(directory=Path(workdir), config=config, vocab=vocab,
                           model=model, step=step, corpus_fingerprint=corpus_fingerprint,
                           final_nll=nll_value, baseline_nll=baseline)
    ckpt.save()
    (Path(workdir) / "training_log.json").write_text(
        json.dumps({"losses": losses, "baseline_nll": baseline}, indent=2) + "\n",
        encoding="utf-8")
    return ckpt


# ---------------------------------------------------------------------------
# generation: numpy fast path over exported weights

class _NumpyState:
    def __init__(self, model: SynthModel):
        sd = {k: v.detach().numpy().astype(np.float32) for k, v in model.state_dict().items()}
        self.wg = sd["x_gate.weight"]          # (H, in)
        self.bg = sd["x_gate.bias"]
        self.wc = sd["x_cand.weight"]
        self.bc = sd["x_cand.bias"]
        self.ug = sd["h_gate.weight"]
        self.uc = sd["h_cand.weight"]
        self.h1 = sd["head1.weight"]
        self.b1 = sd["head1.bias"]
        self.h2 = sd["head2.weight"]
        self.b2 = sd["head2.bias"]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate_waveform(ckpt: SynthCheckpoint, feats: LinguisticFeatures,
                      prosody: ProsodyTrack, seed: int,
                      temperature: float | None = None) -> np.ndarray:
    """Generate audio for one utterance; see generate_waveform_batch."""
    return generate_waveform_batch(ckpt, [(feats, prosody, seed)], temperature)[0]


def generate_waveform_batch(ckpt: SynthCheckpoint, jobs,
                            temperature: float | None = None) -> list[np.ndarray]:
    """Sample waveforms for (features, prosody, seed) jobs in one batched loop.

    Output length is exactly sum(durations) * hop per job. Each job draws
    randomness from its own seeded generator, so results do not depend on
    batch composition. Temperature 0 selects the mode of the dominant
    mixture component deterministically.
    """
    if temperature is None:
        temperature = ckpt.config.temperature
    model = ckpt.model
    model.eval()
    w = _NumpyState(model)
    k = ckpt.config.mixture_components
    b = len(jobs)
    if b == 0:
        return []

    cond_gate, cond_cand, lengths, rand_u, rand_c = [], [], [], [], []
    with torch.no_grad():
        for feats, prosody, seed in jobs:
            if feats.speaker_id not in ckpt.vocab.speaker_index:
                raise CheckpointError(f"speaker {feats.speaker_id!r} unknown to the synthesizer")
            if feats.style_id not in ckpt.vocab.style_index:
                raise CheckpointError(f"style {feats.style_id!r} unknown to the synthesizer")
            token_ids, scalars = build_conditioning_arrays(feats, prosody, ckpt.vocab)
            cond = model.frame_conditioning(
                torch.from_numpy(token_ids), torch.from_numpy(scalars),
                torch.tensor(ckpt.vocab.speaker_index[feats.speaker_id]),
                torch.tensor(ckpt.vocab.style_index[feats.style_id])).numpy()
            x_cond = np.concatenate([np.zeros((cond.shape[0], 1), np.float32), cond], axis=1)
            cond_gate.append(x_cond @ w.wg.T + w.bg)
            cond_cand.append(x_cond @ w.wc.T + w.bc)
            n = cond.shape[0] * HOP
            lengths.append(n)
            rng = np.random.default_rng(np.random.SeedSequence([abs(int(seed)), 0xA0D10]))
            rand_c.append(rng.random(n, dtype=np.float32))
            rand_u.append(np.clip(rng.random(n, dtype=np.float32), 1e-6, 1 - 1e-6))

    h_dim = ckpt.config.hidden_dim
    max_n = max(lengths)
    max_frames = max(cg.shape[0] for cg in cond_gate)
    gate_pad = np.zeros((b, max_frames, h_dim), np.float32)
    cand_pad = np.zeros((b, max_frames, h_dim), np.float32)
    u_pad = np.full((b, max_n), 0.5, np.float32)
    c_pad = np.full((b, max_n), 0.5, np.float32)
    for i in range(b):
        gate_pad[i, :cond_gate[i].shape[0]] = cond_gate[i]
        cand_pad[i, :cond_cand[i].shape[0]] = cond_cand[i]
        u_pad[i, :lengths[i]] = rand_u[i]
        c_pad[i, :lengths[i]] = rand_c[i]
    frame_idx = np.minimum(np.arange(max_n) // HOP,
                           np.array([cg.shape[0] - 1 for cg in cond_gate])[:, None])

    h = np.zeros((b, h_dim), np.float32)
    prev = np.zeros(b, np.float32)
    out = np.zeros((b, max_n), np.float32)
    wg_prev = w.wg[:, 0]
    wc_prev = w.wc[:, 0]
    rows = np.arange(b)

    for s in range(max_n):
        fi = frame_idx[:, s]
        xg = gate_pad[rows, fi] + prev[:, None] * wg_prev[None, :]
        xc = cand_pad[rows, fi] + prev[:, None] * wc_prev[None, :]
        f = _sigmoid(xg + h @ w.ug.T)
        cand = np.tanh(xc + (f * h) @ w.uc.T)
        h = (1.0 - f) * h + f * cand
        hidden = np.maximum(h @ w.h1.T + w.b1, 0.0)
        params = hidden @ w.h2.T + w.b2
        logits, mu, log_s = params[:, :k], params[:, k:2 * k], np.clip(params[:, 2 * k:], -7.0, 5.0)
        if temperature <= 0.0:
            comp = logits.argmax(axis=1)
            x = mu[rows, comp]
        else:
            shifted = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            comp = (c_pad[:, s, None] > np.cumsum(probs, axis=1)).sum(axis=1).clip(max=k - 1)
            u = u_pad[:, s]
            x = mu[rows, comp] + np.exp(log_s[rows, comp]) \
                * temperature * (np.log(u) - np.log1p(-u))
        x = np.clip(x, -1.0, 1.0).astype(np.float32)
        out[:, s] = x
        prev = x
    return [out[i, :lengths[i]].copy() for i in range(b)]
