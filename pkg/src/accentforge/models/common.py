"""Shared model plumbing: vocabularies, checkpoint directories, batching."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Vocab:
    tokens: list
    speakers: list
    accents: list
    styles: list

    def __post_init__(self):
        self.token_index = {t: i for i, t in enumerate(self.tokens)}
        self.speaker_index = {s: i for i, s in enumerate(self.speakers)}
        self.accent_index = {a: i for i, a in enumerate(self.accents)}
        self.style_index = {s: i for i, s in enumerate(self.styles)}

    def encode_tokens(self, tokens):
        try:
            return torch.tensor([self.token_index[t] for t in tokens], dtype=torch.long)
        except KeyError as e:
            raise CheckpointError(f"token {e.args[0]!r} not in model vocabulary") from e

    @classmethod
    def from_manifests(cls, *manifests) -> "Vocab":
        tokens, speakers, accents, styles = set(), set(), set(), set()
        for m in manifests:
            for u in m:
                tokens.update(u.text)
                styles.add(u.style_id)
                accents.add(u.accent_id)
            speakers.update(m.speaker_table.keys())
            accents.update(e.native_accent for e in m.speaker_table.values())
        return cls(sorted(tokens), sorted(speakers), sorted(accents), sorted(styles))


def save_checkpoint(directory, model: torch.nn.Module, config, extra: dict) -> Path:
    """Checkpoint layout: config.json + params.pt + meta.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": SCHEMA_VERSION, "config": asdict(config)}
    doc.update({k: v for k, v in extra.items() if k != "step"})
    (directory / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    torch.save(model.state_dict(), directory / "params.pt")
    meta = {"step": int(extra.get("step", 0))}
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n",
                                         encoding="utf-8")
    return directory


def load_checkpoint_doc(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    cfg_path = directory / "config.json"
    if not cfg_path.exists():
        raise CheckpointError(f"no checkpoint at {directory}")
    doc = json.loads(cfg_path.read_text(encoding="utf-8"))
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint schema {doc.get('schema_version')} does not match "
            f"code schema {SCHEMA_VERSION}")
    meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    return doc, meta


def load_state(directory, model: torch.nn.Module) -> None:
    state = torch.load(Path(directory) / "params.pt", map_location="cpu",
                       weights_only=True)
    model.load_state_dict(state)


def batched_indices(n: int, batch_size: int, lengths, seed: int, steps: int):
    """Length-bucketed batch index generator, deterministic per seed.

    Sorts by length, cuts into batches, and yields them in shuffled order,
    cycling epochs until `steps` batches have been produced.
    """
    order = np.argsort(np.asarray(lengths), kind="stable")
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    rng = np.random.default_rng(seed)
    produced = 0
    while produced < steps:
        for bi in rng.permutation(len(batches)):
            if produced >= steps:
                return
            yield batches[bi]
            produced += 1
