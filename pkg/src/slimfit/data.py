"""Synthetic token-classification tasks.

Three task kinds, all with labels that are deterministic functions of the
token sequence:

  parity         label = sum(tokens) mod num_classes
  copy-class     label = tokens[0] mod num_classes
  cluster-tokens tokens are drawn mostly from one latent cluster; the label
                 is the majority cluster. The token-to-cluster map is a
                 seed-dependent permutation, so tasks with different seeds
                 share their structure but scramble which tokens mean what.
                 Classifying requires pooling co-occurrence across
                 positions, which is what makes attention earn its keep.

Train and validation splits are disjoint by construction: sequences are
deduplicated before splitting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

KINDS = ("parity", "copy-class", "cluster-tokens")


@dataclass
class SyntheticTask:
    kind: str = "cluster-tokens"
    vocab: int = 64
    seq_len: int = 16
    num_classes: int = 4
    train_size: int = 2048
    val_size: int = 512
    seed: int = 0
    noise: float = 0.35   # cluster-tokens: chance a position ignores the drawn cluster

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; choose from {KINDS}")
        if self.vocab < self.num_classes:
            raise ConfigError("vocab must be at least num_classes")
        if min(self.seq_len, self.num_classes, self.train_size, self.val_size) < 1:
            raise ConfigError("task sizes must be >= 1")
        if not 0.0 <= self.noise < 1.0:
            raise ConfigError(f"noise must lie in [0, 1), got {self.noise}")


def token_clusters(task: SyntheticTask) -> np.ndarray:
    """Token id -> cluster id, a seeded permutation folded mod num_classes."""
    perm = np.random.default_rng([task.seed, 0xC1]).permutation(task.vocab)
    return perm % task.num_classes


def label_of(task: SyntheticTask, tokens: np.ndarray) -> np.ndarray:
    """Deterministic labels for a (N, T) token array."""
    tokens = np.atleast_2d(tokens)
    if task.kind == "parity":
        return tokens.sum(axis=1) % task.num_classes
    if task.kind == "copy-class":
        return tokens[:, 0] % task.num_classes
    clusters = token_clusters(task)[tokens]
    counts = np.zeros((tokens.shape[0], task.num_classes), dtype=np.int64)
    for c in range(task.num_classes):
        counts[:, c] = (clusters == c).sum(axis=1)
    return counts.argmax(axis=1)   # ties resolve to the lowest cluster id


def generate(task: SyntheticTask):
    """Build (train, val) datasets, each a (tokens, labels) pair."""
    task.validate()
    rng = np.random.default_rng([task.seed, 0xDA])
    need = task.train_size + task.val_size
    seen = set()
    rows = []
    cluster_members = None
    if task.kind == "cluster-tokens":
        clusters = token_clusters(task)
        cluster_members = [np.flatnonzero(clusters == c) for c in range(task.num_classes)]
        if any(len(m) == 0 for m in cluster_members):
            raise ConfigError("every cluster needs at least one token; increase vocab")

    # Rejection-sample unique sequences so the splits cannot overlap.
    attempts = 0
    while len(rows) < need:
        attempts += 1
        if attempts > 100 * need:
            raise ConfigError("task space too small for the requested sizes")
        if task.kind == "cluster-tokens":
            c = int(rng.integers(task.num_classes))
            members = cluster_members[c]
            seq = members[rng.integers(len(members), size=task.seq_len)].copy()
            flip = rng.random(task.seq_len) < task.noise
            seq[flip] = rng.integers(task.vocab, size=int(flip.sum()))
        else:
            seq = rng.integers(task.vocab, size=task.seq_len)
        key = seq.tobytes()
        if key in seen:
            continue
        seen.add(key)
        rows.append(seq)

    tokens = np.stack(rows).astype(np.int64)
    labels = label_of(task, tokens).astype(np.int64)
    train = (tokens[:task.train_size], labels[:task.train_size])
    val = (tokens[task.train_size:], labels[task.train_size:])
    return train, val


def gen_synthetic(task: SyntheticTask):
    return generate(task)
