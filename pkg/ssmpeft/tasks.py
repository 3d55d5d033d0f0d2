# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

"""Seeded synthetic tasks: selective copying and sequence classification.

Token ids 0-3 are reserved (0 unused, 1 query, 2 and 3 markers); content
tokens are ids >= CONTENT_START. Every instance is a pure function of its
seed and the task parameters.
"""

import logging

import numpy as np
import pandas as pd

from .core.utils import derive_seed, make_rng
from .errors import ContractError

LOG = logging.getLogger(__name__)

GENERATOR_VERSION = 1

QUERY = 1
MARKER_A = 2
MARKER_B = 3
CONTENT_START = 4

KINDS = ["selective_copy", "classification"]
RULES = ["majority", "first_last_match", "marker_parity"]


class TaskInstance:
    """One sequence. ``target`` holds the expected output token at every
    position and ``mask`` selects the positions that are scored."""

    def __init__(self, tokens, target, mask, kind, label=None):
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.target = np.asarray(target, dtype=np.int64)
        self.mask = np.asarray(mask, dtype=bool)
        self.kind = kind
        self.label = label

    def __len__(self):
        return len(self.tokens)

    def to_dict(self):
        return {
            "kind": self.kind,
            "tokens": self.tokens.tolist(),
            "target": self.target.tolist(),
            "mask": self.mask.astype(int).tolist(),
            "label": self.label,
            "version": GENERATOR_VERSION,
        }

    @staticmethod
    def from_dict(d):
        label = d.get("label", None)
        if label is not None and not (isinstance(label, float) and np.isnan(label)):
            label = int(label)
        else:
            label = None
        return TaskInstance(d["tokens"], d["target"], np.asarray(d["mask"]) > 0, d["kind"], label)


def _content(vocab):
    n = vocab - CONTENT_START
    if n < 2:
        raise ContractError(f"vocab={vocab} leaves fewer than 2 content tokens")
    return np.arange(CONTENT_START, vocab)


def payload_remap(vocab, remap_seed):
    """Seeded permutation of the content alphabet moving every token"""
    content = _content(vocab)
    rng = make_rng(derive_seed(remap_seed, "remap", vocab))
    shift = int(rng.integers(1, len(content)))
    perm = np.roll(content, -shift)
    r = np.arange(vocab)
    r[content] = perm
    return r


def gen_selective_copy(seed, T, n_marked, vocab, marker=MARKER_A, remap_seed=None):
    """Noise tokens with ``n_marked`` payload tokens, each right after a
    marker token; the last ``n_marked`` positions hold query tokens whose
    targets are the payload in order (remapped when ``remap_seed`` is set).
    """
    if n_marked < 1 or n_marked >= T:
        raise ContractError(f"gen_selective_copy(): need 1 <= n_marked < T (got n_marked={n_marked} T={T})")
    if T < 3 * n_marked:
        raise ContractError(f"gen_selective_copy(): T={T} too short for {n_marked} marked tokens")
    if marker not in (MARKER_A, MARKER_B):
        raise ContractError(f"gen_selective_copy(): marker must be {MARKER_A} or {MARKER_B}")
    content = _content(vocab)
    rng = make_rng(seed)

    body = T - n_marked
    tokens = rng.choice(content, size=T)
    q = np.sort(rng.choice(body - n_marked, size=n_marked, replace=False))
    pos = q + np.arange(n_marked)
    payload = rng.choice(content, size=n_marked)
    tokens[pos] = marker
    tokens[pos + 1] = payload
    tokens[body:] = QUERY

    out = payload if remap_seed is None else payload_remap(vocab, remap_seed)[payload]
    target = np.zeros(T, dtype=np.int64)
    target[body:] = out
    mask = np.zeros(T, dtype=bool)
    mask[body:] = True
    return TaskInstance(tokens, target, mask, "selective_copy")


def gen_sequence_classification(seed, T, rule, vocab, marker=MARKER_A):
    """Binary classification read at the last position (target id = label).

    majority: class of the majority half of the content alphabet, ties go
    to the class of the last token; first_last_match: first token equals
    last; marker_parity: parity of the number of marker tokens.
    """
    if T < 1:
        raise ContractError(f"gen_sequence_classification(): T must be >= 1 (got {T})")
    content = _content(vocab)
    rng = make_rng(seed)

    if rule == "majority":
        half = len(content) // 2
        tokens = rng.choice(content[: 2 * half], size=T)
        upper = int(np.sum(tokens >= content[half]))
        lower = T - upper
        if upper != lower:
            label = int(upper > lower)
        else:
            label = int(tokens[-1] >= content[half])
    elif rule == "first_last_match":
        if T < 2:
            raise ContractError("gen_sequence_classification(): first_last_match needs T >= 2")
        label = int(rng.integers(0, 2))
        tokens = rng.choice(content, size=T)
        if label:
            tokens[-1] = tokens[0]
        elif tokens[-1] == tokens[0]:
            others = content[content != tokens[0]]
            tokens[-1] = rng.choice(others)
    elif rule == "marker_parity":
        label = int(rng.integers(0, 2))
        k = 2 * int(rng.integers(0, (T - label) // 2 + 1)) + label
        tokens = rng.choice(content, size=T)
        if k:
            tokens[rng.choice(T, size=k, replace=False)] = marker
    else:
        raise ContractError(f"gen_sequence_classification(): unknown rule={rule}, available: {RULES}")

    target = np.zeros(T, dtype=np.int64)
    target[-1] = label
    mask = np.zeros(T, dtype=bool)
    mask[-1] = True
    return TaskInstance(tokens, target, mask, "classification", label=label)


class TaskSpec:
    def __init__(
        self,
        kind="selective_copy",
        seq_len=32,
        vocab=24,
        n_marked=4,
        marker=MARKER_A,
        rule="majority",
        remap_seed=None,
    ):
        if kind not in KINDS:
            raise ContractError(f"TaskSpec: unknown kind={kind}, available: {KINDS}")
        self.kind = kind
        self.seq_len = seq_len
        self.vocab = vocab
        self.n_marked = n_marked
        self.marker = marker
        self.rule = rule
        self.remap_seed = remap_seed

    def to_dict(self):
        d = {"kind": self.kind, "seq_len": self.seq_len, "vocab": self.vocab, "marker": self.marker}
        if self.kind == "selective_copy":
            d["n_marked"] = self.n_marked
            d["remap_seed"] = self.remap_seed
        else:
            d["rule"] = self.rule
        return d

    @staticmethod
    def from_dict(d):
        return TaskSpec(**d)

    def __eq__(self, other):
        return isinstance(other, TaskSpec) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return f"TaskSpec({self.to_dict()})"


class TaskGenerator:
    def __init__(self, spec):
        self.spec = spec if isinstance(spec, TaskSpec) else TaskSpec.from_dict(spec)

    def sample(self, seed):
        s = self.spec
        if s.kind == "selective_copy":
            return gen_selective_copy(seed, s.seq_len, s.n_marked, s.vocab, s.marker, s.remap_seed)
        return gen_sequence_classification(seed, s.seq_len, s.rule, s.vocab, s.marker)

    def dataset(self, n, seed):
        """``n`` instances with seeds derived from ``seed``"""
        return [self.sample(derive_seed(seed, "instance", i)) for i in range(n)]

    @staticmethod
    def stack(instances):
        """(tokens, targets, mask) arrays of shape (B, T)"""
        return (
            np.stack([x.tokens for x in instances]),
            np.stack([x.target for x in instances]),
            np.stack([x.mask for x in instances]),
        )


def domain_shift(task_a, task_b):
    """Generators for a pretraining task and a shifted adaptation task"""
    a = task_a if isinstance(task_a, TaskSpec) else TaskSpec.from_dict(task_a)
    b = task_b if isinstance(task_b, TaskSpec) else TaskSpec.from_dict(task_b)
    if a.vocab != b.vocab:
        raise ContractError(f"domain_shift(): vocabularies differ ({a.vocab} vs {b.vocab})")
    if a == b:
        raise ContractError("domain_shift(): the two tasks are identical")
    return TaskGenerator(a), TaskGenerator(b)


def write_snapshot(instances, path):
    """Store instances as JSON lines"""
    df = pd.DataFrame([x.to_dict() for x in instances])
    df.to_json(path, orient="records", lines=True)
    LOG.info(f"{len(instances)} task instances written to {path}")


def read_snapshot(path):
    df = pd.read_json(path, orient="records", lines=True)
    if len(df) and "version" in df and int(df["version"].iloc[0]) != GENERATOR_VERSION:
        LOG.warning(f"{path} was written by task generator version {int(df['version'].iloc[0])}")
    return [TaskInstance.from_dict(row) for row in df.to_dict(orient="records")]
