"""Byte-level corpus handling and deterministic batching.

The vocabulary is the 256 raw byte values; no tokenizer, no special
tokens. Sequences are cut from the corpus in non-overlapping strides of
``seq_len`` (each carrying one extra byte so targets are inputs shifted
left by one). Batch order is a seeded permutation per epoch.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "byte_tokenize",
    "sequence_count",
    "batch_count",
    "epoch_batches",
    "batch_stream",
    "repeated_phrase_corpus",
    "markov_corpus",
]


def byte_tokenize(corpus: bytes) -> np.ndarray:
    """Raw bytes -> int64 token ids in [0, 255]."""
    return np.frombuffer(corpus, dtype=np.uint8).astype(np.int64)


def sequence_count(n_tokens: int, seq_len: int) -> int:
    return (n_tokens - 1) // seq_len


def batch_count(n_tokens: int, seq_len: int, batch_size: int) -> int:
    """Full batches per epoch under non-overlapping chunking."""
    return sequence_count(n_tokens, seq_len) // batch_size


def epoch_batches(
    ids: np.ndarray,
    seq_len: int,
    batch_size: int,
    seed: int | None = None,
):
    """Yield (inputs, targets) arrays of shape [batch_size, seq_len] once.

    ``seed`` None keeps corpus order (evaluation); otherwise sequence
    order is a seeded permutation.
    """
    n_seq = sequence_count(len(ids), seq_len)
    if n_seq < 1:
        raise ValueError(
            f"corpus too small: {len(ids)} tokens for seq_len {seq_len}"
        )
    order = np.arange(n_seq)
    if seed is not None:
        order = np.random.default_rng(seed).permutation(n_seq)
    for b in range(n_seq // batch_size):
        chunk = order[b * batch_size : (b + 1) * batch_size]
        inputs = np.stack([ids[s * seq_len : s * seq_len + seq_len] for s in chunk])
        targets = np.stack(
            [ids[s * seq_len + 1 : s * seq_len + seq_len + 1] for s in chunk]
        )
        yield inputs, targets


def batch_stream(ids: np.ndarray, seq_len: int, batch_size: int, seed: int):
    """Endless batch iterator cycling epochs with per-epoch reshuffling."""
    epoch = 0
    while True:
        got = False
        for batch in epoch_batches(ids, seq_len, batch_size, seed + epoch):
            got = True
            yield batch
        if not got:
            raise ValueError(
                f"corpus too small for seq_len {seq_len} x batch_size {batch_size}"
            )
        epoch += 1


# ---------------------------------------------------------------------------
# Synthetic corpora for tests and demos
# ---------------------------------------------------------------------------

_PHRASES = [
    "the quick brown fox jumps over the lazy dog. ",
    "pack my box with five dozen liquor jugs. ",
    "how vexingly quick daft zebras jump! ",
]

_WORDS = (
    "the of and a to in is was he for it with as his on be at by had not "
    "are but from or have an they which one you were her all she there "
    "would their we him been has when who will more no if out so said what "
    "up its about into than them can only other new some could time these "
    "two may then do first any my now such like our over man me even most "
    "made after also did many before must through back years where much "
    "your way well down should because each just those people how too "
    "little state good very make world still own see men work long get "
    "here between both life being under never day same another know while "
    "last might us great old year off come since against go came right "
    "used take three"
).split()


def repeated_phrase_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """Highly compressible text: a seeded shuffle of pangrams, tiled."""
    rng = np.random.default_rng(seed)
    phrases = [_PHRASES[i] for i in rng.permutation(len(_PHRASES))]
    text = "".join(phrases)
    reps = n_bytes // len(text) + 1
    return (text * reps).encode("ascii")[:n_bytes]


def markov_corpus(n_bytes: int, seed: int = 0, branching: int = 4) -> bytes:
    """Word-level Markov chain text: learnable but not trivially repetitive."""
    rng = np.random.default_rng(seed)
    n_words = len(_WORDS)
    successors = {w: rng.choice(n_words, size=branching) for w in range(n_words)}
    out: list[str] = []
    total = 0
    state = int(rng.integers(n_words))
    sentence = 0
    while total < n_bytes:
        word = _WORDS[state]
        if sentence == 0:
            word = word.capitalize()
        out.append(word)
        total += len(word) + 1
        sentence += 1
        if sentence >= int(rng.integers(6, 14)):
            out[-1] = out[-1] + "."
            total += 1
            sentence = 0
        state = int(successors[state][rng.integers(branching)])
    return " ".join(out).encode("ascii")[:n_bytes]
