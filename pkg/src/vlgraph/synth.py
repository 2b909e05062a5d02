"""Synthetic clip generator with planted event/position structure.

Each clip is a sequence of 2-6 segments. A segment carries one of 16 event
prototypes at an ordinal position; its frames and subtitle tokens embed the
same (event, position, binding) code in their leading coordinates, in the
visual and text widths respectively, plus Gaussian noise. The statement is
2-4 clause vectors claiming (event, position) bindings: positives claim
segments that exist, in order; negatives either swap two claimed positions
or replace one claimed event with a prototype absent from the clip.

The binding block makes position swaps detectable from first-moment
features: a claim's code appears among the segment codes iff the claim is
true. Labels alternate 1, 0, 1, 0, ... so even record counts are balanced
exactly. Everything derives from the root seed.
"""

from __future__ import annotations

import numpy as np

from . import graph as gr
from .errors import ContractError

N_EVENTS = 16
POS_DIM = 6                  # one-hot ordinal position, caps segments per clip
PAIR_DIM = 8                 # random binding code per (event, position) pair
BASE_DIM = N_EVENTS + POS_DIM + PAIR_DIM

SPAN_LEN = 2.0
SEGMENTS_RANGE = (2, 6)
FRAMES_RANGE = (2, 4)
TOKENS_RANGE = (2, 4)
CLAUSES_RANGE = (2, 4)
BASE_NOISE = 0.08
ORPHAN_PROB = 0.2


def _pair_codes(rng: np.random.Generator) -> np.ndarray:
    codes = rng.standard_normal((N_EVENTS, POS_DIM, PAIR_DIM))
    return codes / np.linalg.norm(codes, axis=2, keepdims=True)


def _base_vector(event: int, position: int, codes: np.ndarray) -> np.ndarray:
    vec = np.zeros(BASE_DIM)
    vec[event] = 1.0
    vec[N_EVENTS + position] = 1.0
    vec[N_EVENTS + POS_DIM :] = codes[event, position]
    return vec


def _embed(base: np.ndarray, width: int, noise: float, rng: np.random.Generator) -> list[float]:
    vec = np.zeros(width)
    vec[:BASE_DIM] = base
    if noise > 0:
        vec += noise * rng.standard_normal(width)
    return vec.tolist()


def _make_clip(index: int, label: int, dims: tuple[int, int, int], noise: float,
               codes: np.ndarray, rng: np.random.Generator) -> dict:
    d_v, d_s, d_h = dims
    m = int(rng.integers(SEGMENTS_RANGE[0], SEGMENTS_RANGE[1] + 1))
    events = rng.choice(N_EVENTS, size=m, replace=False)

    frames: list[dict] = []
    subs: list[dict] = []
    for pos in range(m):
        base = _base_vector(int(events[pos]), pos, codes)
        t0 = SPAN_LEN * pos
        k = int(rng.integers(FRAMES_RANGE[0], FRAMES_RANGE[1] + 1))
        for j in range(k):
            t = t0 + (j + 0.5) * SPAN_LEN / k
            frames.append({"t": t, "f": _embed(base, d_v, noise, rng)})
        n_tok = int(rng.integers(TOKENS_RANGE[0], TOKENS_RANGE[1] + 1))
        subs.append({
            "t0": t0, "t1": t0 + SPAN_LEN,
            "tokens": [_embed(base, d_s, noise, rng) for _ in range(n_tok)],
        })
    if rng.random() < ORPHAN_PROB:
        # a trailing frame outside every span exercises the orphan rule
        base = _base_vector(int(events[m - 1]), m - 1, codes)
        frames.append({"t": SPAN_LEN * m + 0.5, "f": _embed(base, d_v, noise, rng)})

    n_clauses = min(int(rng.integers(CLAUSES_RANGE[0], CLAUSES_RANGE[1] + 1)), m)
    picked = np.sort(rng.choice(m, size=n_clauses, replace=False))
    claims = [(int(events[pos]), int(pos)) for pos in picked]
    if label == 0:
        if rng.random() < 0.5 or n_clauses < 2:
            slot = int(rng.integers(n_clauses))
            absent = [e for e in range(N_EVENTS) if e not in events]
            claims[slot] = (int(rng.choice(absent)), claims[slot][1])
        else:
            a, b = rng.choice(n_clauses, size=2, replace=False)
            claims[a], claims[b] = (claims[a][0], claims[b][1]), (claims[b][0], claims[a][1])
    statement = [_embed(_base_vector(e, p, codes), d_h, noise, rng) for e, p in claims]

    return {
        "clip_id": f"clip-{index:06d}",
        "frames": frames,
        "subs": subs,
        "statement": statement,
        "label": label,
    }


def generate_records(seed: int, count: int, dims: tuple[int, int, int] = (32, 32, 32),
                     difficulty: float = 1.0, start_index: int = 0) -> list[dict]:
    """Deterministic record list; `difficulty` scales the feature noise."""
    if min(dims) < BASE_DIM:
        raise ContractError(f"feature widths must be at least {BASE_DIM}, got {dims}")
    if difficulty < 0:
        raise ContractError("difficulty must be nonnegative")
    root = np.random.SeedSequence(seed)
    codes = _pair_codes(np.random.default_rng(root.spawn(1)[0]))
    noise = BASE_NOISE * difficulty
    records = []
    for i in range(count):
        idx = start_index + i
        clip_ss = np.random.SeedSequence(entropy=seed, spawn_key=(1, idx))
        rng = np.random.default_rng(clip_ss)
        records.append(_make_clip(idx, 1 if idx % 2 == 0 else 0, dims, noise, codes, rng))
    return records


def gen_synthetic(seed: int, n_train: int, n_val: int, out_dir: str,
                  dims: tuple[int, int, int] = (32, 32, 32),
                  difficulty: float = 1.0) -> dict:
    """Write train.jsonl and val.jsonl under `out_dir`; returns a summary."""
    header = {"d_v": dims[0], "d_s": dims[1], "d_h": dims[2]}
    train = generate_records(seed, n_train, dims, difficulty, start_index=0)
    val = generate_records(seed, n_val, dims, difficulty, start_index=n_train)
    train_path = f"{out_dir}/train.jsonl"
    val_path = f"{out_dir}/val.jsonl"
    gr.write_dataset(train_path, header, train)
    gr.write_dataset(val_path, header, val)
    return {
        "train_path": train_path, "val_path": val_path,
        "n_train": n_train, "n_val": n_val,
        "dims": list(dims), "difficulty": difficulty, "seed": seed,
    }
