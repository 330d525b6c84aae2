"""State and action encodings for the network.

Plane layout of the 9x9x43 input (channels last):

    step t in 0..7 (0 = current position), base = 5 * t
      base + 0  taflmen of the side to move at the CURRENT step
      base + 1  taflmen of the other side
      base + 2  king
      base + 3  all ones if that position had been seen before (count >= 2)
      base + 4  all ones if that position had been seen twice (count >= 3)
    40  all ones when the attacker is to move
    41  min(ply / 512, 1)
    42  min(halfmove_clock / 100, 1)

Actions: ``index = from_square * 32 + direction * 8 + (distance - 1)`` with
directions N, E, S, W (N = decreasing row).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .rules import (
    HALFMOVE_LIMIT, MAX_PLY, NUM_SQUARES, SIZE, GameState, Move, Side, TerminalStateError, legal_moves,
)

HISTORY = 8
PLANES_PER_STEP = 5
NUM_PLANES = HISTORY * PLANES_PER_STEP + 3
COLOR_PLANE = 40
PLY_PLANE = 41
HALFMOVE_PLANE = 42
NUM_ACTIONS = NUM_SQUARES * 32

_DR = (-1, 0, 1, 0)
_DC = (0, 1, 0, -1)


class InvalidActionError(ValueError):
    pass


def _build_action_targets() -> np.ndarray:
    targets = np.full(NUM_ACTIONS, -1, dtype=np.int64)
    for a in range(NUM_ACTIONS):
        src, rest = divmod(a, 32)
        direction, dist = divmod(rest, 8)
        r, c = divmod(src, SIZE)
        r += _DR[direction] * (dist + 1)
        c += _DC[direction] * (dist + 1)
        if 0 <= r < SIZE and 0 <= c < SIZE:
            targets[a] = r * SIZE + c
    return targets


ACTION_TARGET = _build_action_targets()
VALID_ACTIONS = np.flatnonzero(ACTION_TARGET >= 0)


def move_to_action(m: Move) -> int:
    src, dst = m
    r0, c0 = divmod(src, SIZE)
    r1, c1 = divmod(dst, SIZE)
    if r0 == r1 and c0 != c1:
        direction, dist = (1, c1 - c0) if c1 > c0 else (3, c0 - c1)
    elif c0 == c1 and r0 != r1:
        direction, dist = (2, r1 - r0) if r1 > r0 else (0, r0 - r1)
    else:
        raise InvalidActionError(f"{m} is not a rook move")
    return src * 32 + direction * 8 + dist - 1


def action_to_move(a: int) -> Move:
    if not 0 <= a < NUM_ACTIONS:
        raise InvalidActionError(f"action {a} out of range")
    dst = ACTION_TARGET[a]
    if dst < 0:
        raise InvalidActionError(f"action {a} leaves the board")
    return Move(a // 32, int(dst))


def legal_actions(s: GameState) -> np.ndarray:
    """Sorted action indices of the legal moves."""
    moves = legal_moves(s)
    out = np.fromiter((move_to_action(m) for m in moves), dtype=np.int64, count=len(moves))
    out.sort()
    return out


def legal_action_mask(s: GameState) -> np.ndarray:
    if s.outcome is not None:
        raise TerminalStateError("no action mask for a terminal state")
    mask = np.zeros(NUM_ACTIONS, dtype=bool)
    mask[legal_actions(s)] = True
    return mask


def _bits(bb: int) -> np.ndarray:
    raw = np.frombuffer(bb.to_bytes(11, "little"), dtype=np.uint8)
    return np.unpackbits(raw, bitorder="little")[:NUM_SQUARES]


def encode_state(history: Sequence[GameState], out: np.ndarray | None = None) -> np.ndarray:
    """Encode up to 8 states, most recent first, into a 9x9x43 float32 array."""
    if not history:
        raise ValueError("history window is empty")
    if out is None:
        out = np.zeros((SIZE, SIZE, NUM_PLANES), dtype=np.float32)
    else:
        out[...] = 0.0
    cur = history[0]
    flat = out.reshape(NUM_SQUARES, NUM_PLANES)
    attacker_to_move = cur.to_move is Side.ATTACKER
    for t, s in enumerate(history[:HISTORY]):
        base = PLANES_PER_STEP * t
        a, d, king = s.board
        friendly, enemy = (a, d) if attacker_to_move else (d, a)
        flat[:, base] = _bits(friendly)
        flat[:, base + 1] = _bits(enemy)
        if king >= 0:
            flat[king, base + 2] = 1.0
        count = s.repetitions.get(s.key, 1)
        if count >= 2:
            flat[:, base + 3] = 1.0
        if count >= 3:
            flat[:, base + 4] = 1.0
    if attacker_to_move:
        flat[:, COLOR_PLANE] = 1.0
    flat[:, PLY_PLANE] = min(cur.ply / MAX_PLY, 1.0)
    flat[:, HALFMOVE_PLANE] = min(cur.halfmove_clock / HALFMOVE_LIMIT, 1.0)
    return out


def encode_batch(histories: Sequence[Sequence[GameState]]) -> np.ndarray:
    out = np.zeros((len(histories), SIZE, SIZE, NUM_PLANES), dtype=np.float32)
    for i, h in enumerate(histories):
        encode_state(h, out[i])
    return out


# -- C4 rotations (counterclockwise quarter turns) ---------------------------

def _build_rotations():
    square_rot = np.zeros((4, NUM_SQUARES), dtype=np.int64)
    for sq in range(NUM_SQUARES):
        r, c = divmod(sq, SIZE)
        square_rot[0, sq] = sq
        for k in range(1, 4):
            r, c = SIZE - 1 - c, r
            square_rot[k, sq] = r * SIZE + c
    action_rot = np.zeros((4, NUM_ACTIONS), dtype=np.int64)
    for a in range(NUM_ACTIONS):
        src, rest = divmod(a, 32)
        direction, dist = divmod(rest, 8)
        for k in range(4):
            action_rot[k, a] = square_rot[k, src] * 32 + ((direction + 3 * k) % 4) * 8 + dist
    return square_rot, action_rot


SQUARE_ROT, ACTION_ROT = _build_rotations()


def rotate_square(sq: int, k: int) -> int:
    return int(SQUARE_ROT[k % 4, sq])


def rotate_action(a: int, k: int) -> int:
    return int(ACTION_ROT[k % 4, a])


def rotate_planes(p: np.ndarray, k: int) -> np.ndarray:
    """Rotate a (..., 9, 9, C) stack; scalar planes are constant so they are unaffected."""
    return np.rot90(p, k % 4, axes=(-3, -2))


def rotate_policy(v: np.ndarray, k: int) -> np.ndarray:
    """Permute a (..., 2592) vector so that entry a moves to rotate_action(a, k)."""
    k %= 4
    if k == 0:
        return v.copy()
    out = np.empty_like(v)
    out[..., ACTION_ROT[k]] = v
    return out
