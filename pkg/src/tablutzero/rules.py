"""Tablut rules on a 9x9 board.

Squares are indexed row-major, ``index = row * 9 + col``.  Row 0 is printed
at the top and is "north"; files a..i are columns 0..8 and ranks run 9..1
from top to bottom, so the throne (index 40) is ``e5``.

Occupancy is stored as Python ints used as 81-bit sets.  ``GameState`` is
treated as an immutable value: ``apply_move`` always returns a new state.
"""

from __future__ import annotations

import enum
import random
from typing import Iterable, NamedTuple, Optional

SIZE = 9
NUM_SQUARES = SIZE * SIZE
THRONE = 40
CORNERS = (0, 8, 72, 80)
CORNER_MASK = sum(1 << c for c in CORNERS)
RESTRICTED_MASK = CORNER_MASK | (1 << THRONE)

HALFMOVE_LIMIT = 100
MAX_PLY = 512
REPETITION_LIMIT = 3

# N, E, S, W; north is decreasing row.
DIRECTIONS = ((-1, 0), (0, 1), (1, 0), (0, -1))
FILES = "abcdefghi"


class IllegalMoveError(ValueError):
    pass


class TerminalStateError(ValueError):
    pass


class Side(enum.IntEnum):
    ATTACKER = 0
    DEFENDER = 1

    @property
    def opponent(self) -> "Side":
        return Side(1 - self)


class Result(enum.Enum):
    ATTACKER_WIN = "attacker_win"
    DEFENDER_WIN = "defender_win"
    DRAW = "draw"


class Reason(enum.Enum):
    KING_CAPTURED = "king_captured"
    KING_ESCAPED = "king_escaped"
    NO_MOVES = "no_moves"
    THIRD_REPETITION = "third_repetition"
    HALFMOVE_DRAW = "halfmove_draw"
    MAX_PLY_DRAW = "max_ply_draw"


class Outcome(NamedTuple):
    result: Result
    reason: Reason

    @property
    def winner(self) -> Optional[Side]:
        if self.result is Result.ATTACKER_WIN:
            return Side.ATTACKER
        if self.result is Result.DEFENDER_WIN:
            return Side.DEFENDER
        return None


def _win_for(side: Side, reason: Reason) -> Outcome:
    return Outcome(Result.ATTACKER_WIN if side is Side.ATTACKER else Result.DEFENDER_WIN, reason)


class Move(NamedTuple):
    src: int
    dst: int

    def __str__(self) -> str:
        return f"{square_name(self.src)}-{square_name(self.dst)}"


class Board(NamedTuple):
    attackers: int
    defenders: int  # taflmen only, the king is tracked separately
    king: int  # square index, -1 once captured

    def piece_count(self) -> int:
        return bin(self.attackers).count("1") + bin(self.defenders).count("1") + (self.king >= 0)


def _build_tables():
    rays = []
    neighbors = []
    for sq in range(NUM_SQUARES):
        r, c = divmod(sq, SIZE)
        sq_rays = []
        sq_nb = []
        for dr, dc in DIRECTIONS:
            ray = []
            rr, cc = r + dr, c + dc
            while 0 <= rr < SIZE and 0 <= cc < SIZE:
                ray.append(rr * SIZE + cc)
                rr += dr
                cc += dc
            sq_rays.append(tuple(ray))
            sq_nb.append(ray[0] if ray else -1)
        rays.append(tuple(sq_rays))
        neighbors.append(tuple(sq_nb))
    return tuple(rays), tuple(neighbors)


RAYS, NEIGHBORS = _build_tables()

# Zobrist constants: random.Random(ZOBRIST_SEED).getrandbits(64), drawn in the
# order attackers[0..80], defenders[0..80], king[0..80], side-to-move.
ZOBRIST_SEED = 0x7AB1_0709
_zrng = random.Random(ZOBRIST_SEED)
Z_ATTACKER = tuple(_zrng.getrandbits(64) for _ in range(NUM_SQUARES))
Z_DEFENDER = tuple(_zrng.getrandbits(64) for _ in range(NUM_SQUARES))
Z_KING = tuple(_zrng.getrandbits(64) for _ in range(NUM_SQUARES))
Z_DEFENDER_TO_MOVE = _zrng.getrandbits(64)
del _zrng


def squares_of(bb: int) -> list[int]:
    out = []
    while bb:
        low = bb & -bb
        out.append(low.bit_length() - 1)
        bb ^= low
    return out


def mask_of(squares: Iterable[int]) -> int:
    m = 0
    for sq in squares:
        m |= 1 << sq
    return m


def board_key(board: Board, to_move: Side) -> int:
    key = Z_DEFENDER_TO_MOVE if to_move is Side.DEFENDER else 0
    for sq in squares_of(board.attackers):
        key ^= Z_ATTACKER[sq]
    for sq in squares_of(board.defenders):
        key ^= Z_DEFENDER[sq]
    if board.king >= 0:
        key ^= Z_KING[board.king]
    return key


class GameState:
    """A Tablut position plus the clocks and repetition table.

    The repetition table only holds positions seen since the last capture:
    a capture changes the piece count, so older positions can never recur.
    """

    __slots__ = ("board", "to_move", "ply", "halfmove_clock", "repetitions", "key", "outcome", "_moves")

    def __init__(self, board, to_move, ply, halfmove_clock, repetitions, key, outcome=None):
        self.board = board
        self.to_move = to_move
        self.ply = ply
        self.halfmove_clock = halfmove_clock
        self.repetitions = repetitions
        self.key = key
        self.outcome = outcome
        self._moves = None

    @classmethod
    def from_board(cls, board: Board, to_move: Side = Side.ATTACKER, ply: int = 0,
                   halfmove_clock: int = 0) -> "GameState":
        """Build a fresh state around an arbitrary board (the position counts once)."""
        _check_board(board)
        key = board_key(board, to_move)
        return cls(board, to_move, ply, halfmove_clock, {key: 1}, key)

    @property
    def repetition_count(self) -> int:
        return self.repetitions.get(self.key, 0)

    @property
    def is_terminal(self) -> bool:
        return self.outcome is not None

    def __eq__(self, other):
        if not isinstance(other, GameState):
            return NotImplemented
        return (self.board == other.board and self.to_move == other.to_move and self.ply == other.ply
                and self.halfmove_clock == other.halfmove_clock and self.repetitions == other.repetitions
                and self.outcome == other.outcome)

    def __hash__(self):
        return hash((self.key, self.ply, self.halfmove_clock))

    def __repr__(self):
        return f"GameState(ply={self.ply}, to_move={self.to_move.name}, outcome={self.outcome})"


def _check_board(board: Board) -> None:
    a, d, k = board
    if a & d or (k >= 0 and ((a | d) >> k) & 1):
        raise ValueError("occupancy sets overlap")
    if (a | d) & RESTRICTED_MASK:
        raise ValueError("a taflman rests on the throne or a corner")
    if (a | d) >> NUM_SQUARES:
        raise ValueError("square out of range")


INITIAL_ATTACKERS = (3, 4, 5, 13, 27, 36, 45, 37, 35, 44, 53, 43, 75, 76, 77, 67)
INITIAL_DEFENDERS = (22, 31, 49, 58, 38, 39, 41, 42)


def initial_state() -> GameState:
    board = Board(mask_of(INITIAL_ATTACKERS), mask_of(INITIAL_DEFENDERS), THRONE)
    return GameState.from_board(board, Side.ATTACKER)


def is_hostile(sq: int, victim_side: Side, board: Board) -> bool:
    if (CORNER_MASK >> sq) & 1:
        return True
    if sq == THRONE:
        return victim_side is Side.ATTACKER or board.king != THRONE
    return False


def _generate(board: Board, side: Side, first_only: bool = False) -> list[Move]:
    a, d, king = board
    occ = a | d
    if king >= 0:
        occ |= 1 << king
    if side is Side.ATTACKER:
        sources = squares_of(a)
    else:
        sources = squares_of(d)
        if king >= 0:
            sources.append(king)
    moves = []
    for src in sources:
        is_king = src == king
        for ray in RAYS[src]:
            for t in ray:
                if (occ >> t) & 1:
                    break
                if not is_king and (RESTRICTED_MASK >> t) & 1:
                    continue
                moves.append(Move(src, t))
                if first_only:
                    return moves
    return moves


def legal_moves(s: GameState) -> list[Move]:
    if s.outcome is not None:
        raise TerminalStateError("legal_moves called on a terminal state")
    if s._moves is None:
        moves = _generate(s.board, s.to_move)
        moves.sort()
        s._moves = moves
    return list(s._moves)


def has_legal_move(board: Board, side: Side) -> bool:
    return bool(_generate(board, side, first_only=True))


def is_legal(s: GameState, m: Move) -> bool:
    if s.outcome is not None:
        return False
    src, dst = m
    if not (0 <= src < NUM_SQUARES and 0 <= dst < NUM_SQUARES) or src == dst:
        return False
    a, d, king = s.board
    is_king = src == king
    if s.to_move is Side.ATTACKER:
        if not (a >> src) & 1:
            return False
    elif not (is_king or (d >> src) & 1):
        return False
    if not is_king and (RESTRICTED_MASK >> dst) & 1:
        return False
    occ = a | d | ((1 << king) if king >= 0 else 0)
    for ray in RAYS[src]:
        if dst in ray:
            for t in ray:
                if (occ >> t) & 1:
                    return False
                if t == dst:
                    return True
    return False


def _resolve_captures(board: Board, mover: Side, to: int) -> tuple[Board, list[int]]:
    a, d, king = board
    captured = []
    for direction in range(4):
        n = NEIGHBORS[to][direction]
        if n < 0:
            continue
        far = NEIGHBORS[n][direction]
        if far < 0:
            continue
        if mover is Side.ATTACKER:
            if not ((d >> n) & 1 or n == king):
                continue
            if (a >> far) & 1 or is_hostile(far, Side.DEFENDER, board):
                captured.append(n)
        else:
            if not (a >> n) & 1:
                continue
            if (d >> far) & 1 or far == king or is_hostile(far, Side.ATTACKER, board):
                captured.append(n)
    # all captures are resolved against the pre-capture board, then removed together
    for n in captured:
        if n == king:
            king = -1
        elif mover is Side.ATTACKER:
            d &= ~(1 << n)
        else:
            a &= ~(1 << n)
    return Board(a, d, king), captured


def apply_move(s: GameState, m: Move) -> GameState:
    if s.outcome is not None:
        raise TerminalStateError("apply_move called on a terminal state")
    if not is_legal(s, m):
        raise IllegalMoveError(f"illegal move {m} for {s.to_move.name}")
    src, dst = m
    a, d, king = s.board
    mover = s.to_move
    key = s.key ^ Z_DEFENDER_TO_MOVE
    if mover is Side.ATTACKER:
        a = (a & ~(1 << src)) | (1 << dst)
        key ^= Z_ATTACKER[src] ^ Z_ATTACKER[dst]
    elif src == king:
        king = dst
        key ^= Z_KING[src] ^ Z_KING[dst]
    else:
        d = (d & ~(1 << src)) | (1 << dst)
        key ^= Z_DEFENDER[src] ^ Z_DEFENDER[dst]

    board, captured = _resolve_captures(Board(a, d, king), mover, dst)
    for n in captured:
        if mover is Side.ATTACKER:
            key ^= Z_KING[n] if n == king else Z_DEFENDER[n]
        else:
            key ^= Z_ATTACKER[n]

    to_move = mover.opponent
    ply = s.ply + 1
    if captured:
        halfmove = 0
        repetitions = {key: 1}
    else:
        halfmove = s.halfmove_clock + 1
        repetitions = dict(s.repetitions)
        repetitions[key] = repetitions.get(key, 0) + 1

    outcome = None
    if board.king < 0:
        outcome = Outcome(Result.ATTACKER_WIN, Reason.KING_CAPTURED)
    elif (CORNER_MASK >> board.king) & 1:
        outcome = Outcome(Result.DEFENDER_WIN, Reason.KING_ESCAPED)
    elif repetitions[key] >= REPETITION_LIMIT:
        outcome = _win_for(to_move, Reason.THIRD_REPETITION)
    elif halfmove >= HALFMOVE_LIMIT:
        outcome = Outcome(Result.DRAW, Reason.HALFMOVE_DRAW)
    elif ply >= MAX_PLY:
        outcome = Outcome(Result.DRAW, Reason.MAX_PLY_DRAW)
    elif not has_legal_move(board, to_move):
        outcome = _win_for(mover, Reason.NO_MOVES)
    return GameState(board, to_move, ply, halfmove, repetitions, key, outcome)


def outcome(s: GameState) -> Optional[Outcome]:
    return s.outcome


def position_key(s: GameState) -> int:
    return s.key


def perft(s: GameState, depth: int) -> int:
    if depth == 0 or s.outcome is not None:
        return 1
    moves = legal_moves(s)
    if depth == 1:
        return len(moves)
    return sum(perft(apply_move(s, m), depth - 1) for m in moves)


# ---------------------------------------------------------------------------
# notation, rendering and records

def square_name(sq: int) -> str:
    r, c = divmod(sq, SIZE)
    return f"{FILES[c]}{SIZE - r}"


def parse_square(text: str) -> int:
    text = text.strip().lower()
    if len(text) < 2 or text[0] not in FILES or not text[1:].isdigit():
        raise ValueError(f"bad square {text!r}")
    rank = int(text[1:])
    if not 1 <= rank <= SIZE:
        raise ValueError(f"bad square {text!r}")
    return (SIZE - rank) * SIZE + FILES.index(text[0])


def parse_move(text: str) -> Move:
    parts = text.replace(" ", "").split("-")
    if len(parts) != 2:
        raise ValueError(f"bad move {text!r}, expected e.g. e3-e5")
    return Move(parse_square(parts[0]), parse_square(parts[1]))


def render(board: Board | GameState) -> str:
    if isinstance(board, GameState):
        board = board.board
    a, d, king = board
    lines = []
    for r in range(SIZE):
        row = []
        for c in range(SIZE):
            sq = r * SIZE + c
            if (a >> sq) & 1:
                ch = "A"
            elif (d >> sq) & 1:
                ch = "D"
            elif sq == king:
                ch = "K"
            elif sq == THRONE:
                ch = "×"
            elif (CORNER_MASK >> sq) & 1:
                ch = "⊕"
            else:
                ch = "·"
            row.append(ch)
        lines.append(f"{SIZE - r} " + " ".join(row))
    lines.append("  " + " ".join(FILES))
    return "\n".join(lines)


def board_from_text(text: str) -> Board:
    """Parse a 9-line diagram of A/D/K and any filler character."""
    rows = [line.split() if " " in line.strip() else list(line.strip())
            for line in text.strip().splitlines()]
    if len(rows) != SIZE or any(len(r) != SIZE for r in rows):
        raise ValueError("diagram must be 9 rows of 9 cells")
    a = d = 0
    king = -1
    for r, row in enumerate(rows):
        for c, ch in enumerate(row):
            sq = r * SIZE + c
            if ch == "A":
                a |= 1 << sq
            elif ch == "D":
                d |= 1 << sq
            elif ch == "K":
                king = sq
    return Board(a, d, king)


def game_record(moves: list[Move], final: GameState) -> dict:
    out = final.outcome
    return {
        "moves": [[m.src, m.dst] for m in moves],
        "outcome": out.result.value if out else None,
        "reason": out.reason.value if out else None,
        "ply_count": final.ply,
        "final_piece_count": final.board.piece_count(),
    }
