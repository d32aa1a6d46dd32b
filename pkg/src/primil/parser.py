"""Segment demonstrations into primitive sequences.

:func:`parse_dp` finds the segmentation maximizing the product of segment
probabilities (a sum in log space)::

    log f(i) = max_{p, t < i} log f(t) + log alpha(p) + score(p | s_t, s_i)

with ``alpha(p) = alpha`` for Other and 1 for library primitives. Ties in the
total score are broken by (fewer segments, earlier boundaries, lower class
index), compared lexicographically; :func:`tiebreak_key` is the single
definition of that order and is shared with the exhaustive oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .collector import featurize_many
from .idm import IdmModels, idm_score
from .primitives import CLASSES, LIBRARY, N_CLASSES, PrimitiveType, execute_primitive
from .records import read_records, write_records
from .world import task_success

MIN_SEGMENT = 2
DEFAULT_ALPHA = 1e-4


class EmptyDemo(ValueError):
    pass


class TooLarge(ValueError):
    pass


@dataclass
class ParsedSegment:
    t_start: int
    t_end: int
    p: PrimitiveType
    x: np.ndarray | None
    log_score: float

    def __post_init__(self):
        self.p = PrimitiveType(self.p)
        if (self.p == PrimitiveType.OTHER) != (self.x is None):
            raise ValueError("x must be None exactly for OTHER segments")

    @property
    def length(self) -> int:
        return self.t_end - self.t_start


@dataclass
class ParsedSequence:
    demo_id: str
    segments: list = field(default_factory=list)
    total_log_score: float = 0.0

    def __len__(self):
        return len(self.segments)

    @property
    def types(self) -> list:
        return [s.p for s in self.segments]

    @property
    def boundaries(self) -> list:
        return [self.segments[0].t_start] + [s.t_end for s in self.segments] if self.segments else []

    def key(self):
        return tiebreak_key([(s.t_start, s.t_end, int(s.p)) for s in self.segments])

    def check(self, T: int | None = None):
        segs = self.segments
        assert segs, "empty parse"
        assert segs[0].t_start == 0
        if T is not None:
            assert segs[-1].t_end == T
        for a, b in zip(segs, segs[1:]):
            assert a.t_end == b.t_start
        for s in segs:
            assert s.t_start < s.t_end
        assert abs(sum(s.log_score for s in segs) - self.total_log_score) <= 1e-9


def tiebreak_key(segments) -> tuple:
    """Sort key among equal-score segmentations; smaller wins.

    ``segments`` is a sequence of ``(t_start, t_end, class_id)``.
    """
    return (len(segments), tuple(e for _, e, _ in segments), tuple(c for _, _, c in segments))


def log_alpha_vector(alpha: float) -> np.ndarray:
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    la = np.zeros(N_CLASSES)
    la[int(PrimitiveType.OTHER)] = math.log(alpha)
    return la


def candidate_boundaries(T: int, stride: int = 1) -> list:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    b = list(range(0, T, stride))
    if b[-1] != T:
        b.append(T)
    return b


# ------------------------------------------------------------------ scorers


class IdmScorer:
    """Scores (s_t, s_i) pairs of one demonstration with a trained IDM."""

    def __init__(self, models: IdmModels, states, beta: float = 0.0):
        self.models = models
        self.beta = beta
        self.F = featurize_many(states) if not isinstance(states, np.ndarray) else states
        self.calls = 0
        self._param_cache = {}

    @property
    def T(self):
        return len(self.F) - 1

    def log_scores(self, starts, end: int) -> np.ndarray:
        starts = np.asarray(starts, int)
        self.calls += len(starts) * N_CLASSES
        ends = np.broadcast_to(self.F[end], (len(starts), self.F.shape[1]))
        return idm_score(self.models, self.F[starts], ends, self.beta, with_params=self.beta != 0.0).log_score

    def params(self, t: int, i: int, p):
        p = PrimitiveType(p)
        if p == PrimitiveType.OTHER:
            return None
        sc = idm_score(self.models, self.F[t][None], self.F[i][None], self.beta)
        return sc.x_star[p][0] if p in sc.x_star else None


@dataclass
class OracleScoreTable:
    """Hand-built stand-in for the IDM: ``table[a, b, c]`` scores the segment
    from boundary ``a`` to boundary ``b`` as class ``c`` (indices into
    ``boundaries``)."""

    boundaries: list
    table: np.ndarray
    calls: int = 0

    def __post_init__(self):
        self.table = np.asarray(self.table, float)
        n = len(self.boundaries)
        if self.table.shape != (n, n, N_CLASSES):
            raise ValueError(f"table must have shape {(n, n, N_CLASSES)}")
        self._pos = {b: k for k, b in enumerate(self.boundaries)}

    @property
    def T(self):
        return self.boundaries[-1]

    @classmethod
    def random(cls, n_boundaries: int, rng, gap: int = 1, low: float = -6.0) -> "OracleScoreTable":
        b = [k * gap for k in range(n_boundaries)]
        return cls(b, rng.uniform(low, 0.0, size=(n_boundaries, n_boundaries, N_CLASSES)))

    def log_scores(self, starts, end: int) -> np.ndarray:
        starts = list(starts)
        self.calls += len(starts) * N_CLASSES
        return self.table[[self._pos[s] for s in starts], self._pos[end]]

    def params(self, t: int, i: int, p):
        if PrimitiveType(p) == PrimitiveType.OTHER:
            return None
        return np.array([float(t), float(i)])


def _setup(demo, models, stride, beta):
    if isinstance(models, OracleScoreTable):
        scorer = models
        T = scorer.T
        bounds = list(scorer.boundaries)
        demo_id = getattr(demo, "seed", "oracle")
    else:
        if demo is None or len(demo) < 1:
            raise EmptyDemo("demonstration has no transitions")
        T = len(demo)
        scorer = IdmScorer(models, demo.states, beta)
        bounds = candidate_boundaries(T, stride)
        demo_id = f"{demo.task}:{demo.seed}"
    if T < 1:
        raise EmptyDemo("demonstration has no transitions")
    return scorer, T, bounds, str(demo_id)


def _traceback(back, b_last):
    out = []
    b = b_last
    while back[b] is not None:
        a, c, sc = back[b]
        out.append((a, b, c, sc))
        b = a
    return out[::-1]


def _dp_core(bounds, scorer, log_alpha, min_len):
    n = len(bounds)
    best = np.full(n, -np.inf)
    best[0] = 0.0
    nseg = np.zeros(n, int)
    back = [None] * n

    def path_key(b_idx, extra):
        segs = [(bounds[a], bounds[b], c) for a, b, c, _ in _traceback(back, b_idx)]
        return tiebreak_key(segs + [extra])

    for b in range(1, n):
        i = bounds[b]
        prev = [a for a in range(b) if i - bounds[a] >= min_len and np.isfinite(best[a])]
        if not prev:
            continue
        S = scorer.log_scores([bounds[a] for a in prev], i) + log_alpha
        tot = best[prev][:, None] + S
        m = np.max(tot)
        if m == -np.inf:
            continue
        rows, cols = np.nonzero(tot == m)
        if len(rows) == 1:
            r, c = rows[0], cols[0]
        else:
            keyed = [(path_key(prev[r], (bounds[prev[r]], i, int(c))), r, c) for r, c in zip(rows, cols)]
            _, r, c = min(keyed, key=lambda t: t[0])
        a = prev[r]
        best[b] = m
        nseg[b] = nseg[a] + 1
        back[b] = (a, int(c), float(S[r, c]))
    return best, back


def _assemble(demo_id, bounds, scorer, trace):
    segs = []
    total = 0.0
    for a, b, c, sc in trace:
        t, i = bounds[a], bounds[b]
        segs.append(ParsedSegment(t, i, PrimitiveType(c), scorer.params(t, i, c), sc))
        total += sc
    return ParsedSequence(demo_id, segs, total)


def parse_dp(demo, models, alpha: float = DEFAULT_ALPHA, stride: int = 1, beta: float = 0.0,
             min_len: int = MIN_SEGMENT) -> ParsedSequence:
    """Optimal segmentation of ``demo`` under ``models``.

    ``models`` is an :class:`~primil.idm.IdmModels` (``demo`` is then a
    :class:`~primil.demos.Demonstration`) or an :class:`OracleScoreTable`,
    whose own boundaries replace the stride grid.
    """
    log_alpha = log_alpha_vector(alpha)
    scorer, T, bounds, demo_id = _setup(demo, models, stride, beta)
    min_len = min(min_len, T)
    best, back = _dp_core(bounds, scorer, log_alpha, min_len)
    trace = _traceback(back, len(bounds) - 1)
    return _assemble(demo_id, bounds, scorer, trace)


def parse_greedy(demo, models, alpha: float = DEFAULT_ALPHA, stride: int = 1, beta: float = 0.0,
                 min_len: int = MIN_SEGMENT) -> ParsedSequence:
    """Repeatedly take the single best-scoring next segment from the current boundary.

    On equal scores the farther boundary wins, then the lower class index.
    """
    log_alpha = log_alpha_vector(alpha)
    scorer, T, bounds, demo_id = _setup(demo, models, stride, beta)
    min_len = min(min_len, T)
    n = len(bounds)
    a = 0
    trace = []
    while a < n - 1:
        t = bounds[a]
        nxt = [b for b in range(a + 1, n)
               if bounds[b] - t >= min_len and (b == n - 1 or T - bounds[b] >= min_len)]
        rows = np.stack([scorer.log_scores([t], bounds[b])[0] for b in nxt]) + log_alpha
        m = np.max(rows)
        cand = [(-nxt[r], c) for r, c in zip(*np.nonzero(rows == m))]
        nb, c = min(cand)
        b = -nb
        trace.append((a, b, int(c), float(rows[nxt.index(b), c])))
        a = b
    return _assemble(demo_id, bounds, scorer, trace)


def parse_bruteforce(demo, models, alpha: float = DEFAULT_ALPHA, stride: int = 1, beta: float = 0.0,
                     min_len: int = MIN_SEGMENT) -> ParsedSequence:
    """Exhaustive search over every segmentation (oracle for :func:`parse_dp`)."""
    from .verify import MAX_ENUM_BOUNDARIES, enumerate_segmentations

    log_alpha = log_alpha_vector(alpha)
    scorer, T, bounds, demo_id = _setup(demo, models, stride, beta)
    if len(bounds) > MAX_ENUM_BOUNDARIES:
        raise TooLarge(f"{len(bounds)} candidate boundaries exceed the enumeration bound {MAX_ENUM_BOUNDARIES}")
    min_len = min(min_len, T)
    n = len(bounds)
    pair = {}
    for b in range(1, n):
        starts = list(range(b))
        S = scorer.log_scores([bounds[a] for a in starts], bounds[b]) + log_alpha
        for a in starts:
            pair[a, b] = S[a]
    best = None
    for cut in enumerate_segmentations(n):
        if any(bounds[b] - bounds[a] < min_len for a, b in zip(cut, cut[1:])):
            continue
        total = 0.0
        trace = []
        for a, b in zip(cut, cut[1:]):
            row = pair[a, b]
            c = int(np.argmax(row))  # first maximum = lowest class index
            total += float(row[c])
            trace.append((a, b, c, float(row[c])))
        key = tiebreak_key([(bounds[a], bounds[b], c) for a, b, c, _ in trace])
        if best is None or total > best[0] or (total == best[0] and key < best[1]):
            best = (total, key, trace)
    return _assemble(demo_id, bounds, scorer, best[2])


# ------------------------------------------------------------------ replay


@dataclass
class ReplayResult:
    success: bool
    executed: int
    aborted_on_other: bool
    final_state: object = None


def replay(parsed: ParsedSequence, demo, task=None) -> ReplayResult:
    """Execute the parsed primitives from the demonstration's initial state."""
    s = demo.initial_state
    executed = 0
    for seg in parsed.segments:
        if seg.p == PrimitiveType.OTHER:
            return ReplayResult(False, executed, True, s)
        s = execute_primitive(s, seg.p, seg.x).final_state
        executed += 1
    return ReplayResult(task_success(s, task), executed, False, s)


# ------------------------------------------------------------------ file format


def save_parsed(seqs, path):
    recs = [
        {"demo_id": q.demo_id, "total_log_score": q.total_log_score,
         "segments": [{"t_start": s.t_start, "t_end": s.t_end, "p": s.p.name,
                       "x": None if s.x is None else [float(v) for v in s.x], "log_score": s.log_score}
                      for s in q.segments]}
        for q in seqs
    ]
    return write_records(path, "parsed", recs)


def load_parsed(path) -> list:
    _, recs = read_records(path, kind="parsed")
    return [
        ParsedSequence(r["demo_id"], [
            ParsedSegment(s["t_start"], s["t_end"], PrimitiveType[s["p"]],
                          None if s["x"] is None else np.array(s["x"]), s["log_score"])
            for s in r["segments"]], r["total_log_score"])
        for r in recs
    ]
