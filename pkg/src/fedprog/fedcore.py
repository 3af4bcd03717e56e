"""In-process federation runtime.

Participants are logical: a coordinating ``server``, an optional
``masking_server`` and users identified by integer ids. Every payload that
crosses a participant boundary is recorded in a :class:`Transcript`, which is
the ground truth for communication cost and for the privacy audit.

One real number counts as one float; serialization overhead is ignored.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

SERVER = "server"
MASKING_SERVER = "masking_server"
UPLOAD = "upload"
DOWNLOAD = "download"


class UserComputeError(RuntimeError):
    """A user's local computation failed; the round is aborted."""

    def __init__(self, user_id: int, cause: BaseException):
        super().__init__(f"user {user_id} failed during local computation: {cause!r}")
        self.user_id = user_id
        self.cause = cause


class AuditFailure(RuntimeError):
    pass


@dataclass
class UserState:
    """Private local store of one user. ``signals`` is ``J_i x L``."""

    user_id: int
    signals: np.ndarray
    ttfs: np.ndarray
    scores: Optional[np.ndarray] = None

    @property
    def n_samples(self) -> int:
        return int(self.signals.shape[0])


@dataclass
class Transfer:
    round: int
    direction: str
    src: str
    dst: str
    label: str
    shape: tuple
    repeat: int = 1
    payload: Any = field(default=None, repr=False, compare=False)

    @property
    def float_count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def total_floats(self) -> int:
        return self.float_count * self.repeat

    @property
    def user(self) -> str:
        return self.dst if self.direction == DOWNLOAD else self.src

    def to_json(self) -> dict:
        return {"round": self.round, "direction": self.direction, "from": self.src,
                "to": self.dst, "label": self.label, "float_count": self.float_count,
                "repeat": self.repeat}


@dataclass
class CostMeter:
    total_upload: int = 0
    total_download: int = 0
    per_user: Dict[str, Dict[str, int]] = field(default_factory=dict)
    rounds: int = 0

    @property
    def total(self) -> int:
        return self.total_upload + self.total_download


def user_name(user_id: int) -> str:
    return f"user{user_id}"


def _shape_of(payload) -> tuple:
    if np.isscalar(payload):
        return ()
    return tuple(np.shape(payload))


class Transcript:
    """Ordered record of every simulated transfer."""

    def __init__(self, meta: Optional[dict] = None):
        self.transfers: List[Transfer] = []
        self.meta: dict = dict(meta or {})
        self.n_rounds = 0

    def __len__(self):
        return len(self.transfers)

    def __iter__(self):
        return iter(self.transfers)

    def record(self, rnd: int, direction: str, src: str, dst: str, label: str, payload=None,
               *, shape: Optional[tuple] = None, repeat: int = 1, keep_payload: bool = True):
        if shape is None:
            shape = _shape_of(payload)
        t = Transfer(rnd, direction, src, dst, label, tuple(int(s) for s in shape), int(repeat),
                     payload if keep_payload else None)
        self.transfers.append(t)
        self.n_rounds = max(self.n_rounds, rnd + repeat)
        return t

    def extend(self, other: "Transcript") -> None:
        """Append ``other`` with its rounds shifted after ours."""
        offset = self.n_rounds
        for t in other.transfers:
            self.transfers.append(Transfer(t.round + offset, t.direction, t.src, t.dst, t.label,
                                           t.shape, t.repeat, t.payload))
        self.n_rounds = offset + other.n_rounds

    def cost_meter(self) -> CostMeter:
        meter = CostMeter(rounds=self.n_rounds)
        per = defaultdict(lambda: {UPLOAD: 0, DOWNLOAD: 0})
        for t in self.transfers:
            n = t.total_floats
            if t.direction == UPLOAD:
                meter.total_upload += n
            else:
                meter.total_download += n
            per[t.user][t.direction] += n
        meter.per_user = {k: dict(v) for k, v in per.items()}
        return meter

    def to_jsonl(self, fh) -> None:
        for t in self.transfers:
            fh.write(json.dumps(t.to_json()) + "\n")

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            self.to_jsonl(fh)


@dataclass
class Message:
    """A download: one payload for everyone, or ``per_user`` payloads by user id."""

    payload: Any = None
    sender: str = SERVER
    per_user: Optional[Mapping[int, Any]] = None

    def for_user(self, user_id: int):
        return self.per_user[user_id] if self.per_user is not None else self.payload


class Federation:
    """Synchronous rounds of download / local compute / upload / aggregate."""

    def __init__(self, users: Iterable[UserState], transcript: Optional[Transcript] = None,
                 keep_payloads: bool = True):
        self.users: Dict[int, UserState] = {}
        for u in users:
            if u.user_id in self.users:
                raise ValueError(f"duplicate user id {u.user_id}")
            self.users[u.user_id] = u
        self.transcript = transcript if transcript is not None else Transcript()
        self.keep_payloads = keep_payloads
        self.round = self.transcript.n_rounds

    @property
    def user_ids(self) -> List[int]:
        return sorted(self.users)

    def run_round(self, broadcast, user_compute: Callable, aggregate: Callable, *,
                  up_label: str = "upload", down_label: str = "broadcast"):
        """Run one round and return ``aggregate([(user_id, upload), ...])``.

        ``broadcast`` is either a bare payload (delivered as-is under
        ``down_label``) or a mapping ``label -> Message``, in which case
        ``user_compute`` receives a dict of payloads. ``user_compute`` may return
        a mapping ``label -> array`` to upload several labelled items. Uploads are
        passed to ``aggregate`` in ascending user id order.
        """
        rnd = self.round
        bare = not isinstance(broadcast, Mapping)
        messages = {down_label: Message(broadcast)} if bare else dict(broadcast)
        for label, msg in messages.items():
            if not isinstance(msg, Message):
                messages[label] = Message(msg)
        uploads = []
        for uid in self.user_ids:
            state = self.users[uid]
            received = {}
            for label, msg in messages.items():
                payload = msg.for_user(uid)
                received[label] = payload
                self.transcript.record(rnd, DOWNLOAD, msg.sender, user_name(uid), label, payload,
                                       keep_payload=self.keep_payloads)
            try:
                out = user_compute(state, received[down_label] if bare else received)
            except Exception as exc:  # noqa: BLE001 - re-raised with the user attached
                raise UserComputeError(uid, exc) from exc
            items = out.items() if isinstance(out, Mapping) else [(up_label, out)]
            for label, payload in items:
                self.transcript.record(rnd, UPLOAD, user_name(uid), SERVER, label, payload,
                                       keep_payload=self.keep_payloads)
            uploads.append((uid, out))
        self.round = rnd + 1
        self.transcript.n_rounds = max(self.transcript.n_rounds, self.round)
        return aggregate(uploads)

    def broadcast_only(self, messages: Mapping[str, Message]) -> None:
        """A download-only round (e.g. final results)."""
        rnd = self.round
        for uid in self.user_ids:
            for label, msg in messages.items():
                self.transcript.record(rnd, DOWNLOAD, msg.sender, user_name(uid), label,
                                       msg.for_user(uid), keep_payload=self.keep_payloads)
        self.round = rnd + 1
        self.transcript.n_rounds = max(self.transcript.n_rounds, self.round)

    def record_repeated(self, n_rounds: int, transfers: Sequence[tuple]) -> None:
        """Record ``n_rounds`` identical rounds compactly.

        ``transfers`` holds ``(direction, src, dst, label, shape)`` tuples; each is
        stored once with ``repeat=n_rounds``.
        """
        if n_rounds <= 0:
            return
        rnd = self.round
        for direction, src, dst, label, shape in transfers:
            self.transcript.record(rnd, direction, src, dst, label, shape=shape, repeat=n_rounds,
                                   keep_payload=False)
        self.round = rnd + n_rounds
        self.transcript.n_rounds = max(self.transcript.n_rounds, self.round)


def sum_aggregate(uploads):
    total = None
    for _, x in uploads:
        total = np.array(x, dtype=float, copy=True) if total is None else total + x
    return total


def stack_aggregate(uploads):
    return np.vstack([x for _, x in uploads])


# --- recoverability -------------------------------------------------------

def is_uniquely_recoverable(g) -> bool:
    """Whether ``S`` is uniquely determined by ``Z = S @ g`` given ``g``.

    True iff ``g`` (m x k) has full row rank ``m``.
    """
    g = np.atleast_2d(np.asarray(g, dtype=float))
    m = g.shape[0]
    if g.shape[1] < m:
        return False
    return int(np.linalg.matrix_rank(g)) == m


def second_preimage(s, g, scale: float = 1.0) -> np.ndarray:
    """Return ``S' != S`` with ``S' @ g == S @ g`` (requires ``g`` not full row rank)."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    g = np.atleast_2d(np.asarray(g, dtype=float))
    if is_uniquely_recoverable(g):
        raise ValueError("g has full row rank; S is uniquely recoverable")
    u, sv, _ = np.linalg.svd(g, full_matrices=True)
    rank = int(np.sum(sv > max(g.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)))
    null = u[:, rank]  # null.T @ g == 0
    out = s.copy()
    out[0] += scale * null
    return out


# --- audit ----------------------------------------------------------------

@dataclass
class AuditReport:
    passed: bool
    violations: List[str]
    n_uploads: int
    n_multiplier_checks: int

    def raise_if_failed(self):
        if not self.passed:
            raise AuditFailure("; ".join(self.violations))


def _expected_upload_shape(label: str, meta: dict, uid: int) -> Optional[tuple]:
    L = meta.get("L")
    m = meta.get("sketch_cols")
    mb = meta.get("basis_cols")
    J = meta.get("J", {}).get(uid)
    p = meta.get("n_params")
    table = {
        "W_i": (L, m),
        "Y_i": (J, m),
        "B~_i": (mb, L),
        "a~_i": (mb,),
        "grad_i": (p,),
    }
    return table.get(label)


SANCTIONED_UPLOADS = ("W_i", "Y_i", "B~_i", "a~_i", "grad_i")


def audit_transcript(transcript: Transcript) -> AuditReport:
    """Check every upload against the sanctioned protocol messages.

    Uploads must carry one of the labels in :data:`SANCTIONED_UPLOADS` with the
    shape implied by ``transcript.meta`` (``L``, ``sketch_cols``,
    ``basis_cols``, ``J`` per user, ``n_params``). For sketch uploads
    (``W_i``, ``Y_i``) the random multiplier last downloaded by that user must
    not admit unique recovery. The masking matrix must never reach the server.
    """
    meta = transcript.meta
    violations = []
    last_w: Dict[str, Any] = {}
    n_up = n_checks = 0
    for t in transcript.transfers:
        if t.direction == DOWNLOAD:
            if t.label == "W":
                last_w[t.dst] = t.payload
            continue
        n_up += 1
        where = f"round {t.round} {t.src}->{t.dst} '{t.label}' {t.shape}"
        if t.label not in SANCTIONED_UPLOADS:
            violations.append(f"unsanctioned upload: {where}")
            continue
        uid = int(t.src[len("user"):]) if t.src.startswith("user") else None
        expected = _expected_upload_shape(t.label, meta, uid)
        if expected is None or any(e is None for e in expected) or tuple(expected) != t.shape:
            violations.append(f"unexpected shape (wanted {expected}): {where}")
            continue
        if t.label in ("W_i", "Y_i"):
            w = last_w.get(t.src)
            if w is None:
                violations.append(f"sketch upload without a recorded multiplier: {where}")
                continue
            n_checks += 1
            if is_uniquely_recoverable(w):
                violations.append(f"multiplier W has full row rank, data recoverable: {where}")
    for t in transcript.transfers:
        if t.label == "P" and (t.src != MASKING_SERVER or t.dst == SERVER):
            violations.append(f"masking matrix {t.src}->{t.dst} (round {t.round})")
    return AuditReport(not violations, violations, n_up, n_checks)
