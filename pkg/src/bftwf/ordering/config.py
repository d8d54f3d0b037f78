from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass, field


class InvalidConfig(ValueError):
    pass


def max_faults(n: int) -> int:
    return (n - 1) // 3


def reply_quorum(f: int) -> int:
    return 2 * f + 1


def prepare_quorum(f: int) -> int:
    """Matching prepares/commits a replica needs from others."""
    return 2 * f


@dataclass(frozen=True)
class ViewConfig:
    viewNumber: int
    members: tuple[int, ...]
    f: int

    def __post_init__(self):
        if self.f < 0:
            raise InvalidConfig("f must be non-negative")
        if len(self.members) < 3 * self.f + 1:
            raise InvalidConfig(f"{len(self.members)} members cannot tolerate f={self.f} (need {3 * self.f + 1})")
        if len(set(self.members)) != len(self.members):
            raise InvalidConfig("duplicate members")

    @property
    def n(self) -> int:
        return len(self.members)

    @property
    def leader(self) -> int:
        return self.members[self.viewNumber % len(self.members)]

    def leader_of(self, view: int) -> int:
        return self.members[view % len(self.members)]

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    def with_view(self, view: int) -> "ViewConfig":
        return ViewConfig(view, self.members, self.f)

    def to_dict(self) -> dict:
        return {"viewNumber": self.viewNumber, "members": list(self.members), "f": self.f, "leader": self.leader}

    @classmethod
    def from_dict(cls, d: dict) -> "ViewConfig":
        return cls(int(d.get("viewNumber", 0)), tuple(int(m) for m in d["members"]), int(d["f"]))


def apply_change(cfg: ViewConfig, change: dict) -> ViewConfig:
    """Membership change; raises InvalidConfig if 3f+1 would break."""
    members = list(cfg.members)
    f = cfg.f
    op = change.get("op")
    if op == "join":
        node = int(change["node"])
        if node in members:
            raise InvalidConfig(f"node {node} already a member")
        members.append(node)
    elif op == "leave":
        node = int(change["node"])
        if node not in members:
            raise InvalidConfig(f"node {node} not a member")
        members.remove(node)
    elif op == "setF":
        f = int(change["f"])
    else:
        raise InvalidConfig(f"unknown change {op!r}")
    return ViewConfig(cfg.viewNumber + 1, tuple(members), f)


@dataclass
class KeyRing:
    """Pre-shared pairwise MAC keys, derived from a deployment secret."""

    secret: bytes
    operator_key: bytes = b""
    _cache: dict = field(default_factory=dict, repr=False)

    def key(self, a: int, b: int) -> bytes:
        pair = (a, b) if a <= b else (b, a)
        k = self._cache.get(pair)
        if k is None:
            k = hmac.new(self.secret, f"pair:{pair[0]}:{pair[1]}".encode(), hashlib.sha256).digest()
            self._cache[pair] = k
        return k

    def operator_tag(self, data: bytes) -> str:
        return hmac.new(self.operator_key, data, hashlib.sha256).hexdigest()

    def check_operator(self, data: bytes, tag: str) -> bool:
        if not self.operator_key:
            return False
        return hmac.compare_digest(self.operator_tag(data), str(tag))
