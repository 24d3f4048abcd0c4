"""Bound-check records shared by the verification modules and the harness."""

from __future__ import annotations

from dataclasses import dataclass, field

SLACK = 1e-6


@dataclass
class BoundReport:
    theorem: str
    lhs: float
    rhs: float
    constants: dict
    passed: bool
    seed: int | None = None
    env_hash: str | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, theorem: str, lhs: float, rhs: float, constants: dict, slack: float = SLACK, **kw):
        return cls(theorem, float(lhs), float(rhs), constants, bool(lhs <= rhs + slack), **kw)

    @property
    def ratio(self) -> float:
        if self.rhs > 0:
            return self.lhs / self.rhs
        return 0.0 if self.lhs <= SLACK else float("inf")

    def to_dict(self) -> dict:
        out = {"theorem": self.theorem, "lhs": self.lhs, "rhs": self.rhs,
               "constants": {k: _plain(v) for k, v in self.constants.items()},
               "pass": self.passed, "seed": self.seed, "env_hash": self.env_hash}
        out.update({k: _plain(v) for k, v in self.extra.items()})
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "BoundReport":
        doc = dict(doc)
        base = {k: doc.pop(k) for k in ("theorem", "lhs", "rhs", "constants", "pass", "seed", "env_hash")}
        return cls(base["theorem"], base["lhs"], base["rhs"], base["constants"], base["pass"],
                   base["seed"], base["env_hash"], doc)


def _plain(v):
    if hasattr(v, "item") and getattr(v, "ndim", 1) == 0:
        return v.item()
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v
