"""Domain tags threaded through every forward call."""

from __future__ import annotations

import enum


class Domain(str, enum.Enum):
    SOURCE = "SOURCE"
    TARGET = "TARGET"

    @classmethod
    def parse(cls, value) -> "Domain":
        if isinstance(value, Domain):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown domain {value!r}; expected SOURCE or TARGET") from None


DOMAINS = (Domain.SOURCE, Domain.TARGET)
