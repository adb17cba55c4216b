"""Exception hierarchy shared across the package."""

from __future__ import annotations


class DiscoError(Exception):
    """Base class for all package errors."""


class ShapeError(DiscoError):
    """An operation received operands with incompatible shapes."""

    def __init__(self, node: str, shapes, detail: str = ""):
        self.node = node
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{node}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericOverflowError(DiscoError):
    """A forward value became non-finite."""

    def __init__(self, node: str, component: str | None = None):
        self.node = node
        self.component = component
        where = f" in {component}" if component else ""
        super().__init__(f"non-finite value produced by {node}{where}")


class ContractError(DiscoError):
    """A precondition of an operation was violated."""


class ConfigError(DiscoError):
    """Invalid configuration (bad partition, unknown key, out-of-range value)."""


class FormatError(DiscoError):
    """Malformed on-disk container."""

    def __init__(self, kind: str, message: str):
        self.kind = kind
        super().__init__(f"{kind}: {message}")


class TransportError(DiscoError):
    """The external extraction endpoint could not be reached."""


class ParseError(DiscoError):
    """A response body could not be parsed; carries the raw body."""

    def __init__(self, message: str, raw: str):
        self.raw = raw
        super().__init__(message)


class NotFoundError(DiscoError):
    """A requested item (e.g. video id) does not exist."""


class PartitionMismatchError(DiscoError):
    """Checkpoint and configuration disagree on the token partition."""
