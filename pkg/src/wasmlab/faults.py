"""Fault hierarchy shared by every lab component.

Each fault carries a stable short code so drivers, HTTP handlers and the
CLI can match on behaviour instead of exception identity.
"""

from __future__ import annotations


class LabFault(Exception):
    """Base class. `code` is the stable identifier, `detail` is free text."""

    code = "EFAULT"

    def __init__(self, detail: str = ""):
        self.detail = detail
        super().__init__(f"{self.code}: {detail}" if detail else self.code)


# -- guest memory / libc ----------------------------------------------------

class OutOfBounds(LabFault):
    code = "EOOB"


class UnterminatedString(LabFault):
    code = "ENONUL"


class BadFormat(LabFault):
    code = "EBADFMT"


class FormatArgsExhausted(LabFault):
    code = "EARGS"


class HeapFull(LabFault):
    code = "EHEAPFULL"


class DoubleFree(LabFault):
    code = "EDOUBLEFREE"


class CanaryClobbered(LabFault):
    code = "ECANARY"


# -- query engine -----------------------------------------------------------

class QuerySyntax(LabFault):
    code = "ESYNTAX"

    def __init__(self, detail: str = "", offset: int = 0):
        self.offset = offset
        super().__init__(f"{detail} (byte {offset})" if detail else f"byte {offset}")


class BindMismatch(LabFault):
    code = "EBINDMISMATCH"


class TemplateTampered(LabFault):
    code = "EINTEGRITY"


class NoSuchTable(LabFault):
    code = "ENOTABLE"


class NoSuchColumn(LabFault):
    code = "ENOCOL"


# -- template engine --------------------------------------------------------

class TemplateSyntax(LabFault):
    code = "ETPL"


class DivisionByZero(LabFault):
    code = "EDIV0"


# -- regex engine -----------------------------------------------------------

class RegexSyntax(LabFault):
    code = "EREGEX"

    def __init__(self, detail: str = "", offset: int = 0):
        self.offset = offset
        super().__init__(f"{detail} (byte {offset})" if detail else f"byte {offset}")


# -- host / backends --------------------------------------------------------

class InstantiateFailed(LabFault):
    code = "EINSTANTIATE"


class NoSuchExport(LabFault):
    code = "ENOEXPORT"


class GuestTrap(LabFault):
    code = "ETRAP"

    def __init__(self, detail: str = "", cause: LabFault | None = None):
        self.cause = cause
        super().__init__(detail)


# -- scenario layer ---------------------------------------------------------

class Forbidden(LabFault):
    code = "EFORBIDDEN"


class BoundaryRejected(LabFault):
    code = "EBOUNDARY"


class PayloadTooLarge(LabFault):
    code = "ESIZE"


# -- exploit drivers --------------------------------------------------------

class GroomFailed(LabFault):
    code = "EGROOM"


class OracleAmbiguous(LabFault):
    code = "EAMBIGUOUS"


class AlphabetExhausted(LabFault):
    code = "EEXHAUSTED"

    def __init__(self, detail: str = "", position: int = 0, recovered: str = ""):
        self.position = position
        self.recovered = recovered
        super().__init__(detail or f"no candidate hit at position {position}")


class UnsupportedCombination(LabFault):
    code = "EUNSUPPORTED"


class BadConfig(LabFault):
    code = "ECONFIG"
