"""Exception hierarchy shared by every layer of the twin."""


class TwinError(Exception):
    pass


class ConfigError(TwinError):
    pass


class RangeError(TwinError, ValueError):
    pass


class BusyError(TwinError):
    pass


class NonFiniteInput(TwinError, ValueError):
    pass


class ParseError(TwinError, ValueError):
    """Malformed protocol file line or wire datagram.

    ``line`` is the 1-based source line for protocol files and ``None`` for
    wire frames; ``reason`` is a short kebab-case token.
    """

    def __init__(self, reason, line=None):
        self.reason = reason
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{reason}")


class ValidationError(TwinError, ValueError):
    def __init__(self, step, reason):
        self.step = step
        self.reason = reason
        super().__init__(f"step {step}: {reason}")


class AbortError(TwinError):
    pass


class Timeout(TwinError, TimeoutError):
    pass


class RemoteError(TwinError):
    """An ``ERR`` reply received by the client."""

    def __init__(self, code, text):
        self.code = code
        self.text = text
        super().__init__(f"ERR {code} {text}")
