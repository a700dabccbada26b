"""Exception types raised across the package."""


class AnchorSiftError(Exception):
    """Base class for every error this package raises on purpose."""


# embedding store
class BadMagic(AnchorSiftError, ValueError):
    pass


class VersionUnsupported(AnchorSiftError, ValueError):
    pass


class TruncatedFile(AnchorSiftError, ValueError):
    pass


class NonFiniteValue(AnchorSiftError, ValueError):
    pass


class ZeroVector(AnchorSiftError, ValueError):
    pass


class DimensionMismatch(AnchorSiftError, ValueError):
    pass


# anchor preparation
class EmptyImage(AnchorSiftError, ValueError):
    pass


# index
class TooFewPoints(AnchorSiftError, ValueError):
    pass


class DimensionNotDivisible(AnchorSiftError, ValueError):
    pass


class EmptyIndex(AnchorSiftError, ValueError):
    pass


# fetching
class FetchError(AnchorSiftError):
    """Any failure to retrieve a URL body."""


class Unreachable(FetchError):
    pass


class HttpError(FetchError):
    def __init__(self, status: int, url: str = ""):
        super().__init__(f"HTTP {status} for {url}" if url else f"HTTP {status}")
        self.status = status
        self.url = url


class TooLarge(FetchError):
    pass


class UnknownFormat(AnchorSiftError, ValueError):
    pass


class CorruptHeader(AnchorSiftError, ValueError):
    pass


# pipeline / report
class MissingExactEmbedding(AnchorSiftError, KeyError):
    pass


class TooFewSamples(AnchorSiftError, ValueError):
    pass


class MissingDigest(AnchorSiftError, ValueError):
    pass


class ZeroAnchors(AnchorSiftError, ValueError):
    pass


# configuration
class ConfigError(AnchorSiftError, ValueError):
    pass


class ParseError(ConfigError):
    pass


class UnknownKey(ConfigError):
    def __init__(self, key: str):
        super().__init__(f"unknown config key: {key!r}")
        self.key = key


class MissingRequired(ConfigError):
    pass
