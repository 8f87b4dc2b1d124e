"""Exception hierarchy shared by every stage of the proposal pipeline."""


class BingppError(Exception):
    """Base class for all errors raised by this package."""


class UnsupportedFormat(BingppError):
    pass


class CorruptPayload(BingppError):
    pass


class ZeroDimension(BingppError):
    pass


class EmptyIntersection(BingppError):
    pass


class EmptyEdgeMap(BingppError):
    pass


class NoPositives(BingppError):
    pass


class MalformedModelFile(BingppError):
    pass


class MalformedAnnotation(BingppError):
    pass


class NoGroundTruth(BingppError):
    pass


class EmptyDataset(BingppError):
    pass


class ModelMissing(BingppError):
    pass
