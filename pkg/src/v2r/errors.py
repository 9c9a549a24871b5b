"""Exception hierarchy.

Every error family carries the process exit code the CLI uses for it, so
``v2r`` exits with a distinct nonzero status per family.
"""


class V2RError(Exception):
    exit_code = 1


# registry -------------------------------------------------------------------
class RegistryError(V2RError):
    exit_code = 3


class InvalidManifest(RegistryError):
    pass


class DuplicateVersion(RegistryError):
    pass


class NotFound(RegistryError):
    pass


class CorruptBlob(RegistryError):
    pass


class StorageFailure(RegistryError):
    pass


# executors ------------------------------------------------------------------
class ExecutorError(V2RError):
    exit_code = 4


class ShapeMismatch(ExecutorError):
    pass


class BatchTooLarge(ExecutorError):
    pass


class BadDimensions(ExecutorError):
    pass


class ExecutorFailure(ExecutorError):
    """An executor raised while running a batch.

    ``partial`` holds whatever results were complete before the failure
    (profile records when raised by the profiler).
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = list(partial or [])


# profiler / orchestrator ----------------------------------------------------
class ProfilerError(V2RError):
    exit_code = 5


class EmptySamples(ProfilerError):
    pass


class InvalidProfileRequest(ProfilerError):
    pass


class OrchestratorError(V2RError):
    exit_code = 6


class InvalidRecord(OrchestratorError):
    pass


class NoProfile(OrchestratorError):
    pass


class UnknownModelQueue(OrchestratorError):
    pass


# data engine ----------------------------------------------------------------
class DataEngineError(V2RError):
    exit_code = 7


class BadMagic(DataEngineError):
    pass


class TruncatedStream(DataEngineError):
    def __init__(self, message, frame_index=None):
        super().__init__(message)
        self.frame_index = frame_index


class UnsupportedVersion(DataEngineError):
    pass


class EmptyStream(DataEngineError):
    pass


class QueueClosed(DataEngineError):
    pass


class PayloadMismatch(DataEngineError):
    pass


# server / protocol ----------------------------------------------------------
class ServerError(V2RError):
    exit_code = 8


class MalformedBody(ServerError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class FrameTooLarge(ServerError):
    pass


class UnknownModel(ServerError):
    pass


class BindFailure(ServerError):
    pass


class RemoteError(ServerError):
    """Error frame received from a server."""

    def __init__(self, code, message, request_ids=()):
        super().__init__(f"remote error {code}: {message}")
        self.code = code
        self.request_ids = list(request_ids)


# matching -------------------------------------------------------------------
class MatchingError(V2RError):
    exit_code = 9


class BadDimension(MatchingError):
    pass


class DimMismatch(MatchingError):
    pass


class DuplicateId(MatchingError):
    pass


class ZeroVector(MatchingError):
    pass


class EmptyIndex(MatchingError):
    pass


class TruncatedIndex(MatchingError):
    pass


class VersionMismatch(MatchingError):
    pass


class IndexBadMagic(MatchingError):
    pass


# monitor --------------------------------------------------------------------
class MonitorError(V2RError):
    exit_code = 10


class MalformedStatus(MonitorError):
    pass


EXIT_CODES = {
    "ok": 0,
    "unexpected": 1,
    "usage": 2,
    "registry": RegistryError.exit_code,
    "executor": ExecutorError.exit_code,
    "profiler": ProfilerError.exit_code,
    "orchestrator": OrchestratorError.exit_code,
    "data-engine": DataEngineError.exit_code,
    "server": ServerError.exit_code,
    "matching": MatchingError.exit_code,
    "monitor": MonitorError.exit_code,
    "io": 11,
}
