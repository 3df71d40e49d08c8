"""Exception hierarchy shared by the simulators, the engine and the CLI."""


class CrError(Exception):
    """Base class for every error raised by unicr."""


# -- host / scenario -------------------------------------------------------

class SpecError(CrError):
    pass


class NoSuchTask(CrError):
    pass


class InvalidState(CrError):
    pass


# -- device drivers --------------------------------------------------------

class DeviceError(CrError):
    pass


class TimeoutExpired(DeviceError):
    """Lock did not complete in time; every task was put back to Running."""

    def __init__(self, msg, pids=(), waited=0.0):
        super().__init__(msg)
        self.pids = tuple(pids)
        self.waited = waited
        self.rolled_back = True


class TaskNotRunning(DeviceError):
    pass


class NotLocked(DeviceError):
    pass


class DeviceLocked(DeviceError):
    """A device API call was issued by a task whose driver state is locked."""


class MissingBlob(DeviceError):
    pass


class TopologyMismatch(DeviceError):
    pass


class TopologyIncompatible(TopologyMismatch):
    def __init__(self, msg, diff=()):
        super().__init__(msg)
        self.diff = list(diff)


class BadGpuidMap(DeviceError):
    pass


class PermissionDenied(DeviceError):
    pass


class NoKfdFd(DeviceError):
    pass


class NotPaused(DeviceError):
    pass


class NotRestored(DeviceError):
    pass


class DeviceBusy(DeviceError):
    pass


# -- images ----------------------------------------------------------------

class ImageError(CrError):
    pass


class ImageCorrupt(ImageError):
    pass


class ChecksumMismatch(ImageCorrupt):
    def __init__(self, filename, expected=None, actual=None):
        msg = f"checksum mismatch in {filename}"
        if expected is not None:
            msg += f" (expected {expected:#010x}, got {actual:#010x})"
        super().__init__(msg)
        self.filename = filename


class MissingFile(ImageCorrupt):
    def __init__(self, filename):
        super().__init__(f"missing image file {filename}")
        self.filename = filename


class VersionUnsupported(ImageError):
    pass


class IoError(CrError):
    pass


# -- engine ----------------------------------------------------------------

class LockTimeout(CrError):
    pass


class PluginError(CrError):
    def __init__(self, plugin_id, msg):
        super().__init__(f"{plugin_id}: {msg}")
        self.plugin_id = plugin_id


class DuplicatePlugin(CrError):
    pass


class UnknownDevice(CrError):
    pass


class Unsupported(CrError):
    pass


class HookOrderViolation(CrError):
    pass


# -- containers / baseline -------------------------------------------------

class MissingLayer(CrError):
    pass


class NonDeterministicDivergence(CrError):
    pass
