"""Exception hierarchy shared by every subsystem."""

from __future__ import annotations


class MarlError(Exception):
    """Base class for all framework errors."""


# cluster simulation
class SchedulingInPast(MarlError, ValueError):
    pass


class DeviceOom(MarlError):
    pass


class HostOom(MarlError):
    pass


class EmptyPool(MarlError, ValueError):
    pass


class InsufficientResources(MarlError):
    pass


# object store
class DuplicateKey(MarlError, KeyError):
    pass


class KeyNotFound(MarlError, KeyError):
    pass


class EmptyList(MarlError, ValueError):
    pass


class LayoutOutOfBounds(MarlError, ValueError):
    pass


class GetTimeout(MarlError, TimeoutError):
    pass


# experience store
class TableExists(MarlError):
    pass


class ReservedColumnName(MarlError, ValueError):
    pass


class DuplicateSample(MarlError):
    pass


class UnknownColumn(MarlError, KeyError):
    pass


class RecordNotFound(MarlError, KeyError):
    pass


class CellAlreadySet(MarlError):
    pass


class UnknownTable(MarlError, KeyError):
    pass


class NotProcessing(MarlError):
    pass


# rollout
class UnknownWorkflow(MarlError):
    pass


class NoInstance(MarlError):
    pass


# training
class BusyGroup(MarlError):
    pass


class VersionMismatch(MarlError):
    pass


class InactiveGroup(MarlError):
    pass


class IncompleteBatch(MarlError):
    pass


# orchestration / harness
class ConfigError(MarlError, ValueError):
    pass


class StallDetected(MarlError, RuntimeError):
    pass


class SyncTimeout(MarlError, TimeoutError):
    pass
