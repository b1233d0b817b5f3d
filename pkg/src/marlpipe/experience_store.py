"""Per-agent multi-table sample storage.

Each agent owns one table.  A row carries meta columns (policy version,
sample id, processing flag), user-defined data columns and one boolean
status column per data column.  Simple values are stored inline; strings,
lists and tensors go to the object store and the cell keeps only the key.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Union

import numpy as np

from .errors import (
    CellAlreadySet,
    DuplicateSample,
    NotProcessing,
    RecordNotFound,
    ReservedColumnName,
    TableExists,
    UnknownColumn,
    UnknownTable,
)
from .object_store import HeterogeneousObject, ObjectLocation, ObjectStore, object_key

RESERVED_COLUMNS = frozenset({"policy_version", "sample_id", "processing"})


@dataclass(frozen=True, order=True)
class SampleId:
    """``{input_id}_{number_of_turns}_{trajectory_id}``; ordering is canonical."""

    input_id: str
    number_of_turns: int
    trajectory_id: int

    def __post_init__(self) -> None:
        if not self.input_id or "_" in self.input_id:
            raise ValueError(f"input_id must be non-empty without '_': {self.input_id!r}")
        if self.number_of_turns < 0 or self.trajectory_id < 0:
            raise ValueError("turn and trajectory ids must be non-negative")

    def __str__(self) -> str:
        return f"{self.input_id}_{self.number_of_turns}_{self.trajectory_id}"

    @classmethod
    def parse(cls, text: str) -> SampleId:
        parts = text.split("_")
        if len(parts) != 3:
            raise ValueError(f"malformed sample id {text!r}")
        return cls(parts[0], int(parts[1]), int(parts[2]))


class ColumnType(str, Enum):
    INT = "int"
    FLOAT = "float"
    BOOL = "bool"
    STRING = "string"
    LIST = "list"
    TENSOR = "tensor"

    @property
    def by_reference(self) -> bool:
        return self in (ColumnType.STRING, ColumnType.LIST, ColumnType.TENSOR)


@dataclass(frozen=True)
class Inline:
    value: int | float | bool


@dataclass(frozen=True)
class Ref:
    key: str


CellValue = Union[Inline, Ref]


@dataclass(frozen=True)
class TableSchema:
    agent_id: str
    columns: tuple[tuple[str, ColumnType], ...]

    @property
    def names(self) -> list[str]:
        return [c for c, _ in self.columns]

    def type_of(self, column: str) -> ColumnType:
        for c, t in self.columns:
            if c == column:
                return t
        raise UnknownColumn(column)


@dataclass
class SampleRecord:
    policy_version: int
    sample_id: SampleId
    processing: bool = False
    data: dict[str, CellValue | None] = field(default_factory=dict)
    status: dict[str, bool] = field(default_factory=dict)

    @property
    def ready(self) -> bool:
        return all(self.status.values())

    @property
    def key(self) -> tuple[SampleId, int]:
        return (self.sample_id, self.policy_version)

    def inline(self, column: str) -> Any:
        cell = self.data[column]
        if not isinstance(cell, Inline):
            raise TypeError(f"column {column} is not stored inline")
        return cell.value


@dataclass
class MicroBatch:
    agent_id: str
    policy_version: int
    samples: list[SampleRecord]

    @property
    def size(self) -> int:
        return len(self.samples)


@dataclass
class _Table:
    schema: TableSchema
    rows: dict[tuple[SampleId, int], SampleRecord] = field(default_factory=dict)
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)


class ExperienceStore:
    def __init__(self, store: ObjectStore | None = None):
        self.store = store
        self._tables: dict[str, _Table] = {}
        self._lock = threading.Lock()

    def _table(self, agent_id: str) -> _Table:
        try:
            return self._tables[agent_id]
        except KeyError:
            raise UnknownTable(agent_id) from None

    def create_table(self, schema: TableSchema) -> None:
        names = schema.names
        bad = RESERVED_COLUMNS.intersection(names)
        if bad:
            raise ReservedColumnName(sorted(bad)[0])
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names")
        with self._lock:
            if schema.agent_id in self._tables:
                raise TableExists(schema.agent_id)
            self._tables[schema.agent_id] = _Table(schema)

    def schema(self, agent_id: str) -> TableSchema:
        return self._table(agent_id).schema

    def columns(self, agent_id: str) -> list[str]:
        """Meta, data and status columns in table order."""
        names = self._table(agent_id).schema.names
        return ["policy_version", "sample_id", "processing", *names, *(f"{n}_status" for n in names)]

    # -- writes ------------------------------------------------------------
    def insert(self, agent_id: str, record: SampleRecord) -> None:
        table = self._table(agent_id)
        names = table.schema.names
        for col in list(record.data) + list(record.status):
            if col not in names:
                raise UnknownColumn(col)
        with table.lock:
            if record.key in table.rows:
                raise DuplicateSample(f"{record.sample_id} v{record.policy_version}")
            for col in names:
                present = record.data.get(col) is not None
                record.data.setdefault(col, None)
                record.status[col] = record.status.get(col, present) and present
            table.rows[record.key] = record

    def set_cell(
        self,
        agent_id: str,
        sample_id: SampleId,
        version: int,
        column: str,
        value: Any,
        node: int = 0,
        source_dev: int | None = None,
    ) -> CellValue:
        """Write one data cell and flip its status flag.

        Raw values are stored by value or by reference according to the
        column type; by-reference payloads land on the host of ``node``.
        """
        table = self._table(agent_id)
        ctype = table.schema.type_of(column)
        with table.lock:
            rec = table.rows.get((sample_id, version))
            if rec is None:
                raise RecordNotFound(f"{sample_id} v{version}")
            if rec.status[column]:
                raise CellAlreadySet(f"{sample_id} v{version} {column}")
            cell = self._to_cell(agent_id, sample_id, version, column, ctype, value, node, source_dev)
            rec.data[column] = cell
            rec.status[column] = True
        return cell

    def _to_cell(self, agent_id, sample_id, version, column, ctype, value, node, source_dev) -> CellValue:
        if isinstance(value, (Inline, Ref)):
            return value
        if not ctype.by_reference:
            return Inline(value)
        if self.store is None:
            raise RuntimeError("reference-typed columns need an object store")
        key = object_key("sample-field", agent_id, version, sample_id, column)
        if ctype is ColumnType.TENSOR:
            obj = HeterogeneousObject.from_array(key, np.asarray(value))
        elif ctype is ColumnType.LIST:
            obj = HeterogeneousObject.from_list(key, value)
        else:
            obj = HeterogeneousObject.from_string(key, str(value))
        self.store.set(key, obj, ObjectLocation.host(node), source_dev=source_dev)
        return Ref(key)

    def read(self, cell: CellValue | None) -> Any:
        if cell is None:
            return None
        if isinstance(cell, Inline):
            return cell.value
        return self.store.peek(cell.key).value()

    # -- reads -------------------------------------------------------------
    def records(self, agent_id: str) -> list[SampleRecord]:
        table = self._table(agent_id)
        with table.lock:
            return sorted(table.rows.values(), key=lambda r: r.key)

    def get_record(self, agent_id: str, sample_id: SampleId, version: int) -> SampleRecord:
        table = self._table(agent_id)
        rec = table.rows.get((sample_id, version))
        if rec is None:
            raise RecordNotFound(f"{sample_id} v{version}")
        return rec

    def count_ready(self, agent_id: str, version: int, where: Callable[[SampleRecord], bool] | None = None) -> int:
        table = self._table(agent_id)
        with table.lock:
            return sum(
                1
                for r in table.rows.values()
                if r.ready and not r.processing and r.policy_version == version and (where is None or where(r))
            )

    def poll_micro_batch(
        self,
        agent_id: str,
        current_version: int,
        micro_batch_size: int,
        where: Callable[[SampleRecord], bool] | None = None,
    ) -> MicroBatch | None:
        """Atomically claim ``micro_batch_size`` ready records of ``current_version``.

        ``where`` optionally narrows the candidates further (e.g. to one step's quota).
        """
        if micro_batch_size < 1:
            raise ValueError("micro_batch_size must be >= 1")
        table = self._table(agent_id)
        with table.lock:
            ready = [
                r
                for r in table.rows.values()
                if r.ready
                and not r.processing
                and r.policy_version == current_version
                and (where is None or where(r))
            ]
            if len(ready) < micro_batch_size:
                return None
            ready.sort(key=lambda r: r.sample_id)
            chosen = ready[:micro_batch_size]
            for r in chosen:
                r.processing = True
        return MicroBatch(agent_id, current_version, chosen)

    # -- lifecycle ---------------------------------------------------------
    def _drop_refs(self, rec: SampleRecord) -> None:
        if self.store is None:
            return
        for cell in rec.data.values():
            if isinstance(cell, Ref) and self.store.contains(cell.key):
                self.store.delete(cell.key)

    def purge_stale(self, agent_id: str, current_version: int) -> int:
        table = self._table(agent_id)
        with table.lock:
            stale = [
                k for k, r in table.rows.items() if not r.processing and r.policy_version < current_version
            ]
            removed = [table.rows.pop(k) for k in sorted(stale)]
        for rec in removed:
            self._drop_refs(rec)
        return len(removed)

    def complete(self, agent_id: str, samples: Iterable[SampleRecord | tuple[SampleId, int]]) -> None:
        table = self._table(agent_id)
        keys = [s.key if isinstance(s, SampleRecord) else tuple(s) for s in samples]
        with table.lock:
            for k in keys:
                rec = table.rows.get(k)
                if rec is None or not rec.processing:
                    raise NotProcessing(f"{k[0]} v{k[1]}")
            removed = [table.rows.pop(k) for k in keys]
        for rec in removed:
            self._drop_refs(rec)

    def discard(self, agent_id: str, sample_id: SampleId, version: int) -> bool:
        """Remove a record regardless of state (dropped trajectories)."""
        table = self._table(agent_id)
        with table.lock:
            rec = table.rows.pop((sample_id, version), None)
        if rec is not None:
            self._drop_refs(rec)
        return rec is not None

    def __len__(self) -> int:
        return sum(len(t.rows) for t in self._tables.values())

    def table_size(self, agent_id: str) -> int:
        return len(self._table(agent_id).rows)

    def dump_jsonl(self, agent_id: str) -> str:
        lines = []
        for rec in self.records(agent_id):
            data = {
                col: (cell.key if isinstance(cell, Ref) else cell.value if isinstance(cell, Inline) else None)
                for col, cell in rec.data.items()
            }
            lines.append(
                json.dumps(
                    {
                        "policy_version": rec.policy_version,
                        "sample_id": str(rec.sample_id),
                        "processing": rec.processing,
                        "data": data,
                        "status": rec.status,
                    },
                    sort_keys=True,
                )
            )
        return "".join(line + "\n" for line in lines)
