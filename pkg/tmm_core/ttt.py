# tzcvm_sim/tmm_core/ttt.py
"""
Stage-2 translation tree of one cVM.

Four levels of 512-entry tables, each backed by one granule in state Ttt.
Leaves are 4 KiB pages at level 3 or blocks at level 2 (2 MiB) and
level 1 (1 GiB). Table contents are kept as Python structures; the backing
granules only account for the memory the tree consumes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple, Union

from mem_model.config import GRANULE_SIZE

from .config import BITS_PER_LEVEL, BLOCK_LEVELS, ENTRIES_PER_TABLE, TTT_LEVELS
from .errors import InputError, StateError

LAST_LEVEL = TTT_LEVELS - 1


@dataclass(frozen=True)
class Attrs:
    protected: bool
    readable: bool = True
    writable: bool = True


@dataclass(frozen=True)
class TableEntry:
    child: int


@dataclass(frozen=True)
class PageEntry:
    granule: int
    attrs: Attrs


@dataclass(frozen=True)
class BlockEntry:
    granule: int            # first granule of a contiguous run
    attrs: Attrs
    level: int

    @property
    def pages(self) -> int:
        return BLOCK_LEVELS[self.level] // GRANULE_SIZE


Entry = Union[TableEntry, PageEntry, BlockEntry]


@dataclass
class Table:
    granule: int
    level: int
    base_ipa: int
    entries: Dict[int, Entry] = field(default_factory=dict)

    def empty(self) -> bool:
        return not self.entries


@dataclass(frozen=True)
class Walk:
    table: Table
    index: int
    entry: Optional[Entry]

    @property
    def level(self) -> int:
        return self.table.level


@dataclass(frozen=True)
class Translation:
    granule: int
    attrs: Attrs
    level: int


def level_shift(level: int) -> int:
    return 12 + BITS_PER_LEVEL * (LAST_LEVEL - level)


def level_index(ipa: int, level: int) -> int:
    return (ipa >> level_shift(level)) & (ENTRIES_PER_TABLE - 1)


def entry_span(level: int) -> int:
    return 1 << level_shift(level)


class Ttt:
    def __init__(self, root_granule: int, ipa_width: int):
        self.ipa_width = ipa_width
        self.root = Table(root_granule, 0, 0)
        self.tables: Dict[int, Table] = {root_granule: self.root}

    # ── Walk ────────────────────────────────────────────────────────────────
    def _check_ipa(self, ipa: int) -> None:
        if not 0 <= ipa < 1 << self.ipa_width or ipa % GRANULE_SIZE:
            raise InputError(f"IPA {ipa:#x} is unaligned or outside the {self.ipa_width}-bit space")

    def walk(self, ipa: int, to_level: int = LAST_LEVEL) -> Walk:
        """Descend through table entries, stopping at `to_level`, a leaf or an Invalid entry."""
        table = self.root
        while True:
            index = level_index(ipa, table.level)
            entry = table.entries.get(index)
            if table.level >= to_level or not isinstance(entry, TableEntry):
                return Walk(table, index, entry)
            table = self.tables[entry.child]

    def resolve(self, ipa: int) -> Optional[Translation]:
        page_ipa = ipa - ipa % GRANULE_SIZE
        w = self.walk(page_ipa)
        if isinstance(w.entry, PageEntry):
            return Translation(w.entry.granule, w.entry.attrs, w.level)
        if isinstance(w.entry, BlockEntry):
            offset = (page_ipa % entry_span(w.level)) // GRANULE_SIZE
            return Translation(w.entry.granule + offset, w.entry.attrs, w.level)
        return None

    # ── Tables ──────────────────────────────────────────────────────────────
    def create_table(self, ipa: int, level: int, granule: int) -> Table:
        if not 1 <= level <= LAST_LEVEL:
            raise InputError(f"no table level {level}")
        self._check_ipa(ipa)
        w = self.walk(ipa, level - 1)
        if w.level != level - 1:
            raise InputError(f"parent table at level {level - 1} missing", results=(w.level,))
        if w.entry is not None:
            raise InputError(f"level {level - 1} entry for {ipa:#x} is already valid")
        span = entry_span(level - 1)
        table = Table(granule, level, ipa - ipa % span)
        w.table.entries[w.index] = TableEntry(granule)
        self.tables[granule] = table
        return table

    def table_at(self, ipa: int, level: int) -> Optional[Table]:
        w = self.walk(ipa, level - 1)
        if w.level == level - 1 and isinstance(w.entry, TableEntry):
            return self.tables[w.entry.child]
        return None

    def destroy_table(self, ipa: int, level: int) -> int:
        if not 1 <= level <= LAST_LEVEL:
            raise InputError(f"no table level {level}")
        self._check_ipa(ipa)
        w = self.walk(ipa, level - 1)
        if w.level != level - 1 or not isinstance(w.entry, TableEntry):
            raise InputError(f"no level {level} table covers {ipa:#x}", results=(w.level,))
        child = self.tables[w.entry.child]
        if not child.empty():
            raise StateError(f"level {level} table at {child.base_ipa:#x} still has valid entries")
        del w.table.entries[w.index]
        del self.tables[child.granule]
        return child.granule

    # ── Leaves ──────────────────────────────────────────────────────────────
    def _leaf_slot(self, ipa: int, level: int) -> Walk:
        self._check_ipa(ipa)
        w = self.walk(ipa, level)
        if w.level != level:
            raise InputError(f"no level {level} table for {ipa:#x}", results=(w.level,))
        return w

    def check_page_free(self, ipa: int) -> None:
        w = self._leaf_slot(ipa, LAST_LEVEL)
        if w.entry is not None:
            raise InputError(f"IPA {ipa:#x} is already mapped")

    def map_page(self, ipa: int, granule: int, attrs: Attrs) -> None:
        w = self._leaf_slot(ipa, LAST_LEVEL)
        if w.entry is not None:
            raise InputError(f"IPA {ipa:#x} is already mapped")
        w.table.entries[w.index] = PageEntry(granule, attrs)

    def unmap_page(self, ipa: int) -> PageEntry:
        w = self._leaf_slot(ipa, LAST_LEVEL)
        if not isinstance(w.entry, PageEntry):
            raise InputError(f"IPA {ipa:#x} is not mapped")
        del w.table.entries[w.index]
        return w.entry

    def page_entry(self, ipa: int) -> Optional[PageEntry]:
        w = self.walk(ipa)
        return w.entry if isinstance(w.entry, PageEntry) and w.level == LAST_LEVEL else None

    def check_block_free(self, ipa: int, level: int) -> None:
        if level not in BLOCK_LEVELS:
            raise InputError(f"no block entries at level {level}")
        if ipa % BLOCK_LEVELS[level]:
            raise InputError(f"IPA {ipa:#x} not aligned for a level {level} block")
        w = self._leaf_slot(ipa, level)
        if w.entry is not None:
            raise InputError(f"level {level} entry for {ipa:#x} is already valid")

    def map_block(self, ipa: int, level: int, granule: int, attrs: Attrs) -> None:
        self.check_block_free(ipa, level)
        w = self.walk(ipa, level)
        w.table.entries[w.index] = BlockEntry(granule, attrs, level)

    def unmap_block(self, ipa: int, level: int) -> BlockEntry:
        w = self._leaf_slot(ipa, level)
        if not isinstance(w.entry, BlockEntry):
            raise InputError(f"no block mapped at {ipa:#x}")
        del w.table.entries[w.index]
        return w.entry

    def leaf_at(self, ipa: int) -> Tuple[Optional[Entry], int]:
        w = self.walk(ipa)
        return w.entry, w.level

    # ── Enumeration ─────────────────────────────────────────────────────────
    def leaves(self) -> Iterator[Tuple[int, Entry, int]]:
        """(ipa, leaf entry, level) for every Page and Block entry, in IPA order."""
        def visit(table: Table) -> Iterator[Tuple[int, Entry, int]]:
            span = entry_span(table.level)
            for index in sorted(table.entries):
                entry = table.entries[index]
                ipa = table.base_ipa + index * span
                if isinstance(entry, TableEntry):
                    yield from visit(self.tables[entry.child])
                else:
                    yield ipa, entry, table.level
        yield from visit(self.root)

    def mapped_pages(self) -> Iterator[Tuple[int, int, Attrs]]:
        """(ipa, granule, attrs) for every 4 KiB page reachable through the tree."""
        for ipa, entry, level in self.leaves():
            if isinstance(entry, PageEntry):
                yield ipa, entry.granule, entry.attrs
            else:
                for i in range(entry.pages):
                    yield ipa + i * GRANULE_SIZE, entry.granule + i, entry.attrs

    def table_granules(self) -> List[int]:
        return list(self.tables)

    def non_root_tables_deepest_first(self) -> List[Table]:
        return sorted((t for t in self.tables.values() if t is not self.root), key=lambda t: -t.level)
