"""Opcode mnemonic -> behavioural category mapping.

The default table has 17 categories: a 15-way reduction of the Dalvik
instruction set plus separate buckets for invoke-polymorphic/invoke-custom
and const-method-handle/const-method-type. Bytes with no defined instruction
map to the reserved ``UNKNOWN`` symbol. Tables are JSON so alternatives can be
swapped in without code changes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

from .dex import OPCODE_NAMES

UNKNOWN = "UNKNOWN"


@dataclass(frozen=True)
class SymbolAlphabet:
    name: str
    categories: tuple
    mapping: dict

    def __post_init__(self):
        missing = [m for m in OPCODE_NAMES if m and m not in self.mapping]
        if missing:
            raise ValueError(f"alphabet {self.name!r} leaves opcodes unmapped: {missing[:5]}")
        stray = set(self.mapping.values()) - set(self.categories)
        if stray:
            raise ValueError(f"alphabet {self.name!r} maps to undeclared categories {sorted(stray)}")
        if UNKNOWN in self.categories:
            raise ValueError(f"{UNKNOWN} is reserved")

    @classmethod
    def from_json(cls, doc):
        return cls(doc["name"], tuple(doc["categories"]), dict(doc["mapping"]))

    @classmethod
    def load(cls, path=None):
        if path is None:
            text = resources.files("timedroid.data").joinpath("opcode_categories.json").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        return cls.from_json(json.loads(text))

    def symbol(self, mnemonic):
        return self.mapping.get(mnemonic, UNKNOWN)

    def symbolize(self, mnemonics):
        """Replace each mnemonic by its category; length-preserving."""
        get = self.mapping.get
        return [get(m, UNKNOWN) for m in mnemonics]

    def symbolize_opcodes(self, opcodes):
        """Same as :meth:`symbolize` but starting from raw opcode bytes."""
        table = [self.mapping.get(name, UNKNOWN) if name else UNKNOWN for name in OPCODE_NAMES]
        return [table[op] for op in opcodes]


_default = None


def default_alphabet():
    global _default
    if _default is None:
        _default = SymbolAlphabet.load()
    return _default


def symbolize(mnemonics, alphabet=None):
    return (alphabet or default_alphabet()).symbolize(mnemonics)
