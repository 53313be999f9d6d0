"""Direct DEX reader: method bodies as opcode streams, plus external API refs.

Only the pieces of the format needed for feature extraction are decoded:
string/type/proto/method id tables, class definitions, class data and code
items. Instruction operands are skipped; each instruction contributes its
primary opcode byte. Switch and array payload pseudo-instructions are data
and are stepped over without being emitted.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import BadMagic, TruncatedDex, UnknownOpcode

DEX_MAGIC = b"dex\n"
HEADER_SIZE = 0x70
NO_INDEX = 0xFFFFFFFF

DEFAULT_FRAMEWORK_PREFIXES = ("android.", "java.", "javax.", "androidx.", "kotlin.")

# (first opcode, last opcode, format, mnemonics). Format's first digit is the
# instruction width in 16-bit code units. Unused ranges have no mnemonics.
_OPCODE_RANGES = [
    (0x00, 0x00, "10x", ["nop"]),
    (0x01, 0x01, "12x", ["move"]),
    (0x02, 0x02, "22x", ["move/from16"]),
    (0x03, 0x03, "32x", ["move/16"]),
    (0x04, 0x04, "12x", ["move-wide"]),
    (0x05, 0x05, "22x", ["move-wide/from16"]),
    (0x06, 0x06, "32x", ["move-wide/16"]),
    (0x07, 0x07, "12x", ["move-object"]),
    (0x08, 0x08, "22x", ["move-object/from16"]),
    (0x09, 0x09, "32x", ["move-object/16"]),
    (0x0A, 0x0D, "11x", ["move-result", "move-result-wide", "move-result-object", "move-exception"]),
    (0x0E, 0x0E, "10x", ["return-void"]),
    (0x0F, 0x11, "11x", ["return", "return-wide", "return-object"]),
    (0x12, 0x12, "11n", ["const/4"]),
    (0x13, 0x13, "21s", ["const/16"]),
    (0x14, 0x14, "31i", ["const"]),
    (0x15, 0x15, "21h", ["const/high16"]),
    (0x16, 0x16, "21s", ["const-wide/16"]),
    (0x17, 0x17, "31i", ["const-wide/32"]),
    (0x18, 0x18, "51l", ["const-wide"]),
    (0x19, 0x19, "21h", ["const-wide/high16"]),
    (0x1A, 0x1A, "21c", ["const-string"]),
    (0x1B, 0x1B, "31c", ["const-string/jumbo"]),
    (0x1C, 0x1C, "21c", ["const-class"]),
    (0x1D, 0x1E, "11x", ["monitor-enter", "monitor-exit"]),
    (0x1F, 0x1F, "21c", ["check-cast"]),
    (0x20, 0x20, "22c", ["instance-of"]),
    (0x21, 0x21, "12x", ["array-length"]),
    (0x22, 0x22, "21c", ["new-instance"]),
    (0x23, 0x23, "22c", ["new-array"]),
    (0x24, 0x24, "35c", ["filled-new-array"]),
    (0x25, 0x25, "3rc", ["filled-new-array/range"]),
    (0x26, 0x26, "31t", ["fill-array-data"]),
    (0x27, 0x27, "11x", ["throw"]),
    (0x28, 0x28, "10t", ["goto"]),
    (0x29, 0x29, "20t", ["goto/16"]),
    (0x2A, 0x2A, "30t", ["goto/32"]),
    (0x2B, 0x2C, "31t", ["packed-switch", "sparse-switch"]),
    (0x2D, 0x31, "23x", ["cmpl-float", "cmpg-float", "cmpl-double", "cmpg-double", "cmp-long"]),
    (0x32, 0x37, "22t", ["if-eq", "if-ne", "if-lt", "if-ge", "if-gt", "if-le"]),
    (0x38, 0x3D, "21t", ["if-eqz", "if-nez", "if-ltz", "if-gez", "if-gtz", "if-lez"]),
    (0x3E, 0x43, "10x", []),
    (0x44, 0x51, "23x", [
        "aget", "aget-wide", "aget-object", "aget-boolean", "aget-byte", "aget-char", "aget-short",
        "aput", "aput-wide", "aput-object", "aput-boolean", "aput-byte", "aput-char", "aput-short",
    ]),
    (0x52, 0x5F, "22c", [
        "iget", "iget-wide", "iget-object", "iget-boolean", "iget-byte", "iget-char", "iget-short",
        "iput", "iput-wide", "iput-object", "iput-boolean", "iput-byte", "iput-char", "iput-short",
    ]),
    (0x60, 0x6D, "21c", [
        "sget", "sget-wide", "sget-object", "sget-boolean", "sget-byte", "sget-char", "sget-short",
        "sput", "sput-wide", "sput-object", "sput-boolean", "sput-byte", "sput-char", "sput-short",
    ]),
    (0x6E, 0x72, "35c", ["invoke-virtual", "invoke-super", "invoke-direct", "invoke-static", "invoke-interface"]),
    (0x73, 0x73, "10x", []),
    (0x74, 0x78, "3rc", [
        "invoke-virtual/range", "invoke-super/range", "invoke-direct/range",
        "invoke-static/range", "invoke-interface/range",
    ]),
    (0x79, 0x7A, "10x", []),
    (0x7B, 0x8F, "12x", [
        "neg-int", "not-int", "neg-long", "not-long", "neg-float", "neg-double",
        "int-to-long", "int-to-float", "int-to-double", "long-to-int", "long-to-float",
        "long-to-double", "float-to-int", "float-to-long", "float-to-double",
        "double-to-int", "double-to-long", "double-to-float", "int-to-byte",
        "int-to-char", "int-to-short",
    ]),
    (0x90, 0xAF, "23x", [
        f"{op}-{ty}"
        for ty, ops in (
            ("int", ("add", "sub", "mul", "div", "rem", "and", "or", "xor", "shl", "shr", "ushr")),
            ("long", ("add", "sub", "mul", "div", "rem", "and", "or", "xor", "shl", "shr", "ushr")),
            ("float", ("add", "sub", "mul", "div", "rem")),
            ("double", ("add", "sub", "mul", "div", "rem")),
        )
        for op in ops
    ]),
    (0xB0, 0xCF, "12x", [
        f"{op}-{ty}/2addr"
        for ty, ops in (
            ("int", ("add", "sub", "mul", "div", "rem", "and", "or", "xor", "shl", "shr", "ushr")),
            ("long", ("add", "sub", "mul", "div", "rem", "and", "or", "xor", "shl", "shr", "ushr")),
            ("float", ("add", "sub", "mul", "div", "rem")),
            ("double", ("add", "sub", "mul", "div", "rem")),
        )
        for op in ops
    ]),
    (0xD0, 0xD7, "22s", [
        "add-int/lit16", "rsub-int", "mul-int/lit16", "div-int/lit16",
        "rem-int/lit16", "and-int/lit16", "or-int/lit16", "xor-int/lit16",
    ]),
    (0xD8, 0xE2, "22b", [
        "add-int/lit8", "rsub-int/lit8", "mul-int/lit8", "div-int/lit8", "rem-int/lit8",
        "and-int/lit8", "or-int/lit8", "xor-int/lit8", "shl-int/lit8", "shr-int/lit8",
        "ushr-int/lit8",
    ]),
    (0xE3, 0xF9, "10x", []),
    (0xFA, 0xFA, "45cc", ["invoke-polymorphic"]),
    (0xFB, 0xFB, "4rcc", ["invoke-polymorphic/range"]),
    (0xFC, 0xFC, "35c", ["invoke-custom"]),
    (0xFD, 0xFD, "3rc", ["invoke-custom/range"]),
    (0xFE, 0xFE, "21c", ["const-method-handle"]),
    (0xFF, 0xFF, "21c", ["const-method-type"]),
]


def _build_tables():
    names = [None] * 256
    formats = [None] * 256
    for lo, hi, fmt, mnemonics in _OPCODE_RANGES:
        assert not mnemonics or len(mnemonics) == hi - lo + 1, (lo, hi)
        for op in range(lo, hi + 1):
            formats[op] = fmt
            if mnemonics:
                names[op] = mnemonics[op - lo]
    assert None not in formats
    return names, formats


OPCODE_NAMES, OPCODE_FORMATS = _build_tables()
OPCODE_WIDTHS = [int(fmt[0]) for fmt in OPCODE_FORMATS]
MNEMONIC_TO_OPCODE = {name: op for op, name in enumerate(OPCODE_NAMES) if name}

PACKED_SWITCH_PAYLOAD = 0x0100
SPARSE_SWITCH_PAYLOAD = 0x0200
FILL_ARRAY_DATA_PAYLOAD = 0x0300


def mnemonic(op):
    """Mnemonic for an opcode byte, or None for unused encodings."""
    return OPCODE_NAMES[op]


@dataclass(frozen=True)
class ApiRef:
    class_name: str
    method_name: str
    descriptor: str

    @property
    def key(self):
        """Descriptor-free ``class->method`` key used for feature lists and
        introduction-date tables."""
        return f"{self.class_name}->{self.method_name}"

    def __str__(self):
        return f"{self.class_name}->{self.method_name}{self.descriptor}"

    @classmethod
    def parse(cls, text):
        cls_name, _, rest = text.partition("->")
        paren = rest.find("(")
        if not cls_name or paren < 0:
            raise ValueError(f"not an API signature: {text!r}")
        return cls(cls_name, rest[:paren], rest[paren:])


@dataclass
class DexMethodBody:
    owner_class: str
    method_name: str
    opcodes: list[int]
    code_units: int = 0

    @property
    def mnemonics(self):
        return [OPCODE_NAMES[op] or "UNKNOWN" for op in self.opcodes]


@dataclass
class ParsedDex:
    methods: list[DexMethodBody] = field(default_factory=list)
    apis: list[ApiRef] = field(default_factory=list)
    unknown_opcodes: list[UnknownOpcode] = field(default_factory=list)


def descriptor_to_class(desc):
    """``Ljava/lang/String;`` -> ``java.lang.String``; arrays and primitives
    are returned unchanged."""
    if desc.startswith("L") and desc.endswith(";"):
        return desc[1:-1].replace("/", ".")
    return desc


def _uleb128(buf, pos):
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise TruncatedDex(f"uleb128 runs past end of file at {pos}")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if byte < 0x80:
            return result, pos
        shift += 7
        if shift > 35:
            raise TruncatedDex(f"uleb128 longer than 5 bytes at {pos}")


def _mutf8(raw):
    # MUTF-8 encodes NUL as C0 80 and supplementary chars as surrogate pairs.
    raw = raw.replace(b"\xc0\x80", b"\x00")
    try:
        return raw.decode("utf-8", errors="surrogatepass")
    except UnicodeDecodeError:
        return raw.decode("utf-8", errors="replace")


class _Reader:
    def __init__(self, data):
        self.data = data

    def need(self, off, size, what):
        if off < 0 or off + size > len(self.data):
            raise TruncatedDex(f"{what} at 0x{off:x} (+{size}) exceeds file size {len(self.data)}")

    def unpack(self, fmt, off, what):
        self.need(off, struct.calcsize(fmt), what)
        return struct.unpack_from(fmt, self.data, off)


def decode_instructions(insns, strict=False):
    """Walk a code-unit stream and return ``(opcodes, units_consumed, unknown)``.

    ``insns`` is the raw little-endian byte payload. Payload pseudo-ops are
    skipped but their width counts toward ``units_consumed``.
    """
    n_units = len(insns) // 2
    pos = 0
    opcodes = []
    unknown = []
    while pos < n_units:
        unit = insns[2 * pos] | (insns[2 * pos + 1] << 8)
        op = unit & 0xFF
        if op == 0x00 and unit in (PACKED_SWITCH_PAYLOAD, SPARSE_SWITCH_PAYLOAD, FILL_ARRAY_DATA_PAYLOAD):
            width = _payload_width(insns, pos, unit, n_units)
        else:
            if OPCODE_NAMES[op] is None:
                err = UnknownOpcode(op, pos)
                if strict:
                    raise err
                unknown.append(err)
            width = OPCODE_WIDTHS[op]
            opcodes.append(op)
        if pos + width > n_units:
            raise TruncatedDex(f"instruction at code unit {pos} (width {width}) overruns {n_units} units")
        pos += width
    return opcodes, pos, unknown


def _payload_width(insns, pos, ident, n_units):
    def unit(i):
        if pos + i >= n_units:
            raise TruncatedDex(f"payload header at code unit {pos} truncated")
        return insns[2 * (pos + i)] | (insns[2 * (pos + i) + 1] << 8)

    if ident == PACKED_SWITCH_PAYLOAD:
        return unit(1) * 2 + 4
    if ident == SPARSE_SWITCH_PAYLOAD:
        return unit(1) * 4 + 2
    width = unit(1)
    size = unit(2) | (unit(3) << 16)
    return (size * width + 1) // 2 + 4


def parse_dex(payload, framework_prefixes=DEFAULT_FRAMEWORK_PREFIXES, strict=False):
    """Decode a DEX payload.

    Methods come out in class-definition order, direct methods before virtual
    ones, matching the on-disk class data. ``apis`` holds every method id whose
    owning class is not defined in this file and whose name starts with one of
    ``framework_prefixes``; the list is deduplicated and sorted.
    """
    data = bytes(payload)
    if len(data) < 8 or data[:4] != DEX_MAGIC or data[7] != 0 or not data[4:7].isdigit():
        raise BadMagic(f"payload does not start with DEX magic (got {data[:8]!r})")
    if len(data) < HEADER_SIZE:
        raise TruncatedDex(f"header needs {HEADER_SIZE} bytes, have {len(data)}")

    r = _Reader(data)
    (
        string_ids_size, string_ids_off,
        type_ids_size, type_ids_off,
        proto_ids_size, proto_ids_off,
        _field_ids_size, _field_ids_off,
        method_ids_size, method_ids_off,
        class_defs_size, class_defs_off,
    ) = struct.unpack_from("<12I", data, 0x38)

    r.need(string_ids_off, 4 * string_ids_size, "string_ids")
    string_offs = struct.unpack_from(f"<{string_ids_size}I", data, string_ids_off)
    strings_cache = {}

    def string(idx):
        if idx in strings_cache:
            return strings_cache[idx]
        if idx >= string_ids_size:
            raise TruncatedDex(f"string index {idx} out of range")
        off = string_offs[idx]
        _, pos = _uleb128(data, off)
        end = data.find(b"\x00", pos)
        if end < 0:
            raise TruncatedDex(f"unterminated string_data at 0x{off:x}")
        value = _mutf8(data[pos:end])
        strings_cache[idx] = value
        return value

    r.need(type_ids_off, 4 * type_ids_size, "type_ids")
    type_desc_idx = struct.unpack_from(f"<{type_ids_size}I", data, type_ids_off)

    def type_desc(idx):
        if idx >= type_ids_size:
            raise TruncatedDex(f"type index {idx} out of range")
        return string(type_desc_idx[idx])

    def type_list(off):
        if off == 0:
            return []
        (size,) = r.unpack("<I", off, "type_list")
        r.need(off + 4, 2 * size, "type_list")
        return [type_desc(i) for i in struct.unpack_from(f"<{size}H", data, off + 4)]

    proto_cache = {}

    def proto_descriptor(idx):
        if idx not in proto_cache:
            if idx >= proto_ids_size:
                raise TruncatedDex(f"proto index {idx} out of range")
            _shorty, return_idx, params_off = r.unpack("<3I", proto_ids_off + 12 * idx, "proto_id")
            proto_cache[idx] = "(" + "".join(type_list(params_off)) + ")" + type_desc(return_idx)
        return proto_cache[idx]

    r.need(method_ids_off, 8 * method_ids_size, "method_ids")
    method_ids = [struct.unpack_from("<HHI", data, method_ids_off + 8 * i) for i in range(method_ids_size)]

    r.need(class_defs_off, 32 * class_defs_size, "class_defs")
    defined_types = set()
    class_data_offs = []
    for i in range(class_defs_size):
        class_idx, _flags, _sup, _ifaces, _src, _annot, class_data_off, _static = struct.unpack_from(
            "<8I", data, class_defs_off + 32 * i
        )
        defined_types.add(class_idx)
        class_data_offs.append((class_idx, class_data_off))

    result = ParsedDex()
    for class_idx, class_data_off in class_data_offs:
        if class_data_off == 0:
            continue
        owner = descriptor_to_class(type_desc(class_idx))
        pos = class_data_off
        sizes = []
        for _ in range(4):
            v, pos = _uleb128(data, pos)
            sizes.append(v)
        n_static, n_instance, n_direct, n_virtual = sizes
        for _ in range(n_static + n_instance):
            _, pos = _uleb128(data, pos)
            _, pos = _uleb128(data, pos)
        for count in (n_direct, n_virtual):
            method_idx = 0
            for _ in range(count):
                diff, pos = _uleb128(data, pos)
                _, pos = _uleb128(data, pos)
                code_off, pos = _uleb128(data, pos)
                method_idx += diff
                if code_off == 0:
                    continue
                if method_idx >= method_ids_size:
                    raise TruncatedDex(f"method index {method_idx} out of range")
                name = string(method_ids[method_idx][2])
                result.methods.append(_read_code(r, code_off, owner, name, strict, result.unknown_opcodes))

    seen = set()
    for class_idx, proto_idx, name_idx in method_ids:
        if class_idx in defined_types:
            continue
        owner = descriptor_to_class(type_desc(class_idx))
        if not owner.startswith(tuple(framework_prefixes)):
            continue
        ref = ApiRef(owner, string(name_idx), proto_descriptor(proto_idx))
        if ref not in seen:
            seen.add(ref)
    result.apis = sorted(seen, key=str)
    return result


def _read_code(r, off, owner, name, strict, unknown_sink):
    _regs, _ins, _outs, _tries, _debug, insns_size = r.unpack("<4HII", off, "code_item")
    start = off + 16
    r.need(start, 2 * insns_size, "insns")
    insns = r.data[start:start + 2 * insns_size]
    opcodes, consumed, unknown = decode_instructions(insns, strict=strict)
    if consumed != insns_size:
        raise TruncatedDex(f"{owner}.{name}: decoded {consumed} code units, declared {insns_size}")
    unknown_sink.extend(unknown)
    return DexMethodBody(owner, name, opcodes, insns_size)
