"""Permission extraction from AndroidManifest.xml (binary AXML or plain XML)."""
from __future__ import annotations

import struct
import xml.etree.ElementTree as ET

from .errors import BadAxml

AXML_MAGIC = 0x00080003

RES_STRING_POOL_TYPE = 0x0001
RES_XML_TYPE = 0x0003
RES_XML_START_NAMESPACE_TYPE = 0x0100
RES_XML_END_NAMESPACE_TYPE = 0x0101
RES_XML_START_ELEMENT_TYPE = 0x0102
RES_XML_END_ELEMENT_TYPE = 0x0103
RES_XML_CDATA_TYPE = 0x0104
RES_XML_RESOURCE_MAP_TYPE = 0x0180

UTF8_FLAG = 1 << 8
TYPE_STRING = 0x03
ATTR_NAME_RESOURCE_ID = 0x01010003  # android:name

ANDROID_NS = "http://schemas.android.com/apk/res/android"
PERMISSION_TAGS = ("uses-permission", "uses-permission-sdk-23")


def parse_manifest_permissions(payload):
    """Return the set of ``<uses-permission android:name=...>`` values.

    ``uses-permission-sdk-23`` is treated the same way since it grants the
    same runtime permission on newer platforms.
    """
    data = bytes(payload)
    if len(data) >= 8 and struct.unpack_from("<I", data, 0)[0] == AXML_MAGIC:
        return _permissions_from_axml(data)
    stripped = data.lstrip(b"\xef\xbb\xbf \t\r\n")
    if stripped.startswith(b"<"):
        return _permissions_from_text(data)
    raise BadAxml("payload is neither binary AXML nor XML text")


def _permissions_from_text(data):
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise BadAxml(f"malformed XML: {exc}") from exc
    perms = set()
    for tag in PERMISSION_TAGS:
        for el in root.iter(tag):
            value = el.get(f"{{{ANDROID_NS}}}name") or el.get("name")
            if value:
                perms.add(value)
    return perms


def _read_string_pool(data, off, chunk_size):
    if chunk_size < 28 or off + chunk_size > len(data):
        raise BadAxml(f"string pool chunk at 0x{off:x} truncated")
    count, _styles, flags, strings_start, _styles_start = struct.unpack_from("<5I", data, off + 8)
    if off + 28 + 4 * count > off + chunk_size:
        raise BadAxml("string pool offsets exceed chunk")
    offsets = struct.unpack_from(f"<{count}I", data, off + 28)
    base = off + strings_start
    end = off + chunk_size
    utf8 = bool(flags & UTF8_FLAG)
    out = []
    for rel in offsets:
        pos = base + rel
        if pos >= end:
            raise BadAxml(f"string offset 0x{rel:x} outside pool")
        try:
            out.append(_decode_utf8(data, pos) if utf8 else _decode_utf16(data, pos))
        except (IndexError, struct.error, UnicodeDecodeError) as exc:
            raise BadAxml(f"bad string at 0x{pos:x}: {exc}") from exc
    return out


def _decode_utf8(data, pos):
    # u8 utf-16 length then u8 byte length, each with a 0x80 continuation bit.
    n = data[pos]
    pos += 2 if n & 0x80 else 1
    n = data[pos]
    if n & 0x80:
        n = ((n & 0x7F) << 8) | data[pos + 1]
        pos += 2
    else:
        pos += 1
    return data[pos:pos + n].decode("utf-8", errors="replace")


def _decode_utf16(data, pos):
    (n,) = struct.unpack_from("<H", data, pos)
    pos += 2
    if n & 0x8000:
        (lo,) = struct.unpack_from("<H", data, pos)
        n = ((n & 0x7FFF) << 16) | lo
        pos += 2
    raw = data[pos:pos + 2 * n]
    if len(raw) != 2 * n:
        raise IndexError("utf-16 string runs past buffer")
    return raw.decode("utf-16-le", errors="replace")


def _permissions_from_axml(data):
    _, header_size, _file_size = struct.unpack_from("<HHI", data, 0)
    if header_size != 8:
        raise BadAxml(f"unexpected XML header size {header_size}")
    strings = []
    res_ids = []
    perms = set()
    off = header_size
    n = len(data)
    while off < n:
        if off + 8 > n:
            raise BadAxml(f"chunk header at 0x{off:x} truncated")
        ctype, chdr, csize = struct.unpack_from("<HHI", data, off)
        if csize < 8 or chdr > csize or off + csize > n:
            raise BadAxml(f"chunk 0x{ctype:04x} at 0x{off:x} has invalid size {csize}")
        if ctype == RES_STRING_POOL_TYPE:
            strings = _read_string_pool(data, off, csize)
        elif ctype == RES_XML_RESOURCE_MAP_TYPE:
            res_ids = list(struct.unpack_from(f"<{(csize - chdr) // 4}I", data, off + chdr))
        elif ctype == RES_XML_START_ELEMENT_TYPE:
            value = _start_element_permission(data, off, chdr, csize, strings, res_ids)
            if value:
                perms.add(value)
        elif ctype in (
            RES_XML_START_NAMESPACE_TYPE,
            RES_XML_END_NAMESPACE_TYPE,
            RES_XML_END_ELEMENT_TYPE,
            RES_XML_CDATA_TYPE,
        ):
            pass
        # Unknown chunk types are skipped by size, as the platform does.
        off += csize
    return perms


def _string_at(strings, idx):
    if idx == 0xFFFFFFFF:
        return None
    if idx >= len(strings):
        raise BadAxml(f"string index {idx} outside pool of {len(strings)}")
    return strings[idx]


def _start_element_permission(data, off, chdr, csize, strings, res_ids):
    ext = off + chdr
    if ext + 20 > off + csize:
        raise BadAxml(f"start element at 0x{off:x} truncated")
    _ns, name_idx, attr_start, attr_size, attr_count = struct.unpack_from("<IIHHH", data, ext)
    if _string_at(strings, name_idx) not in PERMISSION_TAGS:
        return None
    if attr_size < 20 or ext + attr_start + attr_count * attr_size > off + csize:
        raise BadAxml(f"attributes of element at 0x{off:x} exceed chunk")
    for i in range(attr_count):
        a = ext + attr_start + i * attr_size
        _ans, aname, raw, _sz, _res0, dtype, dval = struct.unpack_from("<IIIHBBI", data, a)
        is_name = _string_at(strings, aname) == "name" or (
            aname < len(res_ids) and res_ids[aname] == ATTR_NAME_RESOURCE_ID
        )
        if not is_name:
            continue
        if raw != 0xFFFFFFFF:
            return _string_at(strings, raw)
        if dtype == TYPE_STRING:
            return _string_at(strings, dval)
    return None
