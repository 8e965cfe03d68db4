from __future__ import annotations

import struct

import pytest

from meshwa.sandbox import (
    BadMagic,
    DecodeError,
    LimitExceeded,
    TrailingBytes,
    Truncated,
    decode_module,
    encode_module,
)
from meshwa.sandbox import asm

from conftest import const42_module


def test_bad_magic():
    with pytest.raises(BadMagic):
        decode_module(b"MSB2" + b"\0" * 64)


def test_minimal_module_roundtrip():
    data = const42_module()
    image = decode_module(data)
    assert len(image.functions) == 1
    assert image.exports == {"main": 0}
    assert image.functions[0].instructions == ((0x01, 42), (0x12, 0))
    assert encode_module(image) == data


def test_max_pages_over_cap():
    image = asm.build_image([asm.func("const 1\nret")], mem_pages=1, max_pages=65537)
    with pytest.raises(LimitExceeded):
        decode_module(encode_module(image))


def test_mem_pages_over_max_pages():
    image = asm.build_image([asm.func("const 1\nret")], mem_pages=3, max_pages=2)
    with pytest.raises(LimitExceeded):
        decode_module(encode_module(image))


def test_truncated_everywhere():
    data = const42_module()
    for cut in range(4, len(data)):
        with pytest.raises((Truncated, DecodeError)):
            decode_module(data[:cut])


def test_trailing_bytes_rejected():
    with pytest.raises(TrailingBytes):
        decode_module(const42_module() + b"\0")


def test_unknown_opcode_rejected():
    image = asm.build_image([asm.func("const 1\nret")])
    data = bytearray(encode_module(image))
    # first instruction opcode byte sits right after the function header
    idx = data.index(bytes([0x01]) + struct.pack("<q", 1))
    data[idx] = 0x7F
    with pytest.raises(DecodeError):
        decode_module(bytes(data))


def test_nrets_over_one_rejected():
    from meshwa.sandbox.image import FunctionBody

    image = asm.build_image([asm.func("const 1\nret")])
    bad = image.functions[0]
    image = asm.build_image(
        [FunctionBody(bad.nargs, 2, bad.nlocals, bad.instructions)]
    )
    with pytest.raises(LimitExceeded):
        decode_module(encode_module(image))


def test_empty_function_rejected():
    from meshwa.sandbox.image import FunctionBody

    image = asm.build_image([FunctionBody(0, 0, 0, ())])
    with pytest.raises(LimitExceeded):
        decode_module(encode_module(image))


def test_export_index_out_of_range():
    image = asm.build_image([asm.func("const 1\nret")], exports={"main": 3})
    with pytest.raises(DecodeError):
        decode_module(encode_module(image))


def test_import_names_roundtrip():
    data = asm.build_module(
        [asm.func("const 1\nret")], imports=("xcall.proxy_read/4", "peer.echo/2")
    )
    image = decode_module(data)
    assert image.imports == ("xcall.proxy_read/4", "peer.echo/2")
