import struct

import numpy as np
import pytest

from services.engine.checkpoint import MAGIC, decode_container, encode_container, read_container, write_container
from services.errors import CheckpointError


@pytest.fixture
def named_arrays(rng):
    return [('stem.conv1.weight', rng.standard_normal((2, 3, 3, 3))), ('output.bias', np.array([0.25])),
            ('scalar', np.array(1.5))]


def test_container_preserves_names_shapes_and_values(tmp_path, named_arrays):
    path = write_container(tmp_path / 'w.ckwt', named_arrays)
    restored = read_container(path)
    assert [name for name, _ in restored] == [name for name, _ in named_arrays]
    for (_, original), (_, loaded) in zip(named_arrays, restored):
        assert loaded.shape == original.shape
        np.testing.assert_array_equal(loaded, original)


def test_layout_is_little_endian(named_arrays):
    payload = encode_container(named_arrays[1:2])
    assert payload[:4] == MAGIC
    assert struct.unpack_from('<I', payload, 4) == (1,)
    name_length = struct.unpack_from('<I', payload, 8)[0]
    assert payload[12:12 + name_length] == b'output.bias'
    assert struct.unpack_from('<d', payload, len(payload) - 8) == (0.25,)


def test_encoding_is_byte_stable(named_arrays):
    assert encode_container(named_arrays) == encode_container(named_arrays)


def test_bad_magic():
    with pytest.raises(CheckpointError, match='bad magic'):
        decode_container(b'NOPE' + struct.pack('<I', 1))


def test_unknown_version():
    with pytest.raises(CheckpointError, match='version'):
        decode_container(MAGIC + struct.pack('<I', 9))


def test_truncated_payload(named_arrays):
    payload = encode_container(named_arrays)
    with pytest.raises(CheckpointError):
        decode_container(payload[:-3])


def test_missing_file_is_an_os_error(tmp_path):
    with pytest.raises(OSError):
        read_container(tmp_path / 'absent.ckwt')
