#!/usr/bin/env python3
"""
VoiceShield Model Store Tests
"""

import struct

import numpy as np
import pytest

from crn import crn_forward, init_model
from errors import BadMagic, ChecksumMismatch, IoError, VersionMismatch
from model_store import (MAGIC, decode_tensors, encode_tensors, load_model, load_optimizer_state,
                         save_model, save_optimizer_state)
from train import AdamState


def test_model_round_trip_is_bit_exact(tmp_path):
    model = init_model(2, seed=1)
    path = tmp_path / 'model.crnv'
    save_model(model, path)
    restored = load_model(path)
    assert restored.heads == ('vad', 'vnr')
    for name, value in model.params.items():
        np.testing.assert_array_equal(restored[name], value)

    x = np.random.default_rng(1).standard_normal((15, 64))
    np.testing.assert_array_equal(crn_forward(x, restored), crn_forward(x, model))


def test_single_head_preserved(tmp_path):
    path = tmp_path / 'vnr.crnv'
    save_model(init_model(1, seed=2, heads=('vnr',)), path)
    assert load_model(path).heads == ('vnr',)


def test_file_starts_with_magic(tmp_path):
    path = tmp_path / 'model.crnv'
    save_model(init_model(), path)
    blob = path.read_bytes()
    assert blob[:4] == MAGIC
    assert struct.unpack_from('<I', blob, 4)[0] == 1


def test_truncated_file(tmp_path):
    path = tmp_path / 'model.crnv'
    save_model(init_model(), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(ChecksumMismatch):
        load_model(path)


def test_flipped_byte(tmp_path):
    blob = bytearray(encode_tensors({'a': np.ones(3)}, 1))
    blob[20] ^= 0xFF
    with pytest.raises(ChecksumMismatch):
        decode_tensors(bytes(blob))


def test_bad_magic():
    with pytest.raises(BadMagic):
        decode_tensors(b'RIFF' + b'\0' * 32)
    with pytest.raises(BadMagic):
        decode_tensors(b'')


def test_version_mismatch():
    import zlib
    body = bytearray(encode_tensors({'a': np.ones(2)}, 1)[:-4])
    struct.pack_into('<I', body, 4, 99)
    blob = bytes(body) + struct.pack('<I', zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with pytest.raises(VersionMismatch):
        decode_tensors(blob)


def test_optimizer_file_is_not_a_model(tmp_path):
    path = tmp_path / 'model.crnv.opt'
    state = AdamState(m={'w': np.full(3, 0.5)}, v={'w': np.full(3, 0.25)}, t=7)
    save_optimizer_state(state.to_tensors(), 1, path)

    restored = AdamState.from_tensors(load_optimizer_state(path))
    assert restored.t == 7
    np.testing.assert_array_equal(restored.m['w'], state.m['w'])
    np.testing.assert_array_equal(restored.v['w'], state.v['w'])
    with pytest.raises(IoError):
        load_model(path)


def test_missing_file(tmp_path):
    with pytest.raises(IoError):
        load_model(tmp_path / 'absent.crnv')
