import struct

import numpy as np
import pytest

from jsmkit.errors import DataFormatError
from jsmkit.fields import DisplacementField, read_field, write_field
from jsmkit.volume import Volume3D, read_nifti, read_volume, write_volume


def f32_volume(rng, dims=(4, 5, 3), spacing=(1.0, 2.0, 0.5)):
    data = rng.uniform(0, 1, size=dims).astype(np.float32).astype(np.float64)
    return Volume3D(data, spacing)


class TestNativeFormat:
    def test_round_trip_is_bit_exact(self, rng, tmp_path):
        vol = f32_volume(rng)
        path = tmp_path / "vol.jsmv"
        write_volume(vol, path)
        back = read_volume(path)
        assert back.dims == vol.dims
        assert back.spacing == pytest.approx(vol.spacing)
        assert np.array_equal(back.data, vol.data)

    def test_file_layout_is_x_fastest(self, tmp_path):
        data = np.arange(8.0).reshape(2, 2, 2)
        path = tmp_path / "layout.jsmv"
        write_volume(Volume3D(data), path)
        payload = np.frombuffer(path.read_bytes()[64:], dtype="<f4")
        # flat index x + W*(y + H*z)
        expected = [data[x, y, z] for z in range(2) for y in range(2) for x in range(2)]
        np.testing.assert_array_equal(payload, expected)

    def test_truncated_payload_reports_offsets(self, rng, tmp_path):
        path = tmp_path / "trunc.jsmv"
        write_volume(f32_volume(rng), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(DataFormatError, match="expected .* bytes"):
            read_volume(path)

    def test_trailing_bytes_rejected(self, rng, tmp_path):
        path = tmp_path / "extra.jsmv"
        write_volume(f32_volume(rng), path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(DataFormatError, match="trailing"):
            read_volume(path)

    def test_bad_magic_rejected(self, rng, tmp_path):
        path = tmp_path / "magic.jsmv"
        write_volume(f32_volume(rng), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match="magic"):
            read_volume(path)

    def test_scalar_reader_rejects_field_files(self, rng, tmp_path):
        field = DisplacementField(rng.normal(size=(3, 3, 3, 3)))
        path = tmp_path / "field.jsmv"
        write_field(field, path)
        with pytest.raises(DataFormatError, match="dtype"):
            read_volume(path)


class TestFieldFormat:
    def test_round_trip(self, rng, tmp_path):
        vectors = rng.normal(size=(3, 4, 2, 3)).astype(np.float32).astype(np.float64)
        field = DisplacementField(vectors, spacing=(1.0, 1.0, 2.0))
        path = tmp_path / "field.jsmv"
        write_field(field, path)
        back = read_field(path)
        assert np.array_equal(back.vectors, vectors)
        assert back.spacing == pytest.approx(field.spacing)


def craft_nifti(path, dims=(4, 4, 4), datatype=16, magic=b"n+1\x00", payload=None):
    w, h, d = dims
    header = bytearray(352)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, datatype)
    struct.pack_into("<h", header, 72, 32 if datatype == 16 else 16)
    struct.pack_into("<8f", header, 76, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
    struct.pack_into("<f", header, 108, 352.0)
    header[344:348] = magic
    if payload is None:
        count = w * h * d
        if datatype == 16:
            payload = np.arange(count, dtype="<f4").tobytes()
        else:
            payload = np.arange(count, dtype="<i2").tobytes()
    path.write_bytes(bytes(header) + payload)


class TestNifti:
    def test_minimal_float32_file(self, tmp_path):
        # header laid out by hand from the 348-byte NIfTI-1 layout
        path = tmp_path / "mini.nii"
        craft_nifti(path, dims=(4, 4, 4))
        vol = read_nifti(path)
        assert vol.dims == (4, 4, 4)
        # x-fastest on disk
        assert vol.data[1, 0, 0] == 1.0
        assert vol.data[0, 1, 0] == 4.0
        assert vol.data[0, 0, 1] == 16.0

    def test_int16_supported(self, tmp_path):
        path = tmp_path / "mini16.nii"
        craft_nifti(path, datatype=4)
        vol = read_nifti(path)
        assert vol.data[1, 0, 0] == 1.0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.nii"
        craft_nifti(path, magic=b"ni1\x00")
        with pytest.raises(DataFormatError, match="magic"):
            read_nifti(path)

    def test_unsupported_datatype(self, tmp_path):
        path = tmp_path / "dt.nii"
        craft_nifti(path, datatype=8)
        with pytest.raises(DataFormatError, match="datatype"):
            read_nifti(path)

    def test_payload_size_mismatch(self, tmp_path):
        path = tmp_path / "short.nii"
        craft_nifti(path, payload=b"\x00" * 10)
        with pytest.raises(DataFormatError, match="mismatch"):
            read_nifti(path)
