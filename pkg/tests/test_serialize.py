import numpy as np
import pytest

from bcpnn_stream.dataflow import sequential_oracle
from bcpnn_stream.errors import DataFormatError, ModelVersionError, TruncatedFileError
from bcpnn_stream.model import build_model
from bcpnn_stream.serialize import (
    FORMAT_VERSION,
    MAGIC,
    dumps_model,
    load_model,
    loads_model,
    save_model,
    state_digest,
)

from conftest import pattern_dataset, tiny_config


@pytest.fixture
def trained():
    m = build_model(tiny_config(rewire_interval=5), structural=True)
    ds = pattern_dataset(20, m.cfg)
    sequential_oracle(m, ds, "unsupervised")
    sequential_oracle(m, ds, "supervised")
    return m


class TestModelFile:
    def test_round_trip(self, trained, tmp_path):
        path = save_model(trained, tmp_path / "m.model")
        back = load_model(path)
        assert state_digest(back) == state_digest(trained)
        assert back.cfg == trained.cfg and back.structural
        assert back.rng.random() == trained.rng.random()

    def test_continues_identically(self, trained):
        back = loads_model(dumps_model(trained))
        ds = pattern_dataset(8, trained.cfg, seed=9)
        ra = sequential_oracle(trained, ds, "unsupervised")
        rb = sequential_oracle(back, ds, "unsupervised")
        assert ra.hidden_digests == rb.hidden_digests

    def test_little_endian_header(self, trained):
        raw = dumps_model(trained)
        assert raw[:8] == MAGIC
        assert int.from_bytes(raw[8:12], "little") == FORMAT_VERSION

    def test_version_mismatch(self, trained):
        raw = bytearray(dumps_model(trained))
        raw[8:12] = (FORMAT_VERSION + 1).to_bytes(4, "little")
        with pytest.raises(ModelVersionError, match="version"):
            loads_model(bytes(raw))

    def test_bad_magic(self, trained):
        raw = b"XXXXXXXX" + dumps_model(trained)[8:]
        with pytest.raises(ModelVersionError):
            loads_model(raw)

    def test_corrupted_payload(self, trained):
        raw = bytearray(dumps_model(trained))
        raw[200] ^= 0xFF
        with pytest.raises(DataFormatError, match="checksum"):
            loads_model(bytes(raw))

    def test_truncated(self, trained):
        with pytest.raises(DataFormatError):
            loads_model(dumps_model(trained)[:-100])

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_model(tmp_path / "nope.model")

    def test_non_structural_has_no_store(self):
        m = build_model(tiny_config())
        assert loads_model(dumps_model(m)).ih.silent is None

    def test_digest_sensitive_to_state(self, trained):
        other = trained.copy()
        other.ho.p_joint[0, 0, 0] = np.nextafter(other.ho.p_joint[0, 0, 0], 1.0)
        assert state_digest(other) != state_digest(trained)
        np.testing.assert_array_equal(other.ih.rf, trained.ih.rf)
