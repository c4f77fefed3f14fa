"""
Integration tests for artifact files.
"""
import numpy as np
import pytest

from app.archs import build_model, make_checkpoint, restore_model
from app.coupler import run_controlled
from app.errors import DigestError, VersionError
from app.store import FORMAT_VERSION, decode_artifact, encode_artifact, load_artifact, save_artifact

DIGEST = "a" * 64


@pytest.fixture
def control_record(toy_system, rng):
    return run_controlled(toy_system, 3, seed=0, initial=toy_system.forcing + rng.standard_normal(toy_system.sites), config_digest=DIGEST)


class TestRoundTrips:
    """Every artifact kind decodes to what was written."""

    def test_dataset(self, toy_dataset):
        data = encode_artifact("dataset", toy_dataset, DIGEST)
        loaded = decode_artifact(data, "dataset", DIGEST)
        ds = loaded.obj
        assert np.array_equal(ds.train.states, toy_dataset.train.states)
        assert np.array_equal(ds.test.metadata, toy_dataset.test.metadata)
        assert np.array_equal(ds.train.epochs, toy_dataset.train.epochs)
        assert ds.stats.digest() == toy_dataset.stats.digest()
        assert ds.metadata_names == toy_dataset.metadata_names
        assert loaded.header.meta == {"train": len(toy_dataset.train), "test": len(toy_dataset.test)}
        assert encode_artifact("dataset", ds, DIGEST) == data

    def test_checkpoint(self, toy_arch, toy_dataset, rng):
        model = build_model(toy_arch("iunet"), seed=3)
        model.head.weight.data = rng.standard_normal(model.head.weight.shape)
        ckpt = make_checkpoint(model, 6, toy_dataset.stats, [0.5, 0.25])
        data = encode_artifact("checkpoint", ckpt, DIGEST)
        restored = decode_artifact(data, "checkpoint").obj
        assert restored.losses == [0.5, 0.25]
        assert restored.stats_digest == ckpt.stats_digest
        x = toy_dataset.test.states[:3]
        mu = toy_dataset.test.metadata[:3]
        assert np.array_equal(restore_model(restored).predict(x, mu), model.predict(x, mu))
        assert encode_artifact("checkpoint", restored, DIGEST) == data

    def test_run(self, control_record):
        data = encode_artifact("run", control_record, DIGEST)
        loaded = decode_artifact(data, "run")
        assert np.array_equal(loaded.obj.snapshots, control_record.snapshots)
        assert loaded.obj.increments is None
        assert loaded.header.meta["horizon"] == 3
        assert encode_artifact("run", loaded.obj, DIGEST) == data

    def test_report(self):
        tables = {"summary.csv": "experiment,rmse\ncontrol,1.0\n"}
        assert decode_artifact(encode_artifact("report", tables, DIGEST), "report").obj == tables

    def test_save_and_load(self, tmp_path, control_record):
        path = save_artifact(tmp_path / "nested" / "control.run", "run", control_record, DIGEST)
        assert path.read_bytes().startswith(b"NORUN1\n")
        assert load_artifact(path, "run", DIGEST).header.version == FORMAT_VERSION


class TestIntegrity:
    """Truncation, corruption and digest checks."""

    def test_truncated_payload(self, control_record):
        data = encode_artifact("run", control_record, DIGEST)
        with pytest.raises(DigestError):
            decode_artifact(data[:-5], "run")

    def test_truncated_header(self, control_record):
        data = encode_artifact("run", control_record, DIGEST)
        with pytest.raises(DigestError):
            decode_artifact(data[:10], "run")

    def test_corrupted_byte(self, control_record):
        data = bytearray(encode_artifact("run", control_record, DIGEST))
        data[-1] ^= 0xFF
        with pytest.raises(DigestError):
            decode_artifact(bytes(data), "run")

    def test_wrong_kind(self, control_record):
        with pytest.raises(DigestError):
            decode_artifact(encode_artifact("run", control_record, DIGEST), "checkpoint")

    def test_config_digest_mismatch(self, control_record):
        with pytest.raises(DigestError) as info:
            decode_artifact(encode_artifact("run", control_record, DIGEST), "run", expected_digest="b" * 64)
        assert info.value.as_record()["code"] == "digest_mismatch"

    def test_missing_file(self, tmp_path):
        with pytest.raises(DigestError):
            load_artifact(tmp_path / "absent.run", "run")


class TestVersions:
    """Format migration and rejection."""

    def test_migrates_previous_minor(self, control_record):
        loaded = decode_artifact(encode_artifact("run", control_record, DIGEST, version="1.0"), "run")
        assert loaded.header.version == FORMAT_VERSION
        assert loaded.notes and "1.0" in loaded.notes[0]
        assert np.array_equal(loaded.obj.snapshots, control_record.snapshots)

    @pytest.mark.parametrize("version", ["2.0", "1.9", "0.3", "latest"])
    def test_rejects_unknown_versions(self, control_record, version):
        with pytest.raises(VersionError):
            decode_artifact(encode_artifact("run", control_record, DIGEST, version=version), "run")

    def test_unknown_kind(self):
        with pytest.raises(VersionError):
            encode_artifact("movie", {}, DIGEST)
