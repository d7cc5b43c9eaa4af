"""
Tests for output path checks and atomic writes.
"""

import pytest

from dcmnet.errors import ConfigError, OutputPathError
from dcmnet.storage import atomic_write_bytes, check_writable, write_json


class TestCheckWritable:
    def test_missing_parents_are_fine(self, tmp_path):
        target = tmp_path / "a" / "b" / "out.json"
        assert check_writable(target) == target
        assert not (tmp_path / "a").exists()

    def test_parent_is_a_file(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("x", encoding="utf-8")
        with pytest.raises(OutputPathError, match="not a directory"):
            check_writable(blocker / "out.json")

    def test_path_is_a_directory(self, tmp_path):
        with pytest.raises(OutputPathError, match="is a directory"):
            check_writable(tmp_path)

    def test_is_a_config_error(self):
        assert issubclass(OutputPathError, ConfigError)


class TestAtomicWrite:
    def test_creates_parents(self, tmp_path):
        path = write_json(tmp_path / "nested" / "doc.json", {"b": 1})
        assert path.read_text(encoding="utf-8") == '{\n  "b": 1\n}\n'

    def test_unwritable_parent_raises_output_error(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("x", encoding="utf-8")
        with pytest.raises(OutputPathError, match="Cannot write"):
            atomic_write_bytes(blocker / "out.bin", b"payload")

    def test_no_temporary_file_left_behind(self, tmp_path):
        target = tmp_path / "taken"
        target.mkdir()
        with pytest.raises(OutputPathError):
            atomic_write_bytes(target, b"payload")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["taken"]
