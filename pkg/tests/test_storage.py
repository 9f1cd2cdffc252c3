import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from easy.errors import CheckpointError, EasyError, RecordError
from easy.models import TrialRecord
from easy.storage import (
    JsonlWriter,
    atomic_path,
    checkpoint_digest,
    iter_files,
    load_checkpoint,
    read_json,
    read_jsonl,
    save_checkpoint,
    state_digest,
    write_json,
    write_jsonl,
)


def trial(i: int) -> TrialRecord:
    return TrialRecord(enroll_ids=[f"e{i}"], test_id=f"t{i}", label=i % 2 == 0, score=i / 10)


def test_json_round_trip(tmp_path):
    path = tmp_path / "nested" / "trial.json"
    write_json(path, trial(3))
    assert read_json(path, TrialRecord) == trial(3)


def test_jsonl_round_trip(tmp_path):
    path = tmp_path / "trials.jsonl"
    write_jsonl(path, [trial(i) for i in range(5)])
    assert read_jsonl(path, TrialRecord) == [trial(i) for i in range(5)]


def test_jsonl_writer_publishes_on_close(tmp_path):
    path = tmp_path / "log.jsonl"
    with JsonlWriter(path) as writer:
        writer.write(trial(0))
        writer.flush()
        assert not path.exists()
    assert len(read_jsonl(path, TrialRecord)) == 1


def test_failed_write_leaves_the_old_file(tmp_path):
    path = tmp_path / "data.txt"
    path.write_text("old")
    with pytest.raises(RuntimeError):
        with atomic_path(path) as tmp:
            tmp.write_text("new")
            raise RuntimeError("boom")
    assert path.read_text() == "old"
    assert list(tmp_path.iterdir()) == [path]


def test_invalid_jsonl_line_is_reported(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(trial(0).model_dump_json() + "\n{\"test_id\": 1}\n")
    with pytest.raises(RecordError, match=":2:"):
        read_jsonl(path, TrialRecord)


def test_schema_invalid_records_are_library_errors(tmp_path):
    lines = tmp_path / "schema.jsonl"
    lines.write_text(trial(0).model_dump_json() + "\n" + '{"enroll_ids": [], "test_id": "t", "label": true}' + "\n")
    with pytest.raises(EasyError, match=":2:"):
        read_jsonl(lines, TrialRecord)

    doc = tmp_path / "trial.json"
    doc.write_text('{"enroll_ids": ["e"], "test_id": "t", "label": "maybe"}')
    with pytest.raises(RecordError, match="TrialRecord"):
        read_json(doc, TrialRecord)
    doc.write_text("{not json")
    with pytest.raises(RecordError):
        read_json(doc, TrialRecord)


def test_checkpoint_round_trip(tmp_path):
    path = tmp_path / "ckpt.pt"
    state = {"w": torch.arange(6.0).reshape(2, 3)}
    save_checkpoint(path, {"model": state, "discriminator": {}, "step": 4})
    payload = load_checkpoint(path)
    assert payload["step"] == 4
    assert torch.equal(payload["model"]["w"], state["w"])
    assert checkpoint_digest(path) == state_digest(state, {})


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "old.pt"
    torch.save({"format_version": 0, "model": {}}, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_unreadable_checkpoint(tmp_path):
    path = tmp_path / "junk.pt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.pt")


def test_state_digest_tracks_values():
    a = {"w": torch.zeros(3), "b": torch.ones(1)}
    b = {"b": torch.ones(1), "w": torch.zeros(3)}
    assert state_digest(a) == state_digest(b)
    assert state_digest(a) != state_digest({"w": torch.zeros(3), "b": torch.full((1,), 2.0)})


def test_iter_files_is_sorted_and_recursive(tmp_path):
    for name in ("b/2.wav", "a/1.wav", "c.wav", "notes.txt"):
        (tmp_path / name).parent.mkdir(parents=True, exist_ok=True)
        (tmp_path / name).write_bytes(b"")
    assert [p.relative_to(tmp_path).as_posix() for p in iter_files(tmp_path)] == ["a/1.wav", "b/2.wav", "c.wav"]
