import json

import numpy as np
import pytest
from PIL import Image

from chromaroll.cli import main
from chromaroll.midi_io import RawNote, Score, parse_midi, write_midi


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip()
    return code, (json.loads(out.splitlines()[-1]) if out else None)


def _two_bar_midi(path, velocity=90, program=0):
    notes = [RawNote(60 + (k % 5), k * 240, 240, velocity, program) for k in range(16)]
    path.write_bytes(write_midi(Score.from_notes(notes)))
    return path


@pytest.fixture
def midi_dir(tmp_path):
    d = tmp_path / "mid"
    d.mkdir()
    _two_bar_midi(d / "a.mid")
    _two_bar_midi(d / "b.mid", velocity=50, program=40)
    return d


def test_encode_one_file(tmp_path, midi_dir, capsys):
    code, summary = _run(capsys, "encode", "--in", midi_dir / "a.mid", "--out-dir", tmp_path / "out")
    assert code == 0
    assert summary["rolls"] == 1 and summary["failed"] == {}
    img = Image.open(tmp_path / "out" / "a_0.png")
    assert img.size == (512, 128) and img.mode == "RGB"
    assert (tmp_path / "out" / "a.notes.txt").read_text().startswith("tpb=480 grid=120")


def test_encode_reports_corrupt_input(tmp_path, midi_dir, capsys):
    bad = tmp_path / "bad.mid"
    bad.write_bytes(b"MThd\x00\x00")
    code, summary = _run(capsys, "encode", "--in", midi_dir / "a.mid", bad, "--out-dir", tmp_path / "out")
    assert code == 1
    assert list(summary["failed"]) == [str(bad)]
    assert (tmp_path / "out" / "a_0.png").exists()


def test_encode_is_deterministic_and_parallel_safe(tmp_path, midi_dir, capsys):
    inputs = [midi_dir / "a.mid", midi_dir / "b.mid"]
    _run(capsys, "encode", "--in", *inputs, "--out-dir", tmp_path / "one")
    _run(capsys, "encode", "--in", *inputs, "--out-dir", tmp_path / "two", "--jobs", 2)
    for name in ("a_0.png", "b_0.png", "a.notes.txt"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_encode_rejects_bad_width(tmp_path, midi_dir, capsys):
    code, _ = _run(capsys, "encode", "--in", midi_dir / "a.mid", "--out-dir", tmp_path, "--width", 100)
    assert code == 2


def test_decode_roundtrip(tmp_path, midi_dir, capsys):
    _run(capsys, "encode", "--in", midi_dir / "a.mid", "--out-dir", tmp_path)
    code, summary = _run(capsys, "decode", "--in", tmp_path / "a_0.png", "--out", tmp_path / "a.mid")
    assert code == 0 and summary["notes"] == 16
    original = sorted(parse_midi((midi_dir / "a.mid").read_bytes()).notes)
    back = sorted(parse_midi((tmp_path / "a.mid").read_bytes()).notes)
    assert [(n.pitch, n.onset_tick, n.duration_tick) for n in back] == \
        [(n.pitch, n.onset_tick, n.duration_tick) for n in original]
    assert all(abs(a.velocity - b.velocity) <= 2 for a, b in zip(back, original))


def test_decode_bad_image(tmp_path, capsys):
    bad = tmp_path / "x.png"
    bad.write_bytes(b"nope")
    code, _ = _run(capsys, "decode", "--in", bad, "--out", tmp_path / "x.mid")
    assert code == 1
    assert not (tmp_path / "x.mid").exists()


@pytest.fixture
def checkpoint(tmp_path, midi_dir, capsys):
    rolls = tmp_path / "rolls"
    _run(capsys, "encode", "--in", midi_dir / "a.mid", midi_dir / "b.mid", "--out-dir", rolls, "--width", 16)
    ckpt = tmp_path / "model.ckpt"
    code, summary = _run(capsys, "train", "--in", rolls, "--checkpoint", ckpt, "--steps", 5,
                         "--max-steps", 4, "--width-mult", 0.25, "--loss-log", tmp_path / "loss.txt")
    assert code == 0 and summary["steps"] == 4
    assert len((tmp_path / "loss.txt").read_text().split()) == 4
    return ckpt


def test_sample_is_seeded(tmp_path, checkpoint, capsys):
    code, summary = _run(capsys, "sample", "--checkpoint", checkpoint, "--count", 2, "--seed", 3,
                         "--out-dir", tmp_path / "s1")
    assert code == 0 and summary["steps"] == 5
    _run(capsys, "sample", "--checkpoint", checkpoint, "--count", 2, "--seed", 3, "--out-dir", tmp_path / "s2")
    for k in range(2):
        a = (tmp_path / "s1" / f"sample_{k}.png").read_bytes()
        assert a == (tmp_path / "s2" / f"sample_{k}.png").read_bytes()
        assert Image.open(tmp_path / "s1" / f"sample_{k}.png").size == (16, 128)


def test_sample_count_zero(tmp_path, checkpoint, capsys):
    code, summary = _run(capsys, "sample", "--checkpoint", checkpoint, "--count", 0, "--out-dir", tmp_path / "s")
    assert code == 0 and summary["samples"] == []
    assert list((tmp_path / "s").iterdir()) == []


def test_sample_bad_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert _run(capsys, "sample", "--checkpoint", bad, "--out-dir", tmp_path)[0] == 1
    assert _run(capsys, "sample", "--checkpoint", tmp_path / "missing", "--out-dir", tmp_path)[0] == 1


def test_train_divergence_is_reported(tmp_path, midi_dir, capsys):
    rolls = tmp_path / "rolls"
    _run(capsys, "encode", "--in", midi_dir / "a.mid", "--out-dir", rolls, "--width", 16)
    code, summary = _run(capsys, "train", "--in", rolls, "--checkpoint", tmp_path / "m.ckpt", "--lr", 10,
                         "--steps", 10, "--epochs", 200, "--width-mult", 0.25)
    assert code == 1 and "diverged" in summary["error"]
    assert not (tmp_path / "m.ckpt").exists()


def test_train_without_images(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code, _ = _run(capsys, "train", "--in", tmp_path / "empty", "--checkpoint", tmp_path / "m.ckpt")
    assert code == 2


def test_eval_against_reference(tmp_path, midi_dir, capsys):
    _run(capsys, "encode", "--in", midi_dir / "a.mid", "--out-dir", tmp_path)
    code, report = _run(capsys, "eval", "--generated", tmp_path / "a_0.png",
                        "--reference", tmp_path / "a.notes.txt")
    assert code == 0
    assert report["precision"] == report["recall"] == report["accuracy"] == 1.0
    code, report = _run(capsys, "eval", "--generated", tmp_path / "a_0.png", "--reference", midi_dir / "b.mid")
    assert report["precision"] == 0.0


def test_eval_without_reference(tmp_path, midi_dir, capsys):
    code, report = _run(capsys, "eval", "--generated", midi_dir / "a.mid")
    assert code == 0
    assert report["precision"] is None
    # 16 two-cell notes cycling through 5 pitches: 8, 6, 6, 6, 6 cells
    p = np.array([8, 6, 6, 6, 6]) / 32
    assert report["entropy_bits"] == pytest.approx(-(p * np.log2(p)).sum())


def _corpus(directory, n_ok, n_loud):
    directory.mkdir()
    for k in range(n_ok + n_loud):
        vel = 127 if k >= n_ok else 80
        _two_bar_midi(directory / f"s{k:02d}.mid", velocity=vel)


def test_clean_corpus(tmp_path, capsys):
    _corpus(tmp_path / "in", 7, 3)
    (tmp_path / "in" / "broken.mid").write_bytes(b"junk")
    code, summary = _run(capsys, "clean-corpus", "--in-dir", tmp_path / "in", "--out-dir", tmp_path / "out")
    assert code == 0
    assert (summary["kept"], summary["dropped"], summary["skipped"]) == (7, 3, 1)
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == [f"s{k:02d}.mid" for k in range(7)]


def test_clean_corpus_parallel_matches_serial(tmp_path, capsys):
    _corpus(tmp_path / "in", 4, 2)
    _, serial = _run(capsys, "clean-corpus", "--in-dir", tmp_path / "in", "--out-dir", tmp_path / "a")
    _, parallel = _run(capsys, "clean-corpus", "--in-dir", tmp_path / "in", "--out-dir", tmp_path / "b",
                       "--jobs", 2)
    assert serial == parallel


def test_clean_corpus_empty_dir(tmp_path, capsys):
    (tmp_path / "in").mkdir()
    code, summary = _run(capsys, "clean-corpus", "--in-dir", tmp_path / "in", "--out-dir", tmp_path / "out")
    assert code == 0 and (summary["kept"], summary["dropped"]) == (0, 0)


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["encode", "--out-dir", "x"],
    ["decode", "--in", "a.png"],
    ["encode", "--in", "a.mid", "--out-dir", "x", "--width", "wide"],
    ["clean-corpus", "--in-dir", "/definitely/not/here", "--out-dir", "x"],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == 2


def test_version(capsys):
    assert main(["--version"]) == 0


def test_config_file_and_flag_precedence(tmp_path, midi_dir, capsys):
    cfg = tmp_path / "enc.cfg"
    cfg.write_text(f"# encoder settings\nin = {midi_dir / 'a.mid'}\nout-dir = {tmp_path / 'c'}\nwidth = 256\n")
    assert _run(capsys, "encode", "--config", cfg)[0] == 0
    assert Image.open(tmp_path / "c" / "a_0.png").size == (256, 128)
    assert _run(capsys, "encode", "--config", cfg, "--width", 128)[0] == 0
    assert Image.open(tmp_path / "c" / "a_0.png").size == (128, 128)


@pytest.mark.parametrize("text", ["colour = red\n", "width\n", "width = many\n"])
def test_bad_config(tmp_path, midi_dir, capsys, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert main(["encode", "--config", str(cfg), "--in", str(midi_dir / "a.mid"), "--out-dir", str(tmp_path)]) == 2
