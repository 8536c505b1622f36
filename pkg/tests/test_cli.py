import numpy as np
import pytest
from PIL import Image

from ternvit import model_io
from ternvit.cli import main
from ternvit.distill import FeatureProjection, distill_loss
from ternvit.tensor import write_ften

FLAGS = ["--layers", "1", "--heads", "2", "--embed-dim", "16", "--patch", "4", "--image-size", "8", "--classes", "3"]


@pytest.fixture
def tiny_model(tmp_path):
    assert main(["init", str(tmp_path / "float"), "--seed", "1", "--std", "0.2", *FLAGS]) == 0
    assert main(["convert", str(tmp_path / "float"), str(tmp_path / "m.bmvc"), *FLAGS]) == 0
    return tmp_path / "m.bmvc"


@pytest.fixture
def png(tmp_path):
    pixels = (np.arange(8 * 8 * 3) * 7 % 256).reshape(8, 8, 3).astype(np.uint8)
    Image.fromarray(pixels).save(tmp_path / "img.png")
    return tmp_path / "img.png"


def test_convert_prints_summary(tmp_path, capsys):
    main(["init", str(tmp_path / "f"), *FLAGS])
    capsys.readouterr()
    assert main(["convert", str(tmp_path / "f"), str(tmp_path / "m.bmvc"), *FLAGS, "--ternary-set", "ffn,attn_out"]) == 0
    out = capsys.readouterr().out
    assert "attn_out,ffn" in out and "payload size" in out
    _, cfg = model_io.load(tmp_path / "m.bmvc")
    assert cfg.ternary_layers == {"ffn", "attn_out"}


def test_convert_missing_tensor_exits_2(tmp_path, capsys):
    main(["init", str(tmp_path / "f"), *FLAGS])
    (tmp_path / "f" / "blocks.0.ffn.up.ften").unlink()
    assert main(["convert", str(tmp_path / "f"), str(tmp_path / "m.bmvc"), *FLAGS]) == 2
    assert "blocks.0.ffn.up" in capsys.readouterr().err


def test_convert_bad_roles_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["convert", str(tmp_path), str(tmp_path / "m.bmvc"), "--ternary-set", "head"])
    assert e.value.code == 2


def test_inspect(tiny_model, capsys):
    assert main(["inspect", str(tiny_model)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("BMVC v1") and "blocks.0.ffn.up" in out
    assert main(["inspect", "--json", str(tiny_model)]) == 0
    assert '"magic": "BMVC"' in capsys.readouterr().out


def test_inspect_corrupt_exits_2(tmp_path, capsys):
    (tmp_path / "x.bmvc").write_bytes(b"nope")
    assert main(["inspect", str(tmp_path / "x.bmvc")]) == 2
    assert "magic" in capsys.readouterr().err


def classify(model, image, capsys, *extra):
    code = main(["classify", str(model), str(image), *extra])
    return code, capsys.readouterr()


def test_classify_is_deterministic(tiny_model, png, capsys):
    code, first = classify(tiny_model, png, capsys)
    assert code == 0
    assert classify(tiny_model, png, capsys)[1].out == first.out
    lines = first.out.splitlines()
    assert lines[0].startswith("class ")
    probs = [float(line.split()[-1]) for line in lines[1:]]
    assert len(probs) == 3 and abs(sum(probs) - 1) < 1e-5
    assert probs == sorted(probs, reverse=True)


def test_classify_png_matches_ften(tiny_model, png, tmp_path, capsys):
    img = np.asarray(Image.open(png), dtype=np.float32) / np.float32(255)
    write_ften(tmp_path / "img.ften", img)
    assert classify(tiny_model, png, capsys)[1].out == classify(tiny_model, tmp_path / "img.ften", capsys)[1].out


def test_classify_labels(tiny_model, png, tmp_path, capsys):
    (tmp_path / "labels.txt").write_text("cat\ndog\nbird\n")
    code, res = classify(tiny_model, png, capsys, "--labels", str(tmp_path / "labels.txt"))
    assert code == 0 and res.out.split()[2] in {"cat", "dog", "bird"}
    (tmp_path / "short.txt").write_text("cat\n")
    assert classify(tiny_model, png, capsys, "--labels", str(tmp_path / "short.txt"))[0] == 2


@pytest.mark.parametrize("content", [b"not an image", b"\x89PNG\r\n\x1a\n" + bytes(20)])
def test_classify_malformed_image_exits_2(tiny_model, tmp_path, capsys, content):
    (tmp_path / "bad.png").write_bytes(content)
    code, res = classify(tiny_model, tmp_path / "bad.png", capsys)
    assert code == 2 and "bad.png" in res.err


def test_classify_wrong_size_exits_2(tiny_model, tmp_path, capsys):
    Image.fromarray(np.zeros((5, 5, 3), np.uint8)).save(tmp_path / "small.png")
    assert classify(tiny_model, tmp_path / "small.png", capsys)[0] == 2


def test_verify_selected_suites(capsys):
    assert main(["verify", "pack", "attention"]) == 0
    out = capsys.readouterr().out
    assert "PASS  pack: round trip" in out and "FAIL" not in out


def test_verify_unknown_suite():
    with pytest.raises(SystemExit):
        main(["verify", "nope"])


def write_distill_fixture(d, rng, corrupt=False):
    d.mkdir()
    s, t = rng.standard_normal(5), rng.standard_normal(5)
    sf, tf = rng.standard_normal((3, 4)), rng.standard_normal((3, 6))
    proj = rng.standard_normal((4, 6))
    parts = distill_loss(s, t, 2, sf, tf, FeatureProjection(proj))
    expected = [parts["ce"], parts["kd"], parts["feat"], parts["total"]]
    if corrupt:
        expected[1] += 0.5
    arrays = {"student_logits": s, "teacher_logits": t, "label": [2.0], "student_feat": sf, "teacher_feat": tf,
              "projection": proj, "weights": [1.0, 1.0, 1.0, 1.0], "expected": expected}
    for name, value in arrays.items():
        write_ften(d / f"{name}.ften", np.asarray(value, np.float32))


def test_verify_distill_fixture(tmp_path, rng, capsys):
    write_distill_fixture(tmp_path / "good", rng)
    assert main(["verify", "distill", "--distill", str(tmp_path / "good")]) == 0
    assert "PASS  distill: fixture good" in capsys.readouterr().out


def test_verify_corrupted_distill_fixture_is_named(tmp_path, rng, capsys):
    write_distill_fixture(tmp_path / "bad", rng, corrupt=True)
    assert main(["verify", "distill", "--distill", str(tmp_path / "bad")]) == 1
    out = capsys.readouterr().out
    assert "FAIL  distill: fixture bad  (mismatch in kd)" in out


def test_verify_corrupted_model_fixture_is_named(tiny_model, capsys):
    info = model_io.inspect(tiny_model)
    sec = next(s for s in info["sections"] if s["precision"] == "ternary")
    data = bytearray(tiny_model.read_bytes())
    data[sec["offset"] + 3] = 0xFF
    tiny_model.write_bytes(bytes(data))
    assert main(["verify", "model", "--model", str(tiny_model)]) == 1
    out = capsys.readouterr().out
    assert "FAIL  model: fixture m.bmvc" in out and sec["name"] in out


def test_bench_csv(capsys):
    assert main(["bench", "ffn-nk", "--repeats", "1", "--threads", "1", *FLAGS]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("# ternvit-bench-csv v1")
    assert [line.split(",")[4] for line in out[2:]] == ["packed", "reference", "float"]
