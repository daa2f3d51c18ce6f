import numpy as np
import pytest

from volcap import fileio
from volcap.core import TriMesh, VolumeGrid


def tetra(with_attrs=True):
    V = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]) * 100.123456789
    F = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    N = V / np.maximum(np.linalg.norm(V, axis=1, keepdims=True), 1e-9)
    attrs = {"w": np.array([0.1, 0.2, 0.3, 0.4]), "uv": np.arange(16.0).reshape(4, 4) / 7} if with_attrs else {}
    return TriMesh(V, F, N, attrs)


@pytest.mark.parametrize("suffix", [".ply", ".obj"])
def test_mesh_roundtrip_exact(tmp_path, suffix):
    m = tetra()
    fileio.write_mesh(tmp_path / f"m{suffix}", m)
    back = fileio.read_mesh(tmp_path / f"m{suffix}")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.faces, m.faces)
    assert np.array_equal(back.normals, m.normals)
    assert np.array_equal(back.attributes["uv"], m.attributes["uv"])
    assert np.array_equal(np.ravel(back.attributes["w"]), m.attributes["w"])


def test_ply_points_only(tmp_path):
    P = np.random.default_rng(0).normal(size=(10, 3))
    fileio.write_ply(tmp_path / "p.ply", P, extra={"weight": np.arange(10.0)})
    d = fileio.read_ply(tmp_path / "p.ply")
    assert np.array_equal(d["points"], P) and np.array_equal(d["weight"], np.arange(10.0))
    assert "faces" not in d and "normals" not in d


def test_ply_rejects_other_files(tmp_path):
    (tmp_path / "x.ply").write_bytes(b"not a ply")
    with pytest.raises(fileio.DataError):
        fileio.read_ply(tmp_path / "x.ply")


def test_volume_roundtrip(tmp_path):
    data = np.random.default_rng(1).normal(size=(4, 5, 6))
    vg = VolumeGrid(data, np.array([1.0, -2.0, 3.5]), 12.5)
    fileio.write_volume(tmp_path / "v", vg, 0.25)
    back, level = fileio.read_volume(tmp_path / "v")
    assert level == 0.25 and back.edge == 12.5 and np.array_equal(back.origin, vg.origin)
    assert np.allclose(back.data, data, atol=1e-6)
    with pytest.raises(fileio.DataError):
        fileio.read_volume(tmp_path / "missing")


def test_depth_and_color_png(tmp_path):
    d = np.array([[0.0, 1000.4], [65535.0, 2500.6]])
    fileio.write_depth_png(tmp_path / "d.png", d)
    assert np.array_equal(fileio.read_depth_png(tmp_path / "d.png"), [[0, 1000], [65535, 2501]])
    c = np.random.default_rng(2).integers(0, 256, (3, 4, 3)).astype(np.uint8)
    fileio.write_color_png(tmp_path / "c.png", c)
    assert np.array_equal(fileio.read_color_png(tmp_path / "c.png"), c)
    with pytest.raises(fileio.DataError):
        fileio.read_color_png(tmp_path / "none.png")


def test_wav_roundtrip(tmp_path):
    s = np.sin(np.linspace(0, 20, 1000)) * 0.5
    fileio.write_wav(tmp_path / "a.wav", s, 16000)
    back, sr = fileio.read_wav(tmp_path / "a.wav")
    assert sr == 16000 and np.allclose(back, s, atol=1 / 32767)


def test_csv_and_json(tmp_path):
    fileio.write_csv(tmp_path / "t.csv", ["a", "b"], [[1, "x"], [2, "y"]])
    assert fileio.read_csv(tmp_path / "t.csv") == [{"a": "1", "b": "x"}, {"a": "2", "b": "y"}]
    fileio.write_json(tmp_path / "t.json", {"b": 1, "a": [1.5]})
    assert (tmp_path / "t.json").read_text().index('"a"') < (tmp_path / "t.json").read_text().index('"b"')
    assert fileio.read_json(tmp_path / "t.json") == {"a": [1.5], "b": 1}
    with pytest.raises(fileio.DataError):
        fileio.read_json(tmp_path / "nope.json")
