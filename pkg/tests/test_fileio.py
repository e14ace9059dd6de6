import struct

import numpy as np
import pytest

from gigpc.fileio import (DataError, checkpoint_bytes, format_config, load_checkpoint,
                          load_dataset, parse_checkpoint, parse_config, ply_bytes, read_mesh,
                          read_obj, read_ply, read_ply_mesh, save_checkpoint, write_ply)
from gigpc.networks import Model


def test_ply_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        n = int(rng.integers(1, 300))
        P = rng.standard_normal((n, 3)) * 10.0 ** rng.integers(-8, 8)
        write_ply(tmp_path / "c.ply", P)
        Q = read_ply(tmp_path / "c.ply")
        assert Q.dtype == np.float64 and Q.tobytes() == P.tobytes()


def test_ply_three_points(tmp_path):
    P = np.array([[0.1, 0.2, 0.3], [-1e-300, 5e300, 0.0], [1 / 3, 2 / 3, -0.0]])
    write_ply(tmp_path / "p.ply", P)
    assert read_ply(tmp_path / "p.ply").tobytes() == P.tobytes()
    assert ply_bytes(P).startswith(b"ply\nformat binary_little_endian 1.0\nelement vertex 3\n")


def test_ascii_origin(tmp_path):
    (tmp_path / "o.ply").write_text("ply\nformat ascii 1.0\nelement vertex 1\n"
                                    "property float x\nproperty float y\nproperty float z\n"
                                    "end_header\n0 0 0\n")
    P = read_ply(tmp_path / "o.ply")
    assert P.shape == (1, 3) and (P == 0).all()


def test_binary_float32_with_extra_property(tmp_path):
    pts = np.array([[1.5, -2.25, 0.125], [3.0, 4.0, 5.0]], dtype="<f4")
    head = (b"ply\nformat binary_little_endian 1.0\ncomment made by hand\nelement vertex 2\n"
            b"property float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n")
    body = b"".join(p.tobytes() + bytes([7]) for p in pts)
    (tmp_path / "f.ply").write_bytes(head + body)
    assert np.array_equal(read_ply(tmp_path / "f.ply"), pts.astype(np.float64))


def test_ply_faces_round_trip_and_quads(tmp_path):
    V = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    write_ply(tmp_path / "m.ply", V, [[0, 1, 2], [0, 2, 3]])
    m = read_mesh(tmp_path / "m.ply")
    assert np.array_equal(m.vertices, V) and m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]
    (tmp_path / "q.ply").write_text("ply\nformat ascii 1.0\nelement vertex 4\nproperty double x\n"
                                    "property double y\nproperty double z\nelement face 1\n"
                                    "property list uchar int vertex_indices\nend_header\n"
                                    "0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    assert read_ply_mesh(tmp_path / "q.ply").faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_truncated_payload_names_element(tmp_path):
    raw = ply_bytes(np.zeros((3, 3)))
    (tmp_path / "t.ply").write_bytes(raw.replace(b"vertex 3", b"vertex 4"))
    with pytest.raises(DataError, match="'vertex'.*byte"):
        read_ply(tmp_path / "t.ply")
    (tmp_path / "a.ply").write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n"
                                    "property float y\nproperty float z\nend_header\n0 0 0\n")
    with pytest.raises(DataError, match="'vertex'"):
        read_ply(tmp_path / "a.ply")


@pytest.mark.parametrize("header, pattern", [
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty quaternion x\nend_header\n",
     "unsupported property.*byte 38"),
    ("ply\nformat binary_big_endian 1.0\nend_header\n", "unsupported format.*byte 4"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty int x\nproperty int y\n"
     "property int z\nend_header\n0 0 0\n", "must be float"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n0\n", "lacks property 'y'"),
    ("PLY nonsense", "magic"),
    ("ply\nformat ascii 1.0\n", "end_header"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
     "property float z\nend_header\n0 zero 0\n", "malformed 'vertex' row at byte"),
])
def test_ply_diagnostics(tmp_path, header, pattern):
    (tmp_path / "bad.ply").write_text(header)
    with pytest.raises(DataError, match=pattern):
        read_ply(tmp_path / "bad.ply")


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_obj_triangle_quad_and_negative_indices(tmp_path):
    m = read_obj(write(tmp_path, "t.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"))
    assert m.vertices.shape == (3, 3) and m.faces.tolist() == [[0, 1, 2]]
    m = read_obj(write(tmp_path, "q.obj", "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
                                          "vn 0 0 1\nvt 0 0\nf 1/1/1 2/1/1 3/1/1 4/1/1\n"))
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]
    m = read_obj(write(tmp_path, "n.obj", "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -1 -2 -3\n"))
    assert m.faces.tolist() == [[3, 2, 1]]
    assert read_mesh(tmp_path / "n.obj").faces.tolist() == [[3, 2, 1]]


def test_obj_errors_carry_line_numbers(tmp_path):
    with pytest.raises(DataError, match=r":5: face index 4 out of range"):
        read_obj(write(tmp_path, "e.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\nf 1 2 4\n"))
    with pytest.raises(DataError, match=r":1: bad vertex"):
        read_obj(write(tmp_path, "v.obj", "v 0 x 0\n"))
    with pytest.raises(DataError, match="unsupported mesh format"):
        read_mesh(write(tmp_path, "m.stl", ""))


def test_config_parsing():
    schema = {"seed": int, "lr": float, "preset": str, "conditional": bool}
    cfg = parse_config("# run\nseed = 7\nlr=0.001  # step\n\npreset = desk\nconditional = true\n", schema)
    assert cfg == {"seed": 7, "lr": 0.001, "preset": "desk", "conditional": True}
    assert parse_config(format_config(cfg), schema) == cfg
    with pytest.raises(DataError, match=":2: unknown key 'sead'"):
        parse_config("seed = 1\nsead = 2\n", schema)
    with pytest.raises(DataError, match="seed expects int"):
        parse_config("seed = one\n", schema)
    with pytest.raises(DataError, match=":1: expected key = value"):
        parse_config("seed\n", schema)


def test_dataset_loader(tmp_path):
    rng = np.random.default_rng(0)
    clouds = {}
    for name in ["b.ply", "a.ply", "c.ply"]:
        clouds[name] = rng.standard_normal((8, 3))
        write_ply(tmp_path / name, clouds[name])
    ds = load_dataset(tmp_path)
    assert ds.names == ["a.ply", "b.ply", "c.ply"]
    assert np.array_equal(ds.clouds[1], clouds["b.ply"])
    (tmp_path / "train.txt").write_text("c.ply\na.ply\n")
    (tmp_path / "labels.csv").write_text("a.ply,table\nb.ply,chair\nc.ply,chair\n")
    ds = load_dataset(tmp_path, "train", conditional=True)
    assert ds.names == ["c.ply", "a.ply"] and ds.categories == ["chair", "table"]
    assert ds.labels.tolist() == [[1, 0], [0, 1]]
    with pytest.raises(DataError, match="no val.txt"):
        load_dataset(tmp_path, "val")
    write_ply(tmp_path / "d.ply", np.zeros((5, 3)))
    with pytest.raises(DataError, match="differing point counts"):
        load_dataset(tmp_path)


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    for preset in ["tiny", "desk"]:
        m = Model.create(preset, 3)
        meta = {"preset": preset, "seed": "3"}
        save_checkpoint(tmp_path / "c.gig", m, meta)
        m2, meta2 = load_checkpoint(tmp_path / "c.gig")
        assert meta2 == meta
        assert m2.encoder == m.encoder and m2.generator == m.generator
        assert list(m2.params) == list(m.params)
        for k in m.params:
            assert m2.params[k].data.tobytes() == m.params[k].data.tobytes()
        assert checkpoint_bytes(m2, meta2) == (tmp_path / "c.gig").read_bytes()


def test_checkpoint_layout():
    m = Model.create("tiny", 0)
    raw = checkpoint_bytes(m)
    assert raw[:8] == b"GIGCKPT1"
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = raw[12:12 + hlen].decode()
    assert header.startswith("format=1\n") and "encoder.latent_dim=" in header
    (count,) = struct.unpack("<I", raw[12 + hlen:16 + hlen])
    assert count == len(m.params)


def test_corrupt_checkpoints_fail_with_location():
    m = Model.create("tiny", 0)
    raw = checkpoint_bytes(m)
    with pytest.raises(DataError, match="bad magic"):
        parse_checkpoint(b"XXXXXXXX" + raw[8:])
    with pytest.raises(DataError, match="truncated at byte"):
        parse_checkpoint(raw[:-5])
    with pytest.raises(DataError, match="trailing bytes"):
        parse_checkpoint(raw + b"\0")
    name = next(iter(m.params)).encode()
    renamed = raw.replace(name, b"X" * len(name), 1)
    with pytest.raises(DataError, match="missing parameter"):
        parse_checkpoint(renamed)
