"""Matrix file format and experiment config parsing."""

import numpy as np
import pytest

from stochdg.config import ConfigError, load_config, parse_config_text
from stochdg.matio import MatrixFormatError, read_matrix, write_matrix

BASE_CFG = """
[mesh]
kind = cartesian
nx = 2
ny = 2
x0 = 0.0
x1 = 1.0
y0 = 0.0
y1 = 1.0

[discretization]
p = 2

[run]
regime = dirichlet_weak
dt = 1e-5
n_steps = 100
seed = 3
"""


class TestMatrixIO:
    def test_text_roundtrip_lossless(self, tmp_path):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((7, 5)) * 10.0 ** rng.integers(-8, 8, size=(7, 5))
        path = tmp_path / "a.mat"
        write_matrix(path, a, meta={"config": "deadbeef", "p": "2"})
        b, meta = read_matrix(path)
        np.testing.assert_array_equal(a, b)
        assert meta["config"] == "deadbeef" and meta["p"] == "2"

    def test_binary_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((3, 9))
        path = tmp_path / "a.matb"
        write_matrix(path, a, meta={"k": "v"}, binary=True)
        b, meta = read_matrix(path)
        np.testing.assert_array_equal(a, b)
        assert meta == {"k": "v"}

    def test_vector_becomes_row(self, tmp_path):
        path = tmp_path / "v.mat"
        write_matrix(path, np.array([1.0, 2.0, 3.0]))
        b, _ = read_matrix(path)
        assert b.shape == (1, 3)

    def test_header_errors(self, tmp_path):
        bad = tmp_path / "bad.mat"
        bad.write_text("nonsense 2 2\n1 2\n3 4\n")
        with pytest.raises(MatrixFormatError):
            read_matrix(bad)
        short = tmp_path / "short.mat"
        short.write_text("matrix 2 2\n1 2 3\n")
        with pytest.raises(MatrixFormatError, match="expected 4 entries"):
            read_matrix(short)

    def test_truncated_binary(self, tmp_path):
        path = tmp_path / "t.matb"
        write_matrix(path, np.ones((4, 4)), binary=True)
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(MatrixFormatError, match="truncated"):
            read_matrix(path)


class TestConfig:
    def test_parse_and_hash_stability(self):
        c1 = parse_config_text(BASE_CFG)
        c2 = parse_config_text(BASE_CFG)
        assert c1.config_hash == c2.config_hash
        assert c1.p == 2 and c1.nx == 2 and c1.dt == 1e-5 and c1.seed == 3
        assert c1.regime.value == "dirichlet_weak"
        c3 = parse_config_text(BASE_CFG.replace("seed = 3", "seed = 4"))
        assert c3.config_hash != c1.config_hash

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text(BASE_CFG + "\nwhatever = 1\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config_text(BASE_CFG + "\n[extra]\nx = 1\n")

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            parse_config_text(BASE_CFG.replace("dt = 1e-5", "dt = fast"))
        with pytest.raises(ConfigError):
            parse_config_text(BASE_CFG.replace("regime = dirichlet_weak",
                                               "regime = robin"))
        with pytest.raises(ConfigError):
            parse_config_text(BASE_CFG.replace("kind = cartesian", "kind = hex"))

    def test_periodic_needs_axes_or_file(self):
        txt = BASE_CFG.replace("regime = dirichlet_weak", "regime = periodic")
        with pytest.raises(ConfigError, match="periodic"):
            parse_config_text(txt)
        ok = txt.replace("kind = cartesian", "kind = perturbed") + "\n"
        ok = ok.replace("[discretization]", "periodic = xy\n\n[discretization]")
        cfg = parse_config_text(ok)
        assert cfg.periodic_axes == "xy"

    def test_mesh_path_resolved_relative_to_config(self, tmp_path):
        sub = tmp_path / "cfgs"
        sub.mkdir()
        (sub / "m.mesh").write_text("quadmesh 0 0 1\n")
        cfg_path = sub / "exp.cfg"
        cfg_path.write_text("""
[mesh]
kind = file
path = m.mesh
[run]
regime = neumann
dt = 1e-4
n_steps = 1
""")
        cfg = load_config(cfg_path)
        assert cfg.mesh_path == str((sub / "m.mesh").resolve())

    def test_levels_parsing(self):
        cfg = parse_config_text(BASE_CFG + "\n[scaling]\nlevels = 4x4, 8x8, 16x16\n")
        assert cfg.scaling_levels == ((4, 4), (8, 8), (16, 16))
        with pytest.raises(ConfigError):
            parse_config_text(BASE_CFG + "\n[scaling]\nlevels = 4by4\n")

    def test_checkpoint_and_row_lists(self):
        cfg = parse_config_text(
            BASE_CFG + "\n[outputs]\nrow_indices = 3, 5\nerror_checkpoints = 10,100\n")
        assert cfg.row_indices == (3, 5)
        assert cfg.error_checkpoints == (10, 100)
