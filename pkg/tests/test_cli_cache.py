"""
Tests for the field cache, config loading, artifact writers and the command line
"""

import json
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.cli import EXIT_COMPUTE, EXIT_CONFIG, EXIT_OK, main  # noqa: E402
from src.core.ergodic_stats import EstimateSeries  # noqa: E402
from src.utils import cache  # noqa: E402
from src.utils.config import ExperimentConfig, defaults_toml, load_config  # noqa: E402
from src.utils.errors import ConfigInvalid, CorruptCache  # noqa: E402
from src.utils.io import read_series, write_json, write_series  # noqa: E402
from src.utils.parallel import resolve_threads  # noqa: E402

FP_A = cache.field_fingerprint(s=0.05, grid_n=4)
FP_B = cache.field_fingerprint(s=0.10, grid_n=4)


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for key in ("DATORUS_OUTPUT_DIR", "DATORUS_CACHE_DIR", "DATORUS_THREADS"):
        monkeypatch.delenv(key, raising=False)


@pytest.fixture
def grid():
    return np.random.default_rng(0).normal(size=(4, 4, 4, 3))


class TestFieldCache:
    def test_roundtrip_is_bit_identical(self, grid, tmp_path):
        out = cache.cache_roundtrip(grid, tmp_path / "u.bin", fingerprint=FP_A)
        assert out.shape == grid.shape
        assert np.array_equal(out, grid)

    def test_layout(self, grid, tmp_path):
        path = cache.write_field(tmp_path / "u.bin", grid, cache.KIND_DISPLACEMENT, FP_A)
        raw = path.read_bytes()
        assert raw[:8] == cache.MAGIC
        assert len(raw) == cache.HEADER.itemsize + grid.size * 8
        first = np.frombuffer(raw[cache.HEADER.itemsize:cache.HEADER.itemsize + 16], dtype="<f8")
        # channel 0, x varies fastest
        assert np.array_equal(first, [grid[0, 0, 0, 0], grid[1, 0, 0, 0]])

    def test_truncated(self, grid, tmp_path):
        path = cache.write_field(tmp_path / "u.bin", grid, cache.KIND_DISPLACEMENT, FP_A)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(CorruptCache):
            cache.read_field(path, cache.KIND_DISPLACEMENT, FP_A)

    def test_truncated_at_channel_boundary(self, grid, tmp_path):
        path = cache.write_field(tmp_path / "u.bin", grid, cache.KIND_DISPLACEMENT, FP_A)
        path.write_bytes(path.read_bytes()[:-grid[..., 0].size * 8])
        with pytest.raises(CorruptCache):
            cache.read_field(path, cache.KIND_DISPLACEMENT, FP_A)

    def test_channel_count_follows_kind(self, grid, tmp_path):
        with pytest.raises(ValueError):
            cache.write_field(tmp_path / "f.bin", grid, cache.KIND_FRAMES, FP_A)
        frames = np.zeros((4, 4, 4, cache.CHANNELS[cache.KIND_FRAMES]))
        path = cache.write_field(tmp_path / "f.bin", frames, cache.KIND_FRAMES, FP_A)
        assert cache.read_field(path, cache.KIND_FRAMES, FP_A).shape == frames.shape

    def test_version_rejected(self, grid, tmp_path, monkeypatch):
        path = cache.write_field(tmp_path / "u.bin", grid, cache.KIND_DISPLACEMENT, FP_A)
        monkeypatch.setattr(cache, "VERSION", cache.VERSION + 1)
        with pytest.raises(CorruptCache):
            cache.read_field(path, cache.KIND_DISPLACEMENT, FP_A)

    def test_wrong_kind(self, grid, tmp_path):
        path = cache.write_field(tmp_path / "u.bin", grid, cache.KIND_DISPLACEMENT, FP_A)
        with pytest.raises(CorruptCache):
            cache.read_field(path, cache.KIND_FRAMES, FP_A)

    def test_foreign_fingerprint(self, grid, tmp_path):
        path = cache.write_field(tmp_path / "u.bin", grid, cache.KIND_DISPLACEMENT, FP_A)
        assert cache.read_field(path, cache.KIND_DISPLACEMENT, FP_B) is None

    def test_load_or_compute_keeps_foreign_cache(self, grid, tmp_path):
        path = tmp_path / "u.bin"
        cache.write_field(path, grid, cache.KIND_DISPLACEMENT, FP_A)
        calls = []

        def _compute():
            calls.append(1)
            return grid * 2.0, {"residual": 1e-7}

        values, meta = cache.load_or_compute(path, cache.KIND_DISPLACEMENT, FP_B, _compute)
        assert np.array_equal(values, grid * 2.0)
        assert np.array_equal(cache.read_field(path, cache.KIND_DISPLACEMENT, FP_A), grid)

        again, meta_again = cache.load_or_compute(path, cache.KIND_DISPLACEMENT, FP_B, _compute)
        assert len(calls) == 1
        assert np.array_equal(again, grid * 2.0)
        assert meta_again == {"residual": 1e-7}

    def test_bad_shape(self, tmp_path):
        with pytest.raises(ValueError):
            cache.write_field(tmp_path / "u.bin", np.zeros((4, 4, 4)), cache.KIND_DISPLACEMENT, FP_A)


class TestConfig:
    def test_defaults(self):
        config = load_config()
        assert config.power == 3
        assert config.s_values == [0.05]
        assert config.coupling.lam == 0.05

    def test_fingerprint_is_stable(self):
        assert load_config().fingerprint() == load_config().fingerprint()
        assert load_config(seed=1).fingerprint() != load_config().fingerprint()
        assert len(load_config().fingerprint_bytes()) == 32

    def test_toml_file(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text('s = [0.0, 0.05]\nseed = 9\n\n[coupling]\nlambda = 0.02\n')
        config = load_config(str(path))
        assert config.s_values == [0.0, 0.05]
        assert config.seed == 9
        assert config.coupling.lam == 0.02

    @pytest.mark.parametrize(
        "text",
        ["unknown_key = 1\n", "grid_n = 2\n", "s = -0.1\n", "matrix = [[1, 0], [0, 1]]\n", "seed = \n"],
    )
    def test_invalid(self, tmp_path, text):
        path = tmp_path / "bad.toml"
        path.write_text(text)
        with pytest.raises(ConfigInvalid):
            load_config(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigInvalid):
            load_config(str(tmp_path / "missing.toml"))

    def test_env_override(self, monkeypatch, tmp_path):
        monkeypatch.setenv("DATORUS_OUTPUT_DIR", str(tmp_path))
        assert load_config().output_dir == str(tmp_path)

    def test_defaults_toml_reloads(self):
        data = tomllib.loads(defaults_toml())
        assert ExperimentConfig.model_validate(data).fingerprint() == ExperimentConfig().fingerprint()

    def test_unknown_observable(self):
        with pytest.raises(ConfigInvalid):
            load_config().observable("nope")

    def test_nodegrid_observable_is_seeded(self):
        config = load_config(observables=[{"name": "grid", "kind": "nodegrid", "grid_n": 4}])
        a, b = config.observable("grid"), config.observable("grid")
        assert np.array_equal(a.values, b.values)
        assert a.sup_norm <= 1.0


class TestArtifacts:
    def test_json_is_stamped(self, tmp_path):
        path = write_json(tmp_path / "r.json", {"x": np.float64(1.5), "v": np.arange(2)}, "abc", 4)
        body = json.loads(path.read_text())
        assert body == {"x": 1.5, "v": [0, 1], "config_fingerprint": "abc", "seed": 4}

    def test_series_csv(self, tmp_path):
        series = EstimateSeries(np.arange(3), np.array([0.5, 0.25, 1 / 3]), np.zeros(3), 10, 2, "corr")
        path = write_series(tmp_path / "corr.csv", series, "abc", 4)
        back = read_series(path)
        assert np.array_equal(back.estimates, series.estimates)
        assert back.name == "corr"
        assert back.sample_count == 10


class TestCommandLine:
    def test_print_defaults(self, capsys):
        assert main(["--print-defaults"]) == EXIT_OK
        assert "[coupling]" in capsys.readouterr().out

    def test_thread_default(self, monkeypatch):
        assert resolve_threads() == 1
        assert resolve_threads(4) == 4
        monkeypatch.setenv("DATORUS_THREADS", "3")
        assert resolve_threads() == 3

    def test_missing_subcommand(self):
        assert main([]) == EXIT_CONFIG

    def test_bad_config(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("unknown_key = 1\n")
        assert main(["spectrum", "--config", str(path), "--output", str(tmp_path)]) == EXIT_CONFIG

    def test_non_unimodular_matrix(self, tmp_path):
        path = tmp_path / "det2.toml"
        path.write_text("matrix = [[2, 0, 0], [0, 1, 0], [0, 0, 1]]\n")
        assert main(["spectrum", "--config", str(path), "--output", str(tmp_path)]) == EXIT_COMPUTE

    def test_spectrum(self, tmp_path):
        out = tmp_path / "results"
        assert main(["spectrum", "--output", str(out), "--seed", "3", "--quiet"]) == EXIT_OK
        body = json.loads((out / "spectrum.json").read_text())
        assert body["det"] == -1
        assert body["seed"] == 3
        assert body["config_fingerprint"] == load_config(seed=3, output_dir=str(out), quiet=True).fingerprint()
        assert 0.0 <= body["markov_defect"] <= 1.0
