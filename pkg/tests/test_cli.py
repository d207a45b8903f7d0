import json

import numpy as np
import pytest
from shapes import fibonacci_sphere

from gpdf import io, sim
from gpdf.cli import main
from gpdf.render import CameraModel


@pytest.fixture
def sphere_model(tmp_path):
    io.write_cloud(tmp_path / "s.xyz", fibonacci_sphere(150))
    assert main(["fit", str(tmp_path / "s.xyz"), str(tmp_path / "m.json"), "--length-scale", "0.3"]) == 0
    return tmp_path / "m.json"


def read_table(path):
    return np.loadtxt(path, ndmin=2)


class TestCommands:
    def test_three_point_fit_and_query(self, tmp_path):
        X = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
        io.write_cloud(tmp_path / "p.xyz", X)
        io.write_cloud(tmp_path / "q.xyz", X[:1])
        assert main(["fit", str(tmp_path / "p.xyz"), str(tmp_path / "m.json"), "--sigma-y2", "1e-10"]) == 0
        assert main(["query", str(tmp_path / "m.json"), "--points", str(tmp_path / "q.xyz"),
                     "--out", str(tmp_path / "t.txt")]) == 0
        row = read_table(tmp_path / "t.txt")[0]
        assert abs(row[3]) < 1e-6
        assert abs(row[9]) < 1e-6

    def test_query_grid(self, sphere_model, tmp_path):
        out = tmp_path / "g.txt"
        assert main(["query", str(sphere_model), "--grid=-2,-2,-2,2,2,2,3", "--out", str(out)]) == 0
        t = read_table(out)
        assert t.shape == (27, 11)
        # the corner (2, 2, 2) is sqrt(12) - 1 from the unit sphere
        assert t[-1, 3] == pytest.approx(np.sqrt(12) - 1, abs=0.05)

    def test_fit_query_matches_library(self, sphere_model, tmp_path, rng):
        from gpdf.field import distance

        Q = rng.uniform(-1.5, 1.5, (10, 3))
        io.write_cloud(tmp_path / "q.xyz", Q)
        main(["query", str(sphere_model), "--points", str(tmp_path / "q.xyz"), "--out", str(tmp_path / "t.txt")])
        ref = distance(io.load_model(sphere_model), Q, 5)
        np.testing.assert_allclose(read_table(tmp_path / "t.txt")[:, 3], ref, rtol=1e-12)

    @pytest.mark.parametrize("mode", ["volumetric", "spheretrace"])
    def test_render(self, sphere_model, tmp_path, mode):
        io.write_manifest(tmp_path / "v.json", [CameraModel.look_at((3, 0, 0), (0, 0, 0), width=8, height=6)])
        out = tmp_path / mode
        assert main(["render", str(sphere_model), str(tmp_path / "v.json"), "--mode", mode,
                     "--out-dir", str(out), "--samples", "16"]) == 0
        assert io.read_ppm(out / "view_000.ppm").shape == (6, 8, 3)
        depth = io.read_pfm(out / "view_000_depth.pfm")
        assert depth[3, 4] == pytest.approx(2.0, abs=0.15)

    def test_downsample(self, tmp_path, rng, capsys):
        io.write_cloud(tmp_path / "c.xyz", rng.uniform(0, 1, (500, 3)))
        assert main(["downsample", str(tmp_path / "c.xyz"), str(tmp_path / "d.xyz"), "--voxel", "0.5",
                     "--mode", "eigen", "--with-sigma"]) == 0
        info = json.loads(capsys.readouterr().out)
        X, _, s = io.read_cloud(tmp_path / "d.xyz")
        assert info["n_out"] == len(X) == 40 and s.shape == (40,)

    def test_bench_reports_downsampled_count(self, tmp_path):
        out = tmp_path / "b.json"
        assert main(["bench-approx", "--methods", "nystrom", "--n-sweep", "3000", "--downsample", "0.1",
                     "--refs", "50", "--repeats", "1", "--out", str(out)]) == 0
        rec = json.loads(out.read_text())["results"][0]
        assert rec["n"] == 3000 and rec["n_train"] < 3000

    def test_nbv_and_touch(self, sphere_model, tmp_path):
        cams = [CameraModel.look_at(p, (0, 0, 0), width=8, height=6) for p in [(3, 0, 0), (0, 3, 0)]]
        io.write_manifest(tmp_path / "v.json", cams)
        assert main(["nbv", str(sphere_model), "--candidates", str(tmp_path / "v.json"), "--samples", "16",
                     "--out", str(tmp_path / "n.json")]) == 0
        res = json.loads((tmp_path / "n.json").read_text())
        assert res["best"] in (0, 1) and len(res["gains"]) == 2
        assert main(["touch", str(sphere_model), "--starts", "8", "--seed", "1", "--out", str(tmp_path / "t.json")]) == 0
        t = json.loads((tmp_path / "t.json").read_text())
        assert np.linalg.norm(t["point"]) == pytest.approx(1.0, abs=0.1)

    def test_explore_zero_budgets(self, tmp_path):
        cfg = {"scene": sim.sphere_scene(0.1).to_dict(), "budgets": {"views": 0, "touches": 0},
               "camera": {"width": 16, "height": 12}}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert main(["explore", str(tmp_path / "c.json"), "--log", str(tmp_path / "l.jsonl"),
                     "--model-out", str(tmp_path / "m.json")]) == 0
        assert len((tmp_path / "l.jsonl").read_text().splitlines()) == 1
        assert io.load_model(tmp_path / "m.json").n > 0


class TestExitCodes:
    def test_validation(self, tmp_path, capsys):
        assert main(["fit"]) == 2
        (tmp_path / "bad.xyz").write_text("1 2\n")
        assert main(["fit", str(tmp_path / "bad.xyz"), str(tmp_path / "m.json")]) == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "invalid"
        (tmp_path / "c.json").write_text('{"scene": null, "warp": 1}')
        assert main(["explore", str(tmp_path / "c.json")]) == 2

    def test_io(self, tmp_path):
        assert main(["fit", str(tmp_path / "missing.xyz"), str(tmp_path / "m.json")]) == 4

    def test_numeric(self, sphere_model):
        # a box away from the surface leaves no ascent start alive
        assert main(["touch", str(sphere_model), "--starts", "4", "--box", "5,5,5,6,6,6"]) == 3

    def test_help(self):
        assert main(["--help"]) == 0
