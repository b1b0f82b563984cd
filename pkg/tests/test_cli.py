import json
import subprocess
import sys

import pytest

from litedet import (WeightStore, graph_cost, init_weights, load_fixture, load_graph_file,
                     load_tensor, save_tensor, save_weights)
from litedet.cli import main, seeded_input
from litedet.fixtures import fixture_path

HEADER = "pred_cx,pred_cy,pred_w,pred_h,gt_cx,gt_cy,gt_w,gt_h\n"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def boxes(tmp_path):
    def write(*rows):
        p = tmp_path / "boxes.csv"
        p.write_text(HEADER + "".join(",".join(map(str, r)) + "\n" for r in rows))
        return p
    return write


class TestAnalyze:
    def test_table_total_matches_library(self, capsys):
        code, out, _ = run(capsys, "analyze", "--graph", "improved-lite.json",
                           "--input-shape", "1x3x256x256", "--format", "table")
        r = graph_cost(load_fixture("improved-lite"), (1, 3, 256, 256))
        total = out.strip().splitlines()[-1].split()
        assert code == 0 and total[:3] == ["TOTAL", str(r.total_params), str(r.total_macs)]

    def test_json_to_file(self, capsys, tmp_path):
        out = tmp_path / "r.json"
        code, _, _ = run(capsys, "analyze", "--graph", fixture_path("baseline-lite"),
                         "--format", "json", "--out", out)
        assert code == 0 and json.loads(out.read_text())["total_params"] == 475_630

    def test_empty_graph(self, capsys, tmp_path):
        p = tmp_path / "empty.json"
        p.write_text('{"nodes": [], "outputs": []}')
        code, out, _ = run(capsys, "analyze", "--graph", p, "--format", "json")
        d = json.loads(out)
        assert code == 0 and d["total_params"] == 0 and d["total_macs"] == 0

    def test_malformed_json(self, capsys, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"nodes": [')
        code, _, err = run(capsys, "analyze", "--graph", p)
        assert code == 2 and "parse error" in err

    def test_invalid_graph_names_node(self, capsys, tmp_path):
        d = load_fixture("improved-lite").to_dict()
        d["nodes"][3]["attrs"]["c_in"] = 30
        p = tmp_path / "g.json"
        p.write_text(json.dumps(d))
        code, _, err = run(capsys, "analyze", "--graph", p)
        assert code == 2 and "'d3'" in err

    def test_missing_graph(self, capsys, tmp_path):
        assert run(capsys, "analyze", "--graph", tmp_path / "nope.json")[0] == 2


class TestForward:
    def test_dumps_deterministic(self, capsys, tmp_path):
        for d in ("a", "b"):
            code, out, _ = run(capsys, "forward", "--graph", "improved-lite", "--seed", 7,
                               "--input-shape", "1x3x256x256", "--out-dir", tmp_path / d)
            assert code == 0
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == sorted(f"head__{k}{p}.t4f" for k in ("cls", "box") for p in range(3))
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert "head/cls0: 1x6x32x32" in out and "head/cls2: 1x6x8x8" in out

    def test_named_nodes_and_input_file(self, capsys, tmp_path):
        x = seeded_input((1, 3, 64, 64), 3)
        save_tensor(tmp_path / "x.t4f", x)
        code, out, _ = run(capsys, "forward", "--graph", "baseline-lite", "--input", tmp_path / "x.t4f",
                           "--nodes", "stem", "--out-dir", tmp_path / "o")
        assert code == 0 and out.startswith("stem: 1x16x32x32")
        assert load_tensor(tmp_path / "o" / "stem.t4f").shape == (1, 16, 32, 32)

    def test_wrong_channels(self, capsys):
        code, _, err = run(capsys, "forward", "--graph", "improved-lite", "--input-shape", "1x4x64x64")
        assert code == 2 and "channels" in err

    def test_missing_weight_key(self, capsys, tmp_path):
        g = load_fixture("improved-lite")
        arrays = init_weights(g, 0).arrays()
        del arrays["d4.primary.weight"]
        save_weights(WeightStore.from_arrays(arrays), tmp_path / "w.ldw")
        code, _, err = run(capsys, "forward", "--graph", "improved-lite", "--weights", tmp_path / "w.ldw",
                           "--input-shape", "1x3x64x64")
        assert code == 2 and "d4.primary.weight" in err


class TestLoss:
    def test_identical_and_worked(self, capsys, boxes):
        p = boxes((5, 5, 2, 3, 5, 5, 2, 3), (1, 1, 2, 2, 2, 2, 2, 2))
        code, out, _ = run(capsys, "loss", "--boxes", p, "--img-w", 10, "--img-h", 10)
        lines = out.strip().splitlines()
        assert code == 0 and lines[0] == "row,value,loss"
        assert lines[1] == "1,1.0,0.0"
        assert float(lines[2].split(",")[1]) == pytest.approx(0.122857, abs=1e-6)
        assert lines[-1].startswith("mean,,")

    def test_iou_disjoint(self, capsys, boxes):
        p = boxes((1, 1, 2, 2, 50, 50, 2, 2))
        code, out, _ = run(capsys, "loss", "--boxes", p, "--img-w", 100, "--img-h", 100, "--kind", "iou")
        assert code == 0 and out.splitlines()[1] == "1,0.0,1.0"

    def test_grad_columns(self, capsys, boxes):
        p = boxes((1, 1, 2, 2, 2, 2, 2, 2))
        code, out, _ = run(capsys, "loss", "--boxes", p, "--img-w", 10, "--img-h", 10, "--grad")
        assert code == 0 and out.splitlines()[0].endswith("grad_w,grad_h")
        assert len(out.splitlines()[1].split(",")) == 7

    @pytest.mark.parametrize("row", ["1,1,2,2,2,2,2", "1,1,2,x,2,2,2,2", "1,1,0,2,2,2,2,2"])
    def test_malformed_row(self, capsys, tmp_path, row):
        p = tmp_path / "b.csv"
        p.write_text(HEADER + "1,1,2,2,1,1,2,2\n" + row + "\n")
        code, _, err = run(capsys, "loss", "--boxes", p, "--img-w", 10, "--img-h", 10)
        assert code == 2 and "row 2 (line 3)" in err

    def test_bad_ratio_flag(self, capsys, boxes):
        p = boxes((1, 1, 2, 2, 2, 2, 2, 2))
        assert run(capsys, "loss", "--boxes", p, "--img-w", 10, "--img-h", 10, "--ratio", 2)[0] == 2


class TestGradcheck:
    def test_passes(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--samples", 500, "--eps", 1e-4)
        err = float(out.split("max_rel_err=")[1])
        assert code == 0 and "samples=500" in out and err < 1e-4

    def test_zero_samples(self, capsys):
        code, _, err = run(capsys, "gradcheck", "--samples", 0)
        assert code == 0 and "vacuous" in err

    def test_corrupt(self, capsys):
        assert run(capsys, "gradcheck", "--samples", 20, "--corrupt-gradient")[0] == 1


class TestPrune:
    def test_identity(self, capsys, tmp_path):
        w = init_weights(load_fixture("improved-lite"), 0)
        save_weights(w, tmp_path / "w.ldw")
        code, out, _ = run(capsys, "prune", "--graph", "improved-lite", "--weights", tmp_path / "w.ldw",
                           "--target-speedup", 1.0, "--out-dir", tmp_path / "o")
        assert code == 0
        assert (tmp_path / "o" / "pruned-weights.ldw").read_bytes() == (tmp_path / "w.ldw").read_bytes()
        assert (tmp_path / "o" / "pruned-graph.json").read_text() == load_fixture("improved-lite").to_json()
        total = [l for l in out.splitlines() if l.startswith("TOTAL")][0].split()
        assert total[3] == "+0" and total[7] == "+0"

    def test_target_1_5(self, capsys, tmp_path):
        code, out, _ = run(capsys, "prune", "--graph", "improved-lite", "--target-speedup", 1.5,
                           "--tolerance", 0.02, "--out-dir", tmp_path)
        ratio = float(out.split("achieved_mac_ratio=")[1].split()[0])
        assert code == 0 and 1.47 <= ratio <= 1.53
        g = load_graph_file(tmp_path / "pruned-graph.json")
        code, _, _ = run(capsys, "forward", "--graph", tmp_path / "pruned-graph.json",
                         "--weights", tmp_path / "pruned-weights.ldw", "--input-shape", "1x3x64x64")
        assert code == 0 and graph_cost(g).total_macs < graph_cost(load_fixture("improved-lite")).total_macs

    def test_unreachable_warns(self, capsys, tmp_path):
        code, out, _ = run(capsys, "prune", "--graph", "improved-lite", "--target-speedup", 500,
                           "--out-dir", tmp_path)
        assert code == 0 and "warning:" in out

    def test_below_one(self, capsys, tmp_path):
        code, _, err = run(capsys, "prune", "--graph", "improved-lite", "--target-speedup", 0.5,
                           "--out-dir", tmp_path)
        assert code == 2 and ">= 1" in err


class TestCompare:
    @pytest.fixture
    def reports(self, tmp_path, capsys):
        for name in ("baseline-lite", "improved-lite"):
            main(["analyze", "--graph", name, "--format", "json", "--out", str(tmp_path / f"{name}.json")])
        capsys.readouterr()
        return tmp_path / "baseline-lite.json", tmp_path / "improved-lite.json"

    def test_identical(self, capsys, reports):
        code, out, _ = run(capsys, "compare", reports[0], reports[0], "--format", "json")
        d = json.loads(out)
        assert code == 0 and all(r["d_params"] == 0 and r["d_macs"] == 0 for r in d["rows"])

    def test_baseline_vs_improved(self, capsys, reports):
        code, out, _ = run(capsys, "compare", *reports, "--format", "json")
        t = json.loads(out)["total"]
        assert code == 0 and t["d_params"] < 0 and t["d_macs"] < 0

    def test_shape_mismatch(self, capsys, reports, tmp_path):
        main(["analyze", "--graph", "improved-lite", "--input-shape", "1x3x128x128", "--format", "json",
              "--out", str(tmp_path / "small.json")])
        assert run(capsys, "compare", reports[1], tmp_path / "small.json")[0] == 2

    def test_missing_file(self, capsys, reports, tmp_path):
        assert run(capsys, "compare", reports[0], tmp_path / "missing.json")[0] == 2


def test_usage_errors(capsys):
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "analyze")[0] == 2
    assert run(capsys, "analyze", "--graph", "improved-lite", "--input-shape", "3x256")[0] == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "litedet", "analyze", "--graph", "improved-lite"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "TOTAL" in r.stdout
