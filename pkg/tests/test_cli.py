import csv
import json

import numpy as np
import pytest

from dimquant import Tensor2D, npy_write
from dimquant.cli import DEFAULT_GRID, load_manifest, main, run_ablation

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

SYNTH_ARGS = ["--oc", "24", "--ic", "24", "--tokens", "32", "--outliers", "4"]


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared pipeline run: synth 2 layers, quantize rtn/ada, quantize again."""
    root = tmp_path_factory.mktemp("cli_ws")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--layers", "2", *SYNTH_ARGS]) == 0
    q1, q2 = root / "q1", root / "q2"
    args = ["quantize", "--manifest", str(data / "manifest.json"),
            "--method", "rtn", "--dim", "ada", "--wbits", "3", "--groupsize", "8"]
    assert main([*args, "--out", str(q1)]) == 0
    assert main([*args, "--out", str(q2)]) == 0
    return {"root": root, "data": data, "q1": q1, "q2": q2}


class TestSynth:
    def test_outputs(self, ws):
        data = ws["data"]
        for name in ("layer000_w.npy", "layer000_x.npy", "layer001_w.npy",
                     "manifest.json", "synth_info.json"):
            assert (data / name).exists()
        layers = load_manifest(data / "manifest.json")
        assert [e["id"] for e in layers] == ["layer000", "layer001"]
        info = json.loads((data / "synth_info.json").read_text())
        assert info["layers"][0]["seed"] == 0
        assert info["layers"][1]["seed"] == 1
        assert len(info["layers"][0]["outlier_idx"]) == 4

    def test_manifest_paths_resolve_from_elsewhere(self, ws):
        # relative npy paths must resolve against the manifest directory
        layers = load_manifest(ws["data"] / "manifest.json")
        from dimquant import npy_read

        assert npy_read(layers[0]["weight_npy"]).shape == (24, 24)

    def test_bad_size_rejected(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "x"), "--oc", "0"]) == 1


class TestQuantize:
    def test_artifacts_and_reports(self, ws):
        q1 = ws["q1"]
        for name in ("layer000.adim", "layer001.adim", "layer000.report.json",
                     "summary.json", "errors.png"):
            assert (q1 / name).exists()
        assert (q1 / "errors.png").read_bytes()[:8] == PNG_MAGIC
        summary = json.loads((q1 / "summary.json").read_text())
        assert summary["layers"] == 2 and summary["quantized"] == 2
        assert summary["method"] == "rtn" and summary["mode"] == "ada"
        assert summary["failures"] == []
        assert sum(summary["chosen_dims"].values()) == 2
        assert summary["error_savings_ratio"] >= 1.0

    def test_rerun_byte_identical(self, ws):
        for name in ("layer000.adim", "layer001.adim"):
            assert (ws["q1"] / name).read_bytes() == (ws["q2"] / name).read_bytes()

    def test_report_structure(self, ws):
        doc = json.loads((ws["q1"] / "layer000.report.json").read_text())
        assert doc["layer_id"] == "layer000"
        assert doc["error"] == min(doc["search"]["err_oc"], doc["search"]["err_ic"])
        assert doc["search"]["chosen"] in ("oc", "ic")
        assert doc["search"]["quantized_forward_passes"] == 2

    def test_gptq_ada_pipeline(self, ws, tmp_path):
        out = tmp_path / "g"
        rc = main(["quantize", "--manifest", str(ws["data"] / "manifest.json"),
                   "--out", str(out), "--method", "gptq", "--dim", "ada",
                   "--wbits", "3", "--groupsize", "8"])
        assert rc == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["quantized"] == 2
        doc = json.loads((out / "layer000.report.json").read_text())
        assert "err_gptq" in doc["search"]

    def test_fixed_dim_runs(self, ws, tmp_path):
        for dim in ("oc", "ic"):
            out = tmp_path / dim
            rc = main(["quantize", "--manifest", str(ws["data"] / "manifest.json"),
                       "--out", str(out), "--dim", dim, "--groupsize", "full"])
            assert rc == 0
            summary = json.loads((out / "summary.json").read_text())
            assert summary["chosen_dims"][dim] == 2
            assert summary["group_size"] == 0

    def test_missing_layer_file_is_io_exit_but_rest_written(self, ws, tmp_path):
        data = ws["data"]
        manifest = {"layers": [
            {"id": "gone", "weight_npy": "missing_w.npy", "calib_npy": "layer000_x.npy"},
            {"id": "fine", "weight_npy": str(data / "layer000_w.npy"),
             "calib_npy": str(data / "layer000_x.npy")},
        ]}
        mpath = tmp_path / "manifest.json"
        mpath.write_text(json.dumps(manifest))
        out = tmp_path / "out"
        rc = main(["quantize", "--manifest", str(mpath), "--out", str(out)])
        assert rc == 3
        assert (out / "fine.adim").exists()
        assert not (out / "gone.adim").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["quantized"] == 1
        assert summary["failures"][0]["kind"] == "io"

    def test_rtn_with_act_order_rejected(self, ws):
        rc = main(["quantize", "--manifest", str(ws["data"] / "manifest.json"),
                   "--out", "/tmp/unused", "--method", "rtn", "--act-order"])
        assert rc == 1

    def test_gptq_oc_act_order_without_static_rejected(self, ws):
        rc = main(["quantize", "--manifest", str(ws["data"] / "manifest.json"),
                   "--out", "/tmp/unused", "--method", "gptq", "--dim", "oc",
                   "--act-order"])
        assert rc == 1

    def test_static_groups_per_ic_rejected(self, ws):
        rc = main(["quantize", "--manifest", str(ws["data"] / "manifest.json"),
                   "--out", "/tmp/unused", "--method", "gptq", "--dim", "ic",
                   "--act-order", "--static-groups"])
        assert rc == 1

    def test_missing_manifest_is_io_exit(self, tmp_path):
        rc = main(["quantize", "--manifest", str(tmp_path / "absent.json"),
                   "--out", str(tmp_path / "o")])
        assert rc == 3

    def test_malformed_manifest_is_config_exit(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text("{not json")
        assert main(["quantize", "--manifest", str(p), "--out", str(tmp_path / "o")]) == 1
        p.write_text(json.dumps({"weights": []}))
        assert main(["quantize", "--manifest", str(p), "--out", str(tmp_path / "o")]) == 1

    def test_bad_wbits_is_config_exit(self, ws):
        rc = main(["quantize", "--manifest", str(ws["data"] / "manifest.json"),
                   "--out", "/tmp/unused", "--wbits", "5"])
        assert rc == 1

    def test_bad_groupsize_is_config_exit(self, ws):
        base = ["quantize", "--manifest", str(ws["data"] / "manifest.json"),
                "--out", "/tmp/unused"]
        assert main([*base, "--groupsize", "0"]) == 1
        assert main([*base, "--groupsize", "abc"]) == 1


class TestEval:
    def test_matches_quantize_reports_exactly(self, ws, tmp_path, capsys):
        out = tmp_path / "eval.json"
        rc = main(["eval", "--manifest", str(ws["data"] / "manifest.json"),
                   "--artifacts", str(ws["q1"]), "--out", str(out)])
        assert rc == 0
        capsys.readouterr()
        doc = json.loads(out.read_text())
        assert [r["layer_id"] for r in doc["layers"]] == ["layer000", "layer001"]
        for row in doc["layers"]:
            report = json.loads(
                (ws["q1"] / f"{row['layer_id']}.report.json").read_text()
            )
            assert row["recon_error"] == report["error"]

    def test_missing_artifact_is_io_exit(self, ws, tmp_path):
        rc = main(["eval", "--manifest", str(ws["data"] / "manifest.json"),
                   "--artifacts", str(tmp_path)])
        assert rc == 3


class TestAblate:
    def test_default_grid(self, ws, tmp_path):
        out = tmp_path / "ab"
        rc = main(["ablate", "--manifest", str(ws["data"] / "manifest.json"),
                   "--out", str(out), "--wbits", "3", "--groupsize", "8"])
        assert rc == 0
        with open(out / "ablation.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == len(DEFAULT_GRID) * 2
        keys = [(r["method"], r["mode"], r["act_order"], r["static_groups"], r["layer_id"])
                for r in rows]
        assert keys == sorted(keys)
        combos = {(r["method"], r["mode"], r["act_order"], r["static_groups"])
                  for r in rows}
        assert combos == {(m, d, str(a), str(s)) for m, d, a, s in DEFAULT_GRID}
        for r in rows:
            assert float(r["recon_error"]) >= 0
            if r["mode"] == "ada":
                assert r["chosen_dim"] in ("oc", "ic")
            else:
                assert r["chosen_dim"] == ""
        assert (out / "ablation.png").read_bytes()[:8] == PNG_MAGIC

    def test_empty_manifest_header_only(self, tmp_path):
        m = tmp_path / "manifest.json"
        m.write_text(json.dumps({"layers": []}))
        out = tmp_path / "ab"
        assert main(["ablate", "--manifest", str(m), "--out", str(out)]) == 0
        text = (out / "ablation.csv").read_text().strip().splitlines()
        assert len(text) == 1
        assert text[0].startswith("layer_id,method,mode")

    def test_single_row_override(self, ws, tmp_path):
        out = tmp_path / "ab"
        rc = main(["ablate", "--manifest", str(ws["data"] / "manifest.json"),
                   "--out", str(out), "--method", "gptq", "--dim", "oc",
                   "--act-order", "--static-groups", "--groupsize", "8"])
        assert rc == 0
        with open(out / "ablation.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2
        assert all(r["method"] == "gptq" and r["act_order"] == "True" for r in rows)

    def test_partial_override_rejected(self, ws, tmp_path):
        base = ["ablate", "--manifest", str(ws["data"] / "manifest.json"),
                "--out", str(tmp_path / "ab")]
        assert main([*base, "--method", "gptq"]) == 1
        assert main([*base, "--dim", "oc"]) == 1
        assert main([*base, "--act-order"]) == 1

    def test_static_per_ic_row_rejected(self, ws, tmp_path):
        rc = main(["ablate", "--manifest", str(ws["data"] / "manifest.json"),
                   "--out", str(tmp_path / "ab"), "--method", "gptq",
                   "--dim", "ic", "--static-groups"])
        assert rc == 1

    def test_run_ablation_rejects_rtn_act_order_rows(self, ws):
        layers = load_manifest(ws["data"] / "manifest.json")
        from dimquant import ConfigError

        with pytest.raises(ConfigError):
            run_ablation(layers, grid=(("rtn", "oc", True, False),))


class TestBenchInspect:
    def test_bench_json(self, ws, tmp_path, capsys):
        out = tmp_path / "bench.json"
        rc = main(["bench", "--artifact", str(ws["q1"] / "layer000.adim"),
                   "--reps", "2", "--out", str(out)])
        assert rc == 0
        capsys.readouterr()
        doc = json.loads(out.read_text())
        assert doc["repetitions"] == 2
        assert set(doc["ns_per_element"]) == {"stream", "transposed"}

    def test_bench_bad_reps(self, ws):
        rc = main(["bench", "--artifact", str(ws["q1"] / "layer000.adim"),
                   "--reps", "0"])
        assert rc == 1

    def test_inspect(self, ws, capsys):
        rc = main(["inspect", "--artifact", str(ws["q1"] / "layer000.adim")])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["magic"] == "ADIM" and doc["version"] == 1
        assert doc["oc"] == 24 and doc["ic"] == 24
        assert doc["bits"] == 3 and doc["group_size"] == 8
        assert doc["dim"] in ("oc", "ic")

    def test_inspect_corrupt_artifact_is_io_exit(self, tmp_path):
        p = tmp_path / "bad.adim"
        p.write_bytes(b"garbage")
        assert main(["inspect", "--artifact", str(p)]) == 3


class TestParser:
    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_no_command(self):
        assert main([]) == 1

    def test_numeric_failure_exit_code(self, tmp_path):
        # constant activations on many channels make the damped Hessian
        # rank-1: the factorization fails and the run must exit 2
        t = np.ones((8, 6), dtype=np.float32)
        w = np.random.default_rng(0).standard_normal((4, 6)).astype(np.float32)
        npy_write(tmp_path / "w.npy", Tensor2D(w))
        npy_write(tmp_path / "x.npy", Tensor2D(t))
        m = tmp_path / "manifest.json"
        m.write_text(json.dumps({"layers": [
            {"id": "sing", "weight_npy": "w.npy", "calib_npy": "x.npy"}]}))
        rc = main(["quantize", "--manifest", str(m), "--out", str(tmp_path / "o"),
                   "--method", "gptq", "--dim", "oc", "--groupsize", "full",
                   "--damp", "0.0"])
        assert rc == 2
