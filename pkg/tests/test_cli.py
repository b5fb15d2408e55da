import json
import subprocess
import sys

import pytest

from avsync.cli import main
from avsync.fixtures import make_fixture_set, write_fixture_manifest
from avsync.errors import ManifestError
from avsync.manifest import read_manifest, validate_manifest
from avsync.report import REPORT_FILE, TABLE_FILE, recompute_aggregate, strip_timestamp
from avsync.toy import save_toy_extractor

from test_features import ADAPTER


@pytest.fixture(scope="module")
def model_file(tmp_path_factory, trained_toy):
    path = tmp_path_factory.mktemp("model") / "toy.pt"
    save_toy_extractor(trained_toy, path)
    return str(path)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    return write_fixture_manifest(tmp_path_factory.mktemp("fx"), make_fixture_set(3, n_frames=40, seed=12))


def _evaluate(manifest, model_file, out, *extra):
    return main(["evaluate", "--manifest", str(manifest), "--model-ref", model_file, "--out", str(out), *extra])


def test_evaluate_writes_report_and_table(manifest, model_file, tmp_path):
    code = _evaluate(manifest, model_file, tmp_path, "--metrics", "AVS_u,AVS_m,AVS_v,LMD,LSE_C,LSE_D")
    assert code == 0
    report = json.loads((tmp_path / REPORT_FILE).read_text())
    assert report["schema_version"] == 1 and len(report["clips"]) == 3
    assert report["aggregate"]["AVS_v"]["mean"] == pytest.approx(1.0, abs=1e-6)
    assert report["aggregate"]["LMD"]["mean"] == 0.0
    # manifest landmarks give the tight crop; the toy must still see GT clips as in sync
    assert report["aggregate"]["AVS_u"]["mean"] > 0.9
    assert recompute_aggregate(report) == report["aggregate"]
    rows = (tmp_path / TABLE_FILE).read_text().splitlines()
    assert rows[0] == "clip_id,LMD,LSE_C,LSE_D,AVS_u,AVS_m,AVS_v" and rows[-1].startswith("mean,")
    meta = report["metadata"]
    assert meta["extractor_ids"] and meta["tool_version"] == "0.1.0" and "timestamp" in meta


def test_report_is_reproducible(manifest, model_file, tmp_path):
    for name in ("a", "b"):
        assert _evaluate(manifest, model_file, tmp_path / name, "--metrics", "AVS_u,AVS_v") == 0
    a, b = (json.loads((tmp_path / n / REPORT_FILE).read_text()) for n in ("a", "b"))
    assert json.dumps(strip_timestamp(a), sort_keys=True) == json.dumps(strip_timestamp(b), sort_keys=True)
    assert (tmp_path / "a" / TABLE_FILE).read_bytes() == (tmp_path / "b" / TABLE_FILE).read_bytes()


def test_workers_match_serial(manifest, model_file, tmp_path):
    _evaluate(manifest, model_file, tmp_path / "s")
    _evaluate(manifest, model_file, tmp_path / "p", "--workers", "3")
    a, b = (json.loads((tmp_path / n / REPORT_FILE).read_text()) for n in ("s", "p"))
    assert strip_timestamp(a) == strip_timestamp(b)


def test_partial_failure_exit_code(manifest, model_file, tmp_path):
    lines = manifest.read_text().splitlines()
    bad = json.loads(lines[0])
    bad["clip_id"], bad["video_path"] = "broken", "broken.npz"
    (manifest.parent / "broken.npz").write_bytes(b"not an archive")
    mixed = manifest.parent / "mixed.jsonl"
    mixed.write_text("\n".join(lines + [json.dumps(bad)]) + "\n")
    assert _evaluate(mixed, model_file, tmp_path) == 2
    report = json.loads((tmp_path / REPORT_FILE).read_text())
    status = {c["clip_id"]: c["status"] for c in report["clips"]}
    assert status["broken"] == "failed" and report["aggregate"]["AVS_u"]["n"] == 3


def test_config_errors(manifest, model_file, tmp_path):
    assert _evaluate(tmp_path / "missing.jsonl", model_file, tmp_path) == 1
    assert _evaluate(manifest, model_file, tmp_path, "--metrics", "FID") == 1
    no_gt = tmp_path / "no_gt.jsonl"
    no_gt.write_text(json.dumps({"clip_id": "x", "video_path": str(manifest.parent / "fx12-000.gt.npz")}) + "\n")
    assert _evaluate(no_gt, model_file, tmp_path, "--metrics", "AVS_v") == 1


def test_validate_manifest_diagnostics(manifest, tmp_path):
    bad = tmp_path / "bad.jsonl"
    good_line = manifest.read_text().splitlines()[0]
    rec = json.loads(good_line)
    rec = {k: (str(manifest.parent / v) if k.endswith("_path") else v) for k, v in rec.items()}
    bad.write_text("\n".join([
        json.dumps(rec),
        "{not json",
        json.dumps({"video_path": "x.npz"}),
        json.dumps({**rec, "colour": "red"}),
    ]) + "\n")
    diags = validate_manifest(bad)
    found = {(d.line, d.level, d.field) for d in diags}
    assert (2, "error", "record") in found
    assert (3, "error", "clip_id") in found and (3, "error", "video_path") in found
    assert (4, "warning", "colour") in found and (4, "warning", "clip_id") in found
    assert main(["validate-manifest", str(bad)]) == 1
    assert main(["validate-manifest", str(manifest)]) == 0


def test_read_manifest_resolves_relative_paths(manifest):
    records = read_manifest(manifest)
    assert all(r.video_path.is_absolute() or r.video_path.exists() for r in records)
    assert records[0].gt_landmarks_path.exists()
    partial = manifest.parent / "partial.jsonl"
    partial.write_text(json.dumps({"clip_id": "a", "video_path": "fx12-000.gt.npz"}) + "\n")
    with pytest.raises(ManifestError, match="gt_video_path"):
        read_manifest(partial, require=("gt_video_path",))


def test_probe_writes_sweep_and_plots(manifest, model_file, tmp_path):
    code = main(["probe", "--manifest", str(manifest), "--model-ref", model_file, "--out", str(tmp_path),
                 "--values=-4,0,4", "--metrics", "AVS_u,loss_unsupervised", "--gt-scan"])
    assert code == 0
    sweep = json.loads((tmp_path / "sweep_shift_px.json").read_text())
    assert {r["setting"] for r in sweep["records"]} == {-4, 0, 4}
    assert (tmp_path / "gt_similarity.json").exists()
    pngs = sorted(p.name for p in (tmp_path / "plots").glob("*.png"))
    assert "gt_similarity.png" in pngs and "sweep_shift_px_AVS_u.png" in pngs


def test_plot_rerenders_report(manifest, model_file, tmp_path):
    _evaluate(manifest, model_file, tmp_path)
    assert main(["plot", str(tmp_path / REPORT_FILE), "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "report_AVS_u.png").exists()


def test_make_fixtures(tmp_path):
    assert main(["make-fixtures", "--out", str(tmp_path), "--clips", "2", "--frames", "10"]) == 0
    assert len(read_manifest(tmp_path / "manifest.jsonl")) == 2


def test_external_adapter_end_to_end(manifest, tmp_path, monkeypatch):
    script = tmp_path / "adapter.py"
    script.write_text(ADAPTER)
    monkeypatch.setenv("AVSYNC_ADAPTER", f"{sys.executable} {script}")
    code = main(["evaluate", "--manifest", str(manifest), "--extractor", "avhubert", "--model-ref", "m",
                 "--out", str(tmp_path), "--metrics", "AVS_v"])
    assert code == 0
    report = json.loads((tmp_path / REPORT_FILE).read_text())
    assert report["metadata"]["extractor_ids"] == ["fake-external_avhubert"]
    assert report["aggregate"]["AVS_v"]["mean"] == pytest.approx(1.0, abs=1e-6)


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "avsync.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip() == "0.1.0"


def test_ablate_defaults_keep_protocol(monkeypatch, capsys):
    import avsync.experiments as experiments
    from avsync.harness import AblationResult

    seen = {}

    def fake(out, **kwargs):
        seen.update(kwargs, out=out)
        return AblationResult({"unsupervised": {"AVS_u": 0.5}}, {}, (0,), ())

    monkeypatch.setattr(experiments, "toy_ablation", fake)
    assert main(["ablate", "--out", "x", "--seeds", "0,1", "--steps", "5"]) == 0
    assert seen == {"out": "x", "seeds": (0, 1), "steps": 5, "fixture_seed": None}
    assert "AVS_u=0.5000" in capsys.readouterr().out
