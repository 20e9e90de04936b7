import json

import pytest

from refmar.errors import ConfigError
from refmar.harness import (
    ResultsStore, RunConfig, TableSpec, expand_grid, load_data, rank_marks, render_report,
    run_ablation, trend,
)

from conftest import MICRO_FOUNDATION

MICRO_PHANTOM = {"subjects_per_category": 2, "test_count": 2, "donor_subjects_per_category": 5}


@pytest.fixture()
def base(micro_cache):
    return RunConfig(N=4, r=2, allow_any_N=True, total_steps=3, ensemble_M=2, step_count=2, test_limit=2,
                     foundation=dict(MICRO_FOUNDATION), phantom=dict(MICRO_PHANTOM), cache_dir=str(micro_cache))


def test_run_config_validation_and_hash(base, tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_mapping({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig(conditioning_mode="x")
    with pytest.raises(ConfigError):
        RunConfig(ensemble_M=0)
    assert RunConfig(seeds=3).seeds == [3]
    moved = base.replace(cache_dir=str(tmp_path), data_dir=None)
    assert moved.config_hash("d") == base.config_hash("d")
    assert base.replace(N=8).config_hash("d") != base.config_hash("d")
    assert base.config_hash("d") != base.config_hash("e")
    shuffled = RunConfig.from_mapping(dict(reversed(list(base.to_dict().items()))))
    assert shuffled.config_hash("d") == base.config_hash("d")


def test_load_data_needs_one_source(base):
    with pytest.raises(ConfigError):
        load_data(base.replace(phantom=None))
    with pytest.raises(ConfigError):
        load_data(base.replace(data_dir="x"))


def test_expand_grid_order(base):
    cells = expand_grid({"N": [4, 8], "r": [1, 2], "conditioning_mode": ["none", "multi"]},
                        base.replace(seeds=[0, 1]))
    assert len(cells) == 16
    keys = [(c.N, c.r, c.conditioning_mode, c.seeds[0]) for c in cells]
    assert keys == sorted(keys, key=lambda k: (k[0], k[1], ["none", "multi"].index(k[2]), k[3]))
    with pytest.raises(ConfigError):
        expand_grid({"lr": [1]}, base)


def test_rank_marks_and_trend():
    assert rank_marks([1.0, 3.0, 3.0, 2.0], True) == ["", "best", "best", "second"]
    assert rank_marks([0.1, 0.2, None], False) == ["best", "second", ""]
    assert trend([16, 32, 64], [1, 2, 3], True) == "improves monotonically"
    assert trend([16, 32, 64], [1, 2, 3], False) == "worsens monotonically"
    assert trend([16, 32, 64], [1, 3, 2], True) == "non-monotone (flagged: worse at 64)"
    assert trend([16], [1], True) == "single point"
    assert trend([16, 32], [1, 1], True) == "flat"


def test_ablation_store_lifecycle(base, tmp_path):
    store = ResultsStore(tmp_path / "store")
    assert "No stored runs" in render_report(store)
    grid = {"r": [1, 2], "N": [4, 99]}  # N=99 exceeds the benchmark and must fail alone
    records = run_ablation(grid, base, store)
    status = {(r["config"]["N"], r["config"]["r"]): r["status"] for r in records}
    assert status == {(4, 1): "ok", (4, 2): "ok", (99, 1): "failed", (99, 2): "failed"}
    failed = next(r for r in records if r["status"] == "failed")
    assert "DataError" in failed["error"]
    ok = next(r for r in records if r["status"] == "ok")
    run_dir = store.root / ok["run_dir"]
    for name in ("train_log.jsonl", "checkpoint.npz", "report.csv", "run.json"):
        assert (run_dir / name).exists()
    assert len(list((run_dir / "restored").glob("*_restored.png"))) == 2
    assert json.loads((run_dir / "run.json").read_text())["config_hash"] == ok["config_hash"]
    assert len(list((store.root / "references").glob("*/*.csv"))) == 2

    # finished cells are skipped; failed ones are retried into a rerun directory
    n_before = len(store.records())
    again = run_ablation(grid, base, store)
    assert len(store.records()) == n_before + 2
    assert {r["config_hash"] for r in again} == {r["config_hash"] for r in records}
    assert any("rerun-" in r["run_dir"] for r in store.records()[n_before:])

    text = render_report(store, TableSpec(axis="r", where={"N": 4}))
    assert text.count("LoRA (ours)") == 2
    assert "Corrupted input" in text and "Codec ceiling" in text
    assert "**" in text and "<u>" in text
    assert "Trends along r:" in text


def test_report_baselines_and_plots(base, tmp_path):
    store = ResultsStore(tmp_path / "store")
    run_ablation({"N": [4]}, base, store)
    table = tmp_path / "baselines.csv"
    table.write_text("method,PSNR (dB),SSIM,FID,FID-Rad,LPIPS,LPIPS-Rad\nClassic,30.5,0.9,,,0.1,\n")
    text = render_report(store, {"baselines": [str(table)], "plots_dir": str(tmp_path / "plots"),
                                 "include_reference_points": False})
    assert "| Classic |  |  | 30.50 | 0.9000 | n/a |" in text
    assert "Corrupted input" not in text
    assert (tmp_path / "plots" / "psnr_db_vs_N.png").exists()
    with pytest.raises(ConfigError):
        render_report(store, {"axis": "lr"})
