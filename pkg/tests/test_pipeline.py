import copy
import json

import pytest

from advreject.cli import main
from advreject.config import PRESETS, ConfigError, load_config, preset_config, validate
from advreject.pipeline import STAGES, Pipeline, StageError

TINY = {
    "name": "tiny",
    "dataset": {"source": "synthetic", "n_classes": 3, "samples_per_class": 40, "dim": 16,
                "separation": 1.0, "noise": 0.15, "seed": 0},
    "network": {"preset": "mlp", "layers": [{"kind": "dense", "units": 8}, {"kind": "relu"}]},
    "train": {"epochs": 8, "batch_size": 16, "decay_epochs": [6]},
    "attack": {"target_fool_rate": 0.9, "box_steps": 3, "box_iterations": 20},
    "ensemble": {"per_class_count": 15},
    "taus": {"step": 0.25},
    "seeds": {"ga": 1, "naive": 2, "pure": [3, 4], "specialist_base": 10},
}


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    Pipeline(validate(TINY), out).run()
    return out


class TestConfig:
    def test_presets_validate(self):
        for name in PRESETS:
            assert preset_config(name)["name"] == name

    @pytest.mark.parametrize("section,key", [(None, "typo"), ("train", "epoch"), ("dataset", "dims"),
                                             ("seeds", "gaa"), ("attack", "eps")])
    def test_unknown_keys_rejected(self, section, key):
        cfg = copy.deepcopy(TINY)
        (cfg if section is None else cfg[section])[key] = 1
        with pytest.raises(ConfigError, match="unknown key"):
            validate(cfg)

    def test_naive_seed_must_differ(self):
        cfg = copy.deepcopy(TINY)
        cfg["seeds"]["naive"] = 1
        with pytest.raises(ConfigError):
            validate(cfg)

    def test_pure_seeds_distinct(self):
        cfg = copy.deepcopy(TINY)
        cfg["seeds"]["pure"] = [3, 3]
        with pytest.raises(ConfigError):
            validate(cfg)

    def test_missing_idx_path(self, tmp_path):
        cfg = {"dataset": {"source": "idx", "train_images": "a", "train_labels": "b",
                           "test_images": "c", "test_labels": "d"}}
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        with pytest.raises(ConfigError, match="does not exist"):
            load_config(path)

    def test_defaults_filled(self):
        cfg = validate({"dataset": {"source": "digits"}})
        assert cfg["ensemble"]["coverage"] == 0.8
        assert cfg["seeds"]["pure"] == [10, 11, 12, 13, 14]


class TestPipeline:
    def test_outputs_and_manifest(self, finished_run):
        manifest = json.loads((finished_run / "manifest.json").read_text())
        assert manifest["completed_stages"] == list(STAGES)
        k = TINY["dataset"]["n_classes"]
        assert manifest["ensemble"]["M"] == len(manifest["ensemble"]["subsets"]) <= 2 * k + 1
        for name in ("ga.json", "naive.json"):
            assert (finished_run / "models" / name).exists()
        for kind in ("fgs", "deepfool", "boxmin"):
            assert (finished_run / "adversaries" / kind / "tensors.bin").exists()
            assert (finished_run / "reports" / f"errors__specialists__{kind}.csv").exists()
        assert (finished_run / "reports" / "density__pure.svg").read_text().startswith("<svg")
        for rel, digest in manifest["files"].items():
            assert (finished_run / rel).exists(), rel

    def test_rerun_skips_everything(self, finished_run):
        assert Pipeline(validate(TINY), finished_run).run() == []

    def test_changed_config_reruns_downstream(self, finished_run, tmp_path):
        import shutil

        out = tmp_path / "copy"
        shutil.copytree(finished_run, out)
        cfg = copy.deepcopy(TINY)
        cfg["taus"] = {"step": 0.5}
        assert Pipeline(validate(cfg), out).run() == ["evaluate", "report"]

    def test_identical_configs_give_identical_reports(self, finished_run, tmp_path):
        Pipeline(validate(TINY), tmp_path).run()
        for sub in ("reports", "logs"):
            for f in sorted((finished_run / sub).glob("*.csv")):
                assert f.read_bytes() == (tmp_path / sub / f.name).read_bytes(), f.name

    def test_stage_failure_names_stage(self, tmp_path):
        with pytest.raises(StageError) as err:
            Pipeline(validate(TINY), tmp_path).run(["gen-adv"])
        assert err.value.stage == "gen-adv"
        assert err.value.exit_code == 2


class TestCli:
    def test_run_and_exit_codes(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(TINY))
        out = tmp_path / "out"
        assert main(["train-ga", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert (out / "models" / "ga.json").exists()
        assert main(["evaluate", "--config", str(cfg_path), "--out", str(tmp_path / "fresh")]) != 0
        assert main(["run-all", "--config", str(tmp_path / "missing.json"), "--out", str(out)]) == 2

    def test_show_config(self, capsys):
        assert main(["show-config", "--preset", "synthetic"]) == 0
        assert json.loads(capsys.readouterr().out)["dataset"]["n_classes"] == 4
