"""Resumable experiment pipeline.

Stages run in order and persist everything they produce under the output
directory. Each stage writes ``stages/<name>.json`` holding a hash of its
inputs (relevant config sections plus upstream output hashes) and the
SHA-256 of every file it wrote; a stage whose record still matches is
skipped unless forced.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, AttackKind, generate_adversary_set, load_adversary_set, save_adversary_set
from .config import network_config
from .data import Dataset, SyntheticSpec, downsample, load_idx, make_synthetic, stratified_subset
from .ensemble import EnsembleSpec, PureEnsembleClassifier, SpecialistsEnsembleClassifier
from .evaluation import DecisionLog, default_tau_grid, density_from_logs, density_logs, sweep_logs
from .nn import Network, NeuralNetClassifier, TrainConfig, load_network, save_network, train
from .reports import write_line_chart, write_rows

logger = logging.getLogger(__name__)

STAGES = ("train-ga", "gen-adv", "train-baselines", "build-ensemble", "evaluate", "report")
FRAMEWORKS = ("naive", "pure", "specialists")
ATTACKS = tuple(k.value for k in AttackKind)


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.exit_code = STAGES.index(stage) + 1


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def load_datasets(cfg):
    """``(train, test)`` datasets for the configured source."""
    ds = cfg["dataset"]
    source = ds["source"]
    if source == "synthetic":
        return make_synthetic(SyntheticSpec(**{k: v for k, v in ds.items() if k != "source"}))
    if source == "digits":
        from sklearn.datasets import load_digits

        digits = load_digits()
        X = digits.images[:, None] / 16.0
        order = np.random.default_rng(ds.get("seed", 0)).permutation(len(X))
        n_train = ds.get("train_size", 1400)
        tr, te = order[:n_train], order[n_train:]
        return Dataset(X[tr], digits.target[tr], 10), Dataset(X[te], digits.target[te], 10)
    k = ds.get("n_classes", 10)
    train_ds = load_idx(ds["train_images"], ds["train_labels"], k)
    test_ds = load_idx(ds["test_images"], ds["test_labels"], k)
    if ds.get("downsample", 1) == 2:
        train_ds, test_ds = downsample(train_ds), downsample(test_ds)
    seed = ds.get("seed", 0)
    if "train_subset" in ds:
        train_ds = stratified_subset(train_ds, ds["train_subset"], seed)
    if "test_subset" in ds:
        test_ds = stratified_subset(test_ds, ds["test_subset"], seed + 1)
    return train_ds, test_ds


class Pipeline:
    def __init__(self, cfg, out_dir, force=False):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.force = force
        self._data = None

    # -- helpers ---------------------------------------------------------

    @property
    def data(self):
        if self._data is None:
            self._data = load_datasets(self.cfg)
        return self._data

    def path(self, *parts):
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _record_path(self, stage):
        return self.out / "stages" / f"{stage}.json"

    def record(self, stage):
        p = self._record_path(stage)
        return json.loads(p.read_text()) if p.exists() else None

    def _inputs(self, stage):
        c = self.cfg
        common = {k: c[k] for k in ("dataset", "network", "train")}
        upstream = {
            "gen-adv": ["train-ga"],
            "evaluate": ["gen-adv", "train-baselines", "build-ensemble"],
            "report": ["evaluate"],
        }.get(stage, [])
        sections = {
            "train-ga": {**common, "seed": c["seeds"]["ga"]},
            "gen-adv": {"attack": c["attack"]},
            "train-baselines": {**common, "naive": c["seeds"]["naive"], "pure": c["seeds"]["pure"]},
            "build-ensemble": {
                **common,
                "ensemble": c["ensemble"],
                "attack": c["attack"],
                "seed": c["seeds"]["specialist_base"],
            },
            "evaluate": {"taus": c["taus"]},
            "report": {},
        }[stage]
        ups = {}
        for u in upstream:
            rec = self.record(u)
            ups[u] = rec["outputs"] if rec else None
        return _digest({"stage": stage, "config": sections, "upstream": ups})

    def is_current(self, stage):
        rec = self.record(stage)
        if rec is None or rec.get("inputs") != self._inputs(stage):
            return False
        for rel, digest in rec["outputs"].items():
            p = self.out / rel
            if not p.exists() or sha256_file(p) != digest:
                return False
        return True

    def _finish(self, stage, files, extra=None):
        outputs = {str(Path(f).relative_to(self.out)): sha256_file(f) for f in sorted(files)}
        rec = {"stage": stage, "inputs": self._inputs(stage), "outputs": outputs, **(extra or {})}
        self.path("stages", f"{stage}.json").write_text(json.dumps(rec, indent=1, sort_keys=True))
        return rec

    def _train_network(self, train_ds, seed):
        net = Network(network_config(self.cfg, train_ds.input_shape, train_ds.n_classes, seed))
        tcfg = TrainConfig(**self.cfg["train"], seed=seed)
        train(net, train_ds.X, train_ds.y, tcfg)
        return net

    def _template(self):
        t = self.cfg["train"]
        layers = network_config(self.cfg, self.data[0].input_shape, self.data[0].n_classes, 0).layers
        return NeuralNetClassifier(
            layers=layers,
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            learning_rate=t["learning_rate"],
            momentum=t["momentum"],
            decay_epochs=tuple(t["decay_epochs"]),
            decay_factor=t["decay_factor"],
        )

    def taus(self):
        t = self.cfg["taus"]
        return np.asarray(t["values"], dtype=float) if "values" in t else default_tau_grid(t.get("step", 0.05))

    # -- stages ----------------------------------------------------------

    def train_ga(self):
        train_ds, test_ds = self.data
        net = self._train_network(train_ds, self.cfg["seeds"]["ga"])
        out = self.path("models", "ga.json")
        save_network(net, out)
        acc = float(np.mean(net.predict(test_ds.X) == test_ds.y))
        logger.info("GA network test accuracy %.4f", acc)
        return [out], {"test_accuracy": acc}

    def gen_adv(self):
        _, test_ds = self.data
        ga = load_network(self.out / "models" / "ga.json")
        acfg = AttackConfig.from_dict(self.cfg["attack"])
        files, stats = [], {}
        for kind in ATTACKS:
            t0 = time.perf_counter()
            adv = generate_adversary_set(ga, test_ds.X, test_ds.y, kind, acfg)
            directory = self.out / "adversaries" / kind
            save_adversary_set(adv, directory)
            files += [directory / "manifest.json", directory / "tensors.bin"]
            s = adv.summary()
            s["fool_rate"] = s["fooling"] / s["count"] if s["count"] else 0.0
            for key in ("epsilon", "mean_iterations", "epsilon_reached_target"):
                if key in adv.meta:
                    s[key] = adv.meta[key]
            stats[kind] = s
            logger.info("%s: %d adversaries, fool rate %.4f, mean distortion %.4f (%.1fs)",
                        kind, s["count"], s["fool_rate"], s["mean_distortion"], time.perf_counter() - t0)
        summary = self.path("adversaries", "summary.json")
        summary.write_text(json.dumps(stats, indent=1, sort_keys=True))
        return files + [summary], {"attacks": stats}

    def train_baselines(self):
        train_ds, _ = self.data
        files = []
        naive = self._train_network(train_ds, self.cfg["seeds"]["naive"])
        files.append(self.path("models", "naive.json"))
        save_network(naive, files[-1])
        for j, seed in enumerate(self.cfg["seeds"]["pure"]):
            net = self._train_network(train_ds, seed)
            files.append(self.path("models", "pure", f"member_{j}.json"))
            save_network(net, files[-1])
        return files, {}

    def build_ensemble(self):
        train_ds, _ = self.data
        acfg = AttackConfig.from_dict(self.cfg["attack"])
        ens = SpecialistsEnsembleClassifier(
            self._template(),
            coverage=self.cfg["ensemble"]["coverage"],
            per_class_count=self.cfg["ensemble"]["per_class_count"],
            epsilon=acfg.fgs_epsilon,
            target_fool_rate=acfg.target_fool_rate,
            random_state=self.cfg["seeds"]["specialist_base"],
        ).fit(train_ds.X, train_ds.y, n_classes=train_ds.n_classes)
        files = [self.path("ensemble", "spec.json"), self.path("ensemble", "confusion.csv")]
        ens.spec_.save(files[0])
        k = train_ds.n_classes
        write_rows(files[1], ["true_class"] + [f"pred_{c}" for c in range(k)],
                   [[i] + list(map(int, row)) for i, row in enumerate(ens.confusion_matrix_)])
        for j, member in enumerate(ens.members_):
            files.append(self.path("ensemble", f"member_{j}.json"))
            save_network(member.network_, files[-1])
        subsets = [list(s.classes) for s in ens.spec_.subsets]
        logger.info("ensemble: %d members (%d duplicates removed)", len(subsets), ens.spec_.duplicates_removed)
        return files, {"M": len(subsets), "subsets": subsets, "confusion_epsilon": ens.epsilon_}

    def frameworks(self):
        naive = NeuralNetClassifier.from_network(load_network(self.out / "models" / "naive.json"))
        pure_nets = [load_network(self.out / "models" / "pure" / f"member_{j}.json")
                     for j in range(len(self.cfg["seeds"]["pure"]))]
        spec = EnsembleSpec.load(self.out / "ensemble" / "spec.json")
        members = [load_network(self.out / "ensemble" / f"member_{j}.json") for j in range(len(spec))]
        return {
            "naive": naive,
            "pure": PureEnsembleClassifier.from_networks(pure_nets),
            "specialists": SpecialistsEnsembleClassifier.from_members(spec, members),
        }

    def adversaries(self):
        return {kind: load_adversary_set(self.out / "adversaries" / kind) for kind in ATTACKS}

    def evaluate(self):
        _, test_ds = self.data
        advs = self.adversaries()
        taus = self.taus()
        files = []
        for name, fw in self.frameworks().items():
            clean_log = DecisionLog.from_framework(fw, test_ds.X, test_ds.y)
            adv_logs = {k: DecisionLog.from_framework(fw, a.perturbed, a.labels) for k, a in advs.items() if len(a)}
            for set_name, log in [("clean", clean_log), *adv_logs.items()]:
                files.append(self.path("logs", f"{name}__{set_name}.csv"))
                log.to_csv(files[-1])
            for report in sweep_logs(name, clean_log, adv_logs, taus):
                files.append(self.path("reports", f"errors__{name}__{report.sample_set}.csv"))
                report.to_csv(files[-1])
            dlogs = density_logs(clean_log, adv_logs)
            files.append(self.path("reports", f"density__{name}.csv"))
            density_from_logs(dlogs).to_csv(files[-1])
            curve_sets = {k: v for k, v in dlogs.items() if not k.endswith("-misclassified")}
            files.append(self.path("reports", f"rejection__{name}.csv"))
            write_rows(files[-1], ["tau", *curve_sets],
                       [[f"{t:.6f}"] + [f"{log.rejection_rate(t):.6f}" if len(log) else "" for log in curve_sets.values()]
                        for t in taus])
        return files, {}

    def report(self):
        _, test_ds = self.data
        taus = self.taus()
        k = test_ds.n_classes
        logs = {}
        for name in FRAMEWORKS:
            logs[name] = {"clean": DecisionLog.from_csv(self.out / "logs" / f"{name}__clean.csv", k)}
            for kind in ATTACKS:
                p = self.out / "logs" / f"{name}__{kind}.csv"
                if p.exists():
                    logs[name][kind] = DecisionLog.from_csv(p, k)
        summary = {"frameworks": {}, "attacks": json.loads((self.out / "adversaries" / "summary.json").read_text())}
        for name, sets in logs.items():
            clean = sets["clean"]
            entry = {
                "clean_accuracy": float(clean.correct.mean()),
                "E_D_capped": {f"{t:g}": clean.error_clean(t) for t in (0.0, 0.5)},
                "E_D_literal": {f"{t:g}": clean.error_clean(t, "literal") for t in (0.0, 0.5)},
                "E_A": {kind: {f"{t:g}": log.error_adv(t) for t in (0.0, 0.5)}
                        for kind, log in sets.items() if kind != "clean"},
                "misclassified_mass_below_0.5": {
                    kind: float(np.mean(log.misclassified().confidence < 0.5)) if len(log.misclassified()) else None
                    for kind, log in sets.items() if kind != "clean"
                },
            }
            summary["frameworks"][name] = entry
        files = [self.path("reports", "summary.json")]
        files[0].write_text(json.dumps(summary, indent=1, sort_keys=True))

        for set_name in ["clean", *ATTACKS]:
            series = {}
            for name in FRAMEWORKS:
                log = logs[name].get(set_name)
                if log is None:
                    continue
                ys = [log.error_clean(t) if set_name == "clean" else log.error_adv(t) for t in taus]
                series[name] = (taus, ys)
            if series:
                files.append(self.path("reports", f"errors__{set_name}.svg"))
                metric = "E_D (capped)" if set_name == "clean" else "E_A"
                write_line_chart(files[-1], series, title=f"{metric} on {set_name}", xlabel="threshold", ylabel=metric)
        for name in FRAMEWORKS:
            dl = density_logs(logs[name]["clean"], {k: v for k, v in logs[name].items() if k != "clean"})
            hist = density_from_logs(dl)
            centers = 0.5 * (hist.edges[1:] + hist.edges[:-1])
            series = {k: (centers, v) for k, v in hist.densities.items() if not k.endswith("-misclassified")}
            files.append(self.path("reports", f"density__{name}.svg"))
            write_line_chart(files[-1], series, title=f"confidence density: {name}", xlabel="confidence",
                             ylabel="mass")
            curves = {k: (taus, [v.rejection_rate(t) for t in taus]) for k, v in dl.items()
                      if not k.endswith("-misclassified") and len(v)}
            files.append(self.path("reports", f"rejection__{name}.svg"))
            write_line_chart(files[-1], curves, title=f"rejection rate: {name}", xlabel="threshold", ylabel="rate")
        return files, {}

    # -- driver ----------------------------------------------------------

    def run(self, stages=None):
        stages = list(stages or STAGES)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.json").write_text(json.dumps(self.cfg, indent=1, sort_keys=True))
        ran = []
        for stage in stages:
            if stage not in STAGES:
                raise ValueError(f"unknown stage {stage!r}")
            if not self.force and self.is_current(stage):
                logger.info("stage %s up to date, skipping", stage)
                continue
            logger.info("stage %s", stage)
            t0 = time.perf_counter()
            try:
                files, extra = getattr(self, stage.replace("-", "_"))()
            except Exception as exc:
                logger.error("stage %s failed: %s", stage, exc)
                raise StageError(stage, exc) from exc
            self._finish(stage, files, extra)
            ran.append(stage)
            logger.info("stage %s done in %.1fs", stage, time.perf_counter() - t0)
        self.write_manifest()
        return ran

    def write_manifest(self):
        stages = {s: self.record(s) for s in STAGES}
        files = {}
        for rec in stages.values():
            if rec:
                files.update(rec["outputs"])
        ens = stages.get("build-ensemble") or {}
        manifest = {
            "config": self.cfg,
            "seeds": self.cfg["seeds"],
            "completed_stages": [s for s, r in stages.items() if r],
            "attacks": (stages.get("gen-adv") or {}).get("attacks"),
            "ensemble": {"M": ens.get("M"), "subsets": ens.get("subsets"),
                         "confusion_epsilon": ens.get("confusion_epsilon")},
            "files": dict(sorted(files.items())),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return manifest


def run_pipeline(cfg, out_dir, stages=None, force=False):
    pipe = Pipeline(cfg, out_dir, force)
    pipe.run(stages)
    return Path(out_dir)
