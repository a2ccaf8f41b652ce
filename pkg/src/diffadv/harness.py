"""Experiment orchestration: config, training lifecycle, attack/defense grids, reports.

A run lives in ``<output_root>/runs/<config-hash>/`` with subdirectories
``dataset``, ``checkpoints``, ``adv``, ``traces``, and ``reports``. Phases are
idempotent: each writes a stamp carrying the config hash and is skipped when
the stamp already matches; a mismatching stamp in an explicitly chosen output
directory refuses to run without ``force``.

Deterministic outputs (metrics.json / metrics.txt) never contain wall-clock
numbers; those live in timings.json.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import checkpoints as ckpt
from .attacks import ATTACK_METHODS, AttackConfig, attack, derive_seed, make_pipeline
from .data import NUM_CLASSES, ingest_dataset, load_dataset, split_train_test
from .defenses import DefenseScenario, PurifierHandles, defend_classify, standard_scenarios
from .distill import DistillConfig, TeacherTrainConfig, distill_student, train_teacher
from .inversion import EditLossConfig
from .metrics import (
    MetricsReport,
    compute_fid_proxy,
    compute_lpips_proxy,
    compute_psnr,
    compute_ssim,
    format_report_table,
)
from .models import ClassifierSpec, train_autoencoder, train_classifier
from .schedule import MODEL_DTYPE, NoiseSchedule

ABLATION_AXES = ("none", "epsilon", "iterations", "L", "tau")
PHASES = ("dataset", "train", "attack", "defend", "evaluate")


class ConfigError(ValueError):
    """Invalid experiment config; the message names the offending field."""


class RunConflictError(RuntimeError):
    """Existing outputs were produced by a different config."""


def _require(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_root: str = "runs"
    output_dir: str | None = None  # explicit run dir; default runs/<hash>
    dataset_seed: int = 0
    dataset_size: int = 1600
    test_fraction: float = 0.25
    schedule: dict = field(default_factory=lambda: NoiseSchedule().to_dict())
    ae_train: dict = field(default_factory=lambda: {"epochs": 55, "batch_size": 128, "lr": 3e-3, "min_psnr": 25.0})
    classifier_train: dict = field(
        default_factory=lambda: {
            "cnn_a": {"epochs": 80, "lr": 3e-3},
            "cnn_b": {"epochs": 45, "lr": 3e-3},
            "mlp": {"epochs": 40, "lr": 2e-3},
        }
    )
    teacher_train: dict = field(default_factory=lambda: {"epochs": 250, "batch_size": 256, "lr": 2e-3})
    distill_train: dict = field(default_factory=lambda: {"epochs": 120, "batch_size": 256, "lambda_weight": 2.5})
    attack_base: dict = field(
        default_factory=lambda: {
            "epsilon": 16 / 255,
            "eta": 2 / 255,
            "iterations": 10,
            "tau": 4,
            "L": 10,
            "strength_final": 0.1,
            "update_rule": "sign",
        }
    )
    attack_methods: dict = field(
        default_factory=lambda: {
            "latent_pgd": {},
            "teacher_chain": {"strength_attack": 1.0},
            "student": {"strength_attack": 0.6},
            "student_precise": {"strength_attack": 0.05},
        }
    )
    ablation_axis: str = "epsilon"
    ablation_values: tuple = (8 / 255, 16 / 255)
    eval_images: int = 64
    attack_batch: int = 32
    white_box: str = "cnn_a"
    transfer: tuple = ("cnn_b", "mlp")
    scenarios: tuple = ("none", "p1", "p1_plus", "p2", "p2_plus")
    pretrained: dict = field(default_factory=dict)  # optional checkpoint paths

    def validate(self) -> "ExperimentConfig":
        _require(self.dataset_size > 0, "dataset_size", "must be positive")
        _require(0 < self.test_fraction < 1, "test_fraction", "must be in (0, 1)")
        _require(self.eval_images > 0, "eval_images", "must be positive")
        _require(self.attack_batch > 0, "attack_batch", "must be positive")
        _require(self.white_box in self.classifier_train, "white_box", "has no training entry")
        for name in self.transfer:
            _require(name in self.classifier_train, f"transfer[{name}]", "has no training entry")
        known = set(standard_scenarios()) | {"none"}
        for s in self.scenarios:
            _require(s in known, f"scenarios[{s}]", f"unknown scenario (choose from {sorted(known)})")
        _require(self.ablation_axis in ABLATION_AXES, "ablation_axis", f"must be one of {ABLATION_AXES}")
        if self.ablation_axis == "none":
            _require(len(self.ablation_values) == 0, "ablation_values", "must be empty when axis is none")
        else:
            _require(len(self.ablation_values) > 0, "ablation_values", "need at least one value")
        base = dict(self.attack_base)
        _require(base.get("iterations", 1) >= 1, "attack_base.iterations", "must be at least 1")
        for method, overrides in self.attack_methods.items():
            _require(method in ATTACK_METHODS, f"attack_methods.{method}", f"unknown method (choose from {ATTACK_METHODS})")
            try:
                AttackConfig(**{**base, **overrides})
            except (TypeError, ValueError) as e:
                raise ConfigError(f"attack_methods.{method}: {e}") from e
        for i, v in enumerate(self.ablation_values):
            try:
                self._apply_ablation(AttackConfig(**base), v)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"ablation_values[{i}]: {e}") from e
        for key in self.pretrained:
            _require(
                Path(self.pretrained[key]).exists(),
                f"pretrained.{key}",
                f"checkpoint {self.pretrained[key]!r} does not exist",
            )
        try:
            NoiseSchedule.from_dict(self.schedule)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"schedule: {e}") from e
        return self

    def _apply_ablation(self, cfg: AttackConfig, value) -> AttackConfig:
        if self.ablation_axis == "none":
            return cfg
        if self.ablation_axis == "epsilon":
            return replace(cfg, epsilon=float(value), eta=min(cfg.eta, float(value)))
        if self.ablation_axis == "iterations":
            return replace(cfg, iterations=int(value))
        if self.ablation_axis == "L":
            return replace(cfg, L=int(value))
        if self.ablation_axis == "tau":
            return replace(cfg, tau=int(value))
        raise ConfigError(f"ablation_axis: unknown axis {self.ablation_axis!r}")

    def canonical(self) -> dict:
        d = asdict(self)
        d.pop("output_root")
        d.pop("output_dir")
        for key in ("ablation_values", "transfer", "scenarios"):
            d[key] = list(d[key])
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True).encode()).hexdigest()[:16]

    def variants(self) -> list[dict]:
        """The attack grid: every method crossed with every ablation value."""
        base = dict(self.attack_base)
        out = []
        values = self.ablation_values if self.ablation_axis != "none" else (None,)
        for value in values:
            for method, overrides in sorted(self.attack_methods.items()):
                cfg = AttackConfig(**{**base, **overrides})
                if value is not None:
                    cfg = self._apply_ablation(cfg, value)
                vid = method if value is None else f"{method}__{self.ablation_axis}_{_fmt_value(value)}"
                out.append({"id": vid, "method": method, "config": cfg, "ablation_value": value})
        return out

    @staticmethod
    def from_file(path: str | Path) -> "ExperimentConfig":
        raw = yaml.safe_load(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        known = {f.name for f in ExperimentConfig.__dataclass_fields__.values()}
        for key in raw:
            if key not in known:
                raise ConfigError(f"{key}: unknown config field (choose from {sorted(known)})")
        for key in ("ablation_values", "transfer", "scenarios"):
            if key in raw and isinstance(raw[key], list):
                raw[key] = tuple(raw[key])
        return ExperimentConfig(**raw).validate()


def _fmt_value(v) -> str:
    s = f"{float(v):g}" if isinstance(v, float) else str(v)
    return s.replace(".", "p").replace("-", "m")


# ---------------------------------------------------------------------------
# persistence helpers


def save_png16(path: Path, img: torch.Tensor) -> None:
    """Lossless 16-bit grayscale PNG of a (1, H, W) image in [0, 1]."""
    arr = (img.squeeze(0).clamp(0, 1).numpy() * 65535.0).round().astype(np.uint16)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="I;16").save(path)


def load_png16(path: Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path), dtype=np.float32) / np.float32(65535.0)
    return torch.from_numpy(arr).to(MODEL_DTYPE).unsqueeze(0)


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _append_jsonl(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


class RunDir:
    def __init__(self, root: Path):
        self.root = root
        for sub in ("dataset", "checkpoints", "adv", "traces", "reports", "stamps"):
            (root / sub).mkdir(parents=True, exist_ok=True)

    def stamp_path(self, phase: str) -> Path:
        return self.root / "stamps" / f"{phase}.json"

    def stamped(self, phase: str, config_hash: str) -> bool:
        p = self.stamp_path(phase)
        if not p.exists():
            return False
        return json.loads(p.read_text()).get("config_hash") == config_hash

    def check_conflict(self, config_hash: str, force: bool) -> None:
        for phase in PHASES:
            p = self.stamp_path(phase)
            if p.exists():
                stored = json.loads(p.read_text()).get("config_hash")
                if stored != config_hash:
                    if not force:
                        raise RunConflictError(
                            f"{self.root} holds outputs for config {stored}, not {config_hash}; pass force to overwrite"
                        )
                    p.unlink()

    def write_stamp(self, phase: str, config_hash: str) -> None:
        _dump_json(self.stamp_path(phase), {"phase": phase, "config_hash": config_hash})


# ---------------------------------------------------------------------------
# the pipeline


@dataclass
class PipelineModels:
    schedule: NoiseSchedule
    autoencoder: object
    teacher: object
    student: object
    classifiers: dict


def _train_phase(cfg: ExperimentConfig, run: RunDir, train_split, test_split) -> None:
    x_train, y_train = train_split
    x_test, y_test = test_split
    schedule = NoiseSchedule.from_dict(cfg.schedule)
    cdir = run.root / "checkpoints"

    if "autoencoder" in cfg.pretrained:
        ae = ckpt.load_autoencoder(cfg.pretrained["autoencoder"])
    else:
        ae = train_autoencoder(
            x_train,
            epochs=cfg.ae_train.get("epochs", 50),
            batch_size=cfg.ae_train.get("batch_size", 128),
            lr=cfg.ae_train.get("lr", 2e-3),
            seed=cfg.seed,
            holdout=x_test,
            min_psnr=cfg.ae_train.get("min_psnr", 25.0),
        )
    ckpt.save_autoencoder(cdir / "autoencoder.pt", ae)

    # reconstruction-style augmentation keeps purification-defended
    # classification usable on clean inputs
    with torch.no_grad():
        x_aug = torch.clamp(ae.decode(ae.encode(x_train)), 0.0, 1.0).detach()
    for arch, tr in sorted(cfg.classifier_train.items()):
        key = f"classifier_{arch}"
        if key in cfg.pretrained:
            net = ckpt.load_classifier(cfg.pretrained[key])
        else:
            arch_salt = int.from_bytes(hashlib.sha256(arch.encode()).digest()[:4], "little")
            spec = ClassifierSpec(
                arch=arch,
                num_classes=NUM_CLASSES,
                epochs=tr.get("epochs", 12),
                lr=tr.get("lr", 3e-3),
                seed=derive_seed(cfg.seed, arch_salt),
            )
            net = train_classifier(spec, (x_train, y_train), (x_test, y_test), extra=(x_aug, y_train))
        ckpt.save_classifier(cdir / f"{key}.pt", arch, net)

    with torch.no_grad():
        lat_train = ae.encode(x_train)
        lat_test = ae.encode(x_test)
    if "teacher" in cfg.pretrained:
        teacher = ckpt.load_teacher(cfg.pretrained["teacher"])
    else:
        teacher = train_teacher(
            lat_train,
            schedule,
            TeacherTrainConfig(
                epochs=cfg.teacher_train.get("epochs", 250),
                batch_size=cfg.teacher_train.get("batch_size", 256),
                lr=cfg.teacher_train.get("lr", 2e-3),
                seed=cfg.seed,
            ),
            labels=y_train,
            num_classes=NUM_CLASSES,
            holdout=lat_test,
            holdout_labels=y_test,
        )
    ckpt.save_teacher(cdir / "teacher.pt", teacher)

    if "student" in cfg.pretrained:
        student = ckpt.load_student(cfg.pretrained["student"])
    else:
        tau = int(cfg.attack_base.get("tau", 4))
        result = distill_student(
            teacher,
            lat_train,
            DistillConfig(
                epochs=cfg.distill_train.get("epochs", 120),
                batch_size=cfg.distill_train.get("batch_size", 256),
                lambda_weight=cfg.distill_train.get("lambda_weight", 2.5),
                num_student_times=tau,
                seed=cfg.seed,
            ),
            labels=y_train,
        )
        student = result.student
        ckpt.save_discriminator(cdir / "discriminator.pt", result.discriminator)
    ckpt.save_student(cdir / "student.pt", student)


def _load_models(cfg: ExperimentConfig, run: RunDir) -> PipelineModels:
    cdir = run.root / "checkpoints"
    classifiers = {arch: ckpt.load_classifier(cdir / f"classifier_{arch}.pt") for arch in cfg.classifier_train}
    return PipelineModels(
        schedule=NoiseSchedule.from_dict(cfg.schedule),
        autoencoder=ckpt.load_autoencoder(cdir / "autoencoder.pt"),
        teacher=ckpt.load_teacher(cdir / "teacher.pt"),
        student=ckpt.load_student(cdir / "student.pt"),
        classifiers=classifiers,
    )


def _eval_set(cfg: ExperimentConfig, test_split) -> tuple[torch.Tensor, torch.Tensor]:
    x_test, y_test = test_split
    n = min(cfg.eval_images, len(x_test))
    return x_test[:n], y_test[:n]


def _students_tau(models: PipelineModels, tau: int):
    """Student restricted to `tau` timesteps, reusing the trained net."""
    from .distill import StudentModel, student_times

    if tau == len(models.student.t_student):
        return models.student
    return StudentModel(models.student.net, models.student.schedule, student_times(models.schedule, tau))


def _attack_phase(cfg: ExperimentConfig, run: RunDir, models: PipelineModels, eval_set) -> None:
    x_eval, y_eval = eval_set
    clean_dir = run.root / "adv" / "clean"
    for i in range(len(x_eval)):
        save_png16(clean_dir / f"img_{i:04d}.png", x_eval[i])
    records_path = run.root / "adv" / "records.jsonl"
    records_path.unlink(missing_ok=True)
    timings = {}
    chash = cfg.config_hash()
    classifier = models.classifiers[cfg.white_box]
    for vidx, variant in enumerate(cfg.variants()):
        acfg: AttackConfig = variant["config"]
        student = _students_tau(models, acfg.tau)
        pipeline = make_pipeline(
            variant["method"], acfg, models.autoencoder, teacher=models.teacher, student=student
        )
        vdir = run.root / "adv" / variant["id"]
        t0 = time.perf_counter()
        rows = []
        for start in range(0, len(x_eval), cfg.attack_batch):
            xb = x_eval[start : start + cfg.attack_batch]
            yb = y_eval[start : start + cfg.attack_batch]
            seed = derive_seed(cfg.seed, vidx, start)
            x_adv, trace = attack(xb, yb, classifier, acfg, pipeline, seed=seed)
            for j in range(len(xb)):
                idx = start + j
                save_png16(vdir / f"img_{idx:04d}.png", x_adv[j])
                rows.append(
                    {
                        "variant": variant["id"],
                        "method": variant["method"],
                        "image_index": idx,
                        "seed": seed,
                        "config_hash": chash,
                        "ablation_axis": cfg.ablation_axis,
                        "ablation_value": variant["ablation_value"],
                        "trace": [
                            {"iteration": t["iteration"], "loss": t["loss"], "prediction": t["predictions"][j]}
                            for t in trace
                        ],
                    }
                )
        elapsed = time.perf_counter() - t0
        timings[variant["id"]] = {"seconds_total": elapsed, "seconds_per_image": elapsed / len(x_eval)}
        _append_jsonl(records_path, rows)
    _dump_json(run.root / "reports" / "timings.json", {"attack": timings})


def _defend_phase(cfg: ExperimentConfig, run: RunDir, models: PipelineModels, eval_set) -> None:
    x_eval, y_eval = eval_set
    n = len(x_eval)
    base_L = int(cfg.attack_base.get("L", 10))
    handles = PurifierHandles(
        autoencoder=models.autoencoder,
        teacher=models.teacher,
        student=models.student,
        precision_steps=base_L,
    )
    scen_map = standard_scenarios()
    pred_path = run.root / "traces" / "predictions.jsonl"
    pred_path.unlink(missing_ok=True)
    sets = {"clean": torch.stack([load_png16(run.root / "adv" / "clean" / f"img_{i:04d}.png") for i in range(n)])}
    for variant in cfg.variants():
        vdir = run.root / "adv" / variant["id"]
        sets[variant["id"]] = torch.stack([load_png16(vdir / f"img_{i:04d}.png") for i in range(n)])
    for sidx, sname in enumerate(cfg.scenarios):
        scenario = None if sname == "none" else scen_map[sname]
        for set_name, images in sets.items():
            preds = {}
            for start in range(0, n, cfg.attack_batch):
                xb = images[start : start + cfg.attack_batch]
                seed = derive_seed(cfg.seed, 7000 + sidx, start)
                for arch, net in sorted(models.classifiers.items()):
                    p = defend_classify(xb, scenario, net, handles, seed=seed)
                    preds.setdefault(arch, []).append(p)
            rows = []
            for arch in sorted(models.classifiers):
                flat = torch.cat(preds[arch])
                for i in range(n):
                    rows.append(
                        {
                            "scenario": sname,
                            "set": set_name,
                            "classifier": arch,
                            "image_index": i,
                            "label": int(y_eval[i]),
                            "prediction": int(flat[i]),
                        }
                    )
            _append_jsonl(pred_path, rows)


def _evaluate_phase(cfg: ExperimentConfig, run: RunDir, models: PipelineModels, eval_set) -> list[MetricsReport]:
    x_eval, y_eval = eval_set
    n = len(x_eval)
    rows = _read_jsonl(run.root / "traces" / "predictions.jsonl")
    by_key: dict[tuple, dict[int, int]] = {}
    labels: dict[int, int] = {}
    for r in rows:
        by_key.setdefault((r["scenario"], r["set"], r["classifier"]), {})[r["image_index"]] = r["prediction"]
        labels[r["image_index"]] = r["label"]
    clean_imgs = torch.stack([load_png16(run.root / "adv" / "clean" / f"img_{i:04d}.png") for i in range(n)])
    embedder = models.classifiers[cfg.white_box]
    timing = json.loads((run.root / "reports" / "timings.json").read_text())["attack"]
    reports: list[MetricsReport] = []
    for variant in cfg.variants():
        vid = variant["id"]
        adv_imgs = torch.stack([load_png16(run.root / "adv" / vid / f"img_{i:04d}.png") for i in range(n)])
        psnr = float(np.mean([compute_psnr(clean_imgs[i], adv_imgs[i]) for i in range(n)]))
        ssim = float(np.mean([compute_ssim(clean_imgs[i : i + 1], adv_imgs[i : i + 1]) for i in range(n)]))
        fid = compute_fid_proxy(clean_imgs, adv_imgs, embedder)
        lpips = float(np.mean([compute_lpips_proxy(clean_imgs[i : i + 1], adv_imgs[i : i + 1], embedder) for i in range(n)]))
        for sname in cfg.scenarios:
            for arch in sorted(models.classifiers):
                clean_pred = by_key[(sname, "clean", arch)]
                adv_pred = by_key[(sname, vid, arch)]
                eligible = [i for i in range(n) if clean_pred[i] == labels[i]]
                asr = None
                if eligible:
                    asr = sum(1 for i in eligible if adv_pred[i] != labels[i]) / len(eligible)
                reports.append(
                    MetricsReport(
                        attack=vid,
                        scenario=sname,
                        classifier=arch,
                        asr=asr,
                        psnr=psnr,
                        ssim=ssim,
                        fid_proxy=fid,
                        lpips_proxy=lpips,
                        runtime_mean=timing[vid]["seconds_per_image"],
                        n=len(eligible),
                    ).validate()
                )
    payload = [{k: v for k, v in r.to_dict().items() if k != "runtime_mean"} for r in reports]
    _dump_json(run.root / "reports" / "metrics.json", payload)
    (run.root / "reports" / "metrics.txt").write_text(format_report_table(reports))
    return reports


def run_pipeline(cfg: ExperimentConfig, force: bool = False, through: str = "evaluate") -> dict:
    """Execute dataset -> train -> attack -> defend -> evaluate, idempotently.

    ``through`` stops the pipeline after the named phase ("train", "attack",
    or "evaluate").
    """
    if through not in ("train", "attack", "evaluate"):
        raise ValueError("through must be one of train/attack/evaluate")
    cfg.validate()
    chash = cfg.config_hash()
    root = Path(cfg.output_dir) if cfg.output_dir else Path(cfg.output_root) / "runs" / chash
    run = RunDir(root)
    run.check_conflict(chash, force)
    phases: dict[str, str] = {}

    def phase(name: str, fn) -> None:
        if run.stamped(name, chash):
            phases[name] = "skipped"
            return
        fn()
        run.write_stamp(name, chash)
        phases[name] = "executed"

    torch.manual_seed(cfg.seed)
    phase("dataset", lambda: ingest_dataset(cfg.dataset_seed, cfg.dataset_size, root / "dataset"))
    x, y = load_dataset(root / "dataset")
    train_split, test_split = split_train_test(x, y, cfg.test_fraction)
    phase("train", lambda: _train_phase(cfg, run, train_split, test_split))
    if through == "train":
        return {"run_dir": root, "config_hash": chash, "phases": phases, "reports": []}
    models = _load_models(cfg, run)
    eval_set = _eval_set(cfg, test_split)
    phase("attack", lambda: _attack_phase(cfg, run, models, eval_set))
    if through == "attack":
        return {"run_dir": root, "config_hash": chash, "phases": phases, "reports": []}
    phase("defend", lambda: _defend_phase(cfg, run, models, eval_set))
    reports_box: list = []
    phase("evaluate", lambda: reports_box.extend(_evaluate_phase(cfg, run, models, eval_set)))
    if not reports_box:
        raw = json.loads((root / "reports" / "metrics.json").read_text())
        timing = json.loads((root / "reports" / "timings.json").read_text())["attack"]
        reports_box = [MetricsReport(runtime_mean=timing[r["attack"]]["seconds_per_image"], **r) for r in raw]
    return {"run_dir": root, "config_hash": chash, "phases": phases, "reports": reports_box}


def audit_run(run_dir: str | Path) -> dict:
    """Join every report row back to its per-image records; zero orphans allowed."""
    root = Path(run_dir)
    metrics = json.loads((root / "reports" / "metrics.json").read_text())
    preds = _read_jsonl(root / "traces" / "predictions.jsonl")
    adv_records = _read_jsonl(root / "adv" / "records.jsonl")
    by_key: dict[tuple, dict[int, int]] = {}
    labels: dict[int, int] = {}
    for r in preds:
        by_key.setdefault((r["scenario"], r["set"], r["classifier"]), {})[r["image_index"]] = r["prediction"]
        labels[r["image_index"]] = r["label"]
    attack_images = {}
    for r in adv_records:
        attack_images.setdefault(r["variant"], set()).add(r["image_index"])
    orphans = 0
    checked = 0
    for row in metrics:
        key = (row["scenario"], row["attack"], row["classifier"])
        clean = by_key.get((row["scenario"], "clean", row["classifier"]))
        adv = by_key.get((row["scenario"], row["attack"], row["classifier"]))
        if clean is None or adv is None or row["attack"] not in attack_images:
            orphans += 1
            continue
        eligible = [i for i in clean if clean[i] == labels[i]]
        if len(eligible) != row["n"]:
            orphans += 1
            continue
        if row["asr"] is not None:
            asr = sum(1 for i in eligible if adv[i] != labels[i]) / len(eligible)
            if abs(asr - row["asr"]) > 1e-12:
                orphans += 1
                continue
        if set(adv.keys()) - attack_images[row["attack"]]:
            orphans += 1
            continue
        checked += 1
    return {"rows": len(metrics), "verified": checked, "orphans": orphans}
