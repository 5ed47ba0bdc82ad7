"""Experiment configuration and the train / register / generate runners.

Every runner is a pure function of its ExperimentConfig: same config, same
bytes on disk.  Reports are written as JSON with sorted keys and no
timestamps.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .losses import ncc_loss
from .metrics import compute_metrics, endpoint_error
from .model import LossWeights, Model, ModelConfig
from .optim import AdamW, step_decay_lr
from .synthetic import GenConfig, generate_case, generate_dataset, stack
from .volume import Rng, volume_io_write

PRESETS = {
    "baseline": {"abpdc_mode": "standard", "fpran": False},
    "+F": {"abpdc_mode": "standard", "fpran": True},
    "+A": {"abpdc_mode": "adaptive", "fpran": False},
    "+A+F": {"abpdc_mode": "adaptive", "fpran": True},
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    input_shape: tuple = (16, 64, 64)
    stage_channels: tuple = (8, 16, 32, 64)
    stage_strides: tuple = ((2, 2, 2), (2, 2, 2), (1, 2, 2), (1, 2, 2))
    abpdc_mode: str = "adaptive"
    fixed_theta: float = 0.7
    fpran: bool = True
    use_rotation: bool = True
    ncc_window: int = 9
    lambda_class: float = 1.0
    lambda_sim: float = 1.0
    lambda_reg: float = 1.0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    decay_factor: float = 0.9
    decay_interval: int = 10
    epochs: int = 10
    batch_size: int = 16
    max_steps: int = 0  # 0: no cap
    stop_when_fit: bool = False  # end training once train accuracy is 1.0
    train_cases: int = 32
    test_cases: int = 16
    register_steps: int = 500
    log_every: int = 25
    out_dir: str = "out"
    gen_noise: float = 0.01
    gen_psi_max: float = 3.0
    gen_displacement: str = "smooth"
    gen_translation: tuple = (0.0, 0.0, 2.0)
    gen_rotation: bool = True
    gen_remap: str = "affine"
    gen_lesion_amplitude: float = 1.5
    gen_lesion_sigma: float = 0.12
    gen_n_blobs: int = 300
    gen_positive_fraction: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("batch_size must be >= 1, epochs and max_steps >= 0")
        if self.train_cases < 1 or self.test_cases < 0:
            raise ConfigError("need at least one training case")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

    # ------------------------------------------------------------ derived

    def model_config(self) -> ModelConfig:
        return ModelConfig(input_shape=tuple(self.input_shape), stage_channels=tuple(self.stage_channels),
                           stage_strides=tuple(tuple(s) for s in self.stage_strides),
                           abpdc_mode=self.abpdc_mode, fixed_theta=self.fixed_theta,
                           fpran=self.fpran, use_rotation=self.use_rotation,
                           ncc_window=self.ncc_window)

    def gen_config(self) -> GenConfig:
        divisor = self.model_config().cumulative_strides()[-1]
        return GenConfig(shape=tuple(self.input_shape), divisor=divisor, noise=self.gen_noise,
                         psi_max=self.gen_psi_max, displacement=self.gen_displacement,
                         translation=tuple(self.gen_translation), rotation=self.gen_rotation,
                         remap=self.gen_remap, lesion_amplitude=self.gen_lesion_amplitude,
                         lesion_sigma=self.gen_lesion_sigma, n_blobs=self.gen_n_blobs,
                         positive_fraction=self.gen_positive_fraction)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_class, self.lambda_sim, self.lambda_reg)

    def with_preset(self, name: str) -> "ExperimentConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return dataclasses.replace(self, **PRESETS[name])

    # ------------------------------------------------------- text format

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        defaults = {f.name: f.default for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in defaults:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = _parse(raw, defaults[key])
            except ValueError as e:
                raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(_format(x) for x in v)
        return ", ".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw.lower() == "true"
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple):
            return tuple(_parse(part, default[0]) for part in raw.split(";"))
        return tuple(_parse(x.strip(), default[0]) for x in raw.split(","))
    if isinstance(default, int):
        f = float(raw)
        if f != int(f):
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(f)
    if isinstance(default, float):
        return float(raw)
    return raw


# ---------------------------------------------------------------- helpers


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True) + "\n")


def _out(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e.strerror}") from None
    return out


def _r(x):
    return None if x is None else float(x)


# ------------------------------------------------------------------- gen


def run_generate(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Write the train/test cases as VOL5 files plus a manifest."""
    out = _out(out_dir or cfg.out_dir)
    gcfg = cfg.gen_config()
    manifest = {"cases": []}
    for split, count, stream in (("train", cfg.train_cases, 0), ("test", cfg.test_cases, 1)):
        for i, case in enumerate(generate_dataset(cfg.seed, count, gcfg, stream)):
            stem = f"{split}_{i:03d}"
            volume_io_write(out / f"{stem}_mri.vol5", case.mri)
            volume_io_write(out / f"{stem}_ct.vol5", case.ct)
            volume_io_write(out / f"{stem}_psi.vol5", case.psi_total)
            manifest["cases"].append({"name": stem, "split": split, "label": case.label,
                                      "max_nonrigid": float(np.sqrt((case.psi_star ** 2).sum(1)).max())})
    _write_json(out / "manifest.json", manifest)
    return manifest


# ----------------------------------------------------------------- train


def _evaluate(model: Model, cases, cfg: ExperimentConfig, register: bool) -> dict:
    x_ct, x_mri, y = stack(cases)
    res, _ = model.forward(x_ct, x_mri, None, LossWeights(0, 0, 0), track=False, register=register)
    scores = res.probabilities[:, 1]
    out = compute_metrics((scores >= 0.5).astype(int), y, scores)
    if register:
        truth = np.concatenate([c.psi_total for c in cases])
        out["mean_endpoint_error"] = endpoint_error(res.psi_full.value, truth)
        out["ncc_after"] = -float(ncc_loss(x_mri, res.x_ct_warped.value, cfg.ncc_window)[0])
    return out


def run_train(cfg: ExperimentConfig, out_dir=None, write: bool = True) -> dict:
    """Train on generated cases; returns the final report.

    Writes ``train_log.jsonl`` (one record per epoch) and ``report.json``.
    """
    gcfg = cfg.gen_config()
    train = generate_dataset(cfg.seed, cfg.train_cases, gcfg, stream=0)
    test = generate_dataset(cfg.seed, cfg.test_cases, gcfg, stream=1) if cfg.test_cases else []
    model = Model(cfg.model_config(), seed=cfg.seed)
    opt = AdamW(cfg.lr, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
    weights = cfg.loss_weights()
    register = cfg.fpran and (weights.sim > 0 or weights.reg > 0)
    x_ct, x_mri, y = stack(train)
    n = len(train)
    log, steps, steps_to_fit = [], 0, None
    for epoch in range(cfg.epochs):
        lr = step_decay_lr(cfg.lr, epoch, cfg.decay_factor, cfg.decay_interval)
        order = Rng(cfg.seed, 2, epoch).permutation(n)
        sums = {"class": 0.0, "sim": 0.0, "reg": 0.0}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            if cfg.max_steps and steps >= cfg.max_steps:
                break
            idx = order[start:start + cfg.batch_size]
            model.params.zero_grads()
            res = model.loss_and_grad(x_ct[idx], x_mri[idx], y[idx], weights)
            opt.step(model.params, lr)
            steps += 1
            batches += 1
            for k, v in res.loss_values().items():
                sums[k] += v
        if batches == 0:
            break
        acc = _evaluate(model, train, cfg, register=False)["accuracy"]
        if acc == 1.0 and steps_to_fit is None:
            steps_to_fit = steps
        rec = {"epoch": epoch, "steps": steps, "lr": lr, "train_acc": acc,
               "loss_class": sums["class"] / batches,
               "loss_sim": sums["sim"] / batches if register else None,
               "loss_reg": sums["reg"] / batches if register else None}
        log.append(rec)
        if cfg.stop_when_fit and steps_to_fit is not None:
            break
    report = {"train_acc": log[-1]["train_acc"] if log else None, "steps": steps,
              "steps_to_fit": steps_to_fit, "epochs_run": len(log)}
    if test:
        ev = _evaluate(model, test, cfg, register)
        report.update({k: _r(v) for k, v in ev.items()})
    if write:
        out = _out(out_dir or cfg.out_dir)
        (out / "train_log.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in log))
        _write_json(out / "report.json", report)
    return report


# -------------------------------------------------------------- register


def registration_case(cfg: ExperimentConfig):
    return generate_case(Rng(cfg.seed, 3), cfg.gen_config(), label=0)


def run_register(cfg: ExperimentConfig, out_dir=None, write: bool = True) -> dict:
    """Fit FPRAN and both encoders to one synthetic pair under the similarity
    and smoothness terms only; the classifier is left untouched."""
    if not cfg.fpran:
        raise ConfigError("register needs fpran = true")
    case = registration_case(cfg)
    model = Model(cfg.model_config(), seed=cfg.seed)
    names = [k for k in model.params if not k.startswith("cls.")]
    opt = AdamW(cfg.lr, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
    weights = LossWeights(0.0, cfg.lambda_sim, cfg.lambda_reg)

    def measure():
        res, _ = model.forward(case.ct, case.mri, None, weights, track=False)
        return res, {"ncc": -float(ncc_loss(case.mri, res.x_ct_warped.value, cfg.ncc_window)[0]),
                     "endpoint_error": endpoint_error(res.psi_full.value, case.psi_total)}

    _, first = measure()
    log = []
    for step in range(cfg.register_steps):
        model.params.zero_grads()
        res = model.loss_and_grad(case.ct, case.mri, None, weights, trainable=names)
        if cfg.log_every and step % cfg.log_every == 0:
            log.append({"step": step, **res.loss_values(),
                        "endpoint_error": endpoint_error(res.psi_full.value, case.psi_total)})
        opt.step(model.params, names=names)
    final_res, last = measure()
    report = {"steps": cfg.register_steps,
              "initial_ncc": first["ncc"], "final_ncc": last["ncc"],
              "initial_endpoint_error": first["endpoint_error"],
              "final_endpoint_error": last["endpoint_error"],
              "endpoint_error_ratio": last["endpoint_error"] / first["endpoint_error"]
              if first["endpoint_error"] > 0 else None,
              "max_nonrigid": float(np.sqrt((case.psi_star ** 2).sum(1)).max())}
    if write:
        out = _out(out_dir or cfg.out_dir)
        volume_io_write(out / "psi1.vol5", final_res.psi1.value)
        volume_io_write(out / "ct_warped.vol5", final_res.x_ct_warped.value)
        (out / "register_log.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in log))
        _write_json(out / "report.json", report)
    return report


# -------------------------------------------------------------- ablation


def run_ablation(cfg: ExperimentConfig, seeds, presets=("baseline", "+A+F")) -> dict:
    """Test accuracy per preset and seed; nothing is written."""
    table = {}
    for name in presets:
        accs = [run_train(dataclasses.replace(cfg.with_preset(name), seed=s), write=False)["accuracy"]
                for s in seeds]
        table[name] = {"accuracy": accs, "mean": float(np.mean(accs))}
    return table
