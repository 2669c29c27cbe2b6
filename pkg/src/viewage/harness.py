"""Run configuration, checkpoints with lineage, stage orchestration and the
end-to-end multiview sampler."""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import torch
import yaml

from .aging import AgingBundle
from .control import ControlBranch, ViewModel, view_encoding
from .dataset import MANIFEST_NAME, DatasetConfig, Stage1Config, derive_seed, generate_dataset, load_dataset, train_stage1
from .diffusion import LatentCodec, NoiseSchedule, UNet, param_checksum
from .evaluation import EvalProtocol, EvalReport, evaluate, heldout_subjects, large_gap_protocol
from .losses import TERMS, LossWeights
from .modulation import AgeModulator
from .training import (
    AgeViewDenoiser,
    LatentData,
    SamplerConfig,
    StageConfig,
    finetune_view_model,
    pretrain_base,
    sample_groups,
    train_aging,
    train_controller,
    train_temporal,
)
from .world import ADAPTER_KEYS, POSE_BOX, CameraPose, ImageSample, ToyWorld, build_adapters

log = logging.getLogger(__name__)

# key: (default, doc).  The default's type is the accepted type.
DEFAULTS: dict = {
    "seed": (0, "master seed for every derived random stream"),
    "run_dir": ("runs/default", "directory for checkpoints, logs, dataset and reports"),
    "world.seed": (0, "toy world seed"),
    "world.resolution": (64, "toy image size in pixels"),
    **{f"adapters.{k}": ("toy", f"{k} adapter: 'toy' or 'external:<path.py>'") for k in ADAPTER_KEYS},
    "diffusion.T": (1000, "training timesteps"),
    "diffusion.schedule": ("scaled_linear", "beta schedule: linear or scaled_linear"),
    "modulator.steps": (4000, "age modulator training steps"),
    "modulator.lr": (1e-3, "age modulator learning rate"),
    "modulator.batch_size": (64, "age modulator batch size"),
    "modulator.norm_axis": ("row", "normalisation statistics: row or global"),
    "modulator.shared_rows": (True, "one residual row broadcast to every latent layer"),
    **{f"loss.{k}": (getattr(LossWeights(), k), f"weight of the {k} term") for k in TERMS},
    "dataset.identities": (64, "identities N"),
    "dataset.views": (8, "views per identity V"),
    "dataset.ages": (3, "ages per identity A"),
    "dataset.delta_min": (10.0, "smallest age offset in years"),
    "dataset.delta_max": (40.0, "largest age offset in years"),
    "dataset.val_fraction": (0.0, "share of identities marked val"),
    "dataset.workers": (1, "parallel render workers"),
    "dataset.max_bytes": (2 * 1024**3, "disk budget in bytes"),
    "dataset.path": ("", "dataset directory (default <run_dir>/dataset)"),
    "base.steps": (3000, "toy base pretraining steps"),
    "base.lr": (2e-3, "toy base learning rate"),
    "base.batch_size": (16, "toy base batch size"),
    "base.ref_prob": (0.5, "share of base steps that see reference tokens"),
    "aging.steps": (1500, "aging network steps"),
    "aging.lr": (1e-3, "aging network learning rate"),
    "aging.batch_size": (16, "aging network batch size"),
    "aging.separate_ref_proj": (False, "give reference tokens their own key/value maps"),
    "view.steps": (4000, "view model fine-tuning steps"),
    "view.lr": (1e-3, "view model learning rate"),
    "view.batch_size": (16, "view model batch size"),
    "controller.steps": (1500, "control branch steps"),
    "controller.lr": (1e-3, "control branch learning rate"),
    "controller.batch_size": (16, "control branch batch size"),
    "controller.condition": ("angle", "angle (primary) or rgb (ablation arm)"),
    "controller.encoder_injection": (False, "add control residuals on the encoder side instead of the skips"),
    "temporal.steps": (1000, "temporal layer steps"),
    "temporal.lr": (1e-3, "temporal layer learning rate"),
    "temporal.batch_size": (16, "frames per temporal batch (whole groups)"),
    "temporal.frame_pos": (False, "add a sinusoidal frame encoding (breaks permutation equivariance)"),
    "sampler.steps": (20, "DDIM steps"),
    "sampler.guidance_scale": (1.0, "classifier-free guidance scale"),
    "sampler.clip": (True, "clip the clean-latent estimate to the codec range"),
    "eval.identities": (16, "held-out identities"),
    "eval.ages": ([0, 10, 20, 30, 40, 50, 60, 70], "target ages"),
    "eval.views": (8, "views per identity"),
    "eval.seed": (12345, "held-out subject seed"),
    "eval.pose_mode": ("perimeter", "perimeter or random"),
    "eval.large_gap": (True, "run the 0/70 large-gap protocol"),
}
CHOICES = {
    "diffusion.schedule": ("linear", "scaled_linear"),
    "modulator.norm_axis": ("row", "global"),
    "controller.condition": ("angle", "rgb"),
    "eval.pose_mode": ("perimeter", "random"),
}
# Keys that do not change any number a run produces.
UNHASHED = ("run_dir", "dataset.path", "dataset.workers", "dataset.max_bytes")

STAGES = ("modulator", "dataset", "base", "aging", "view-finetune", "controller", "temporal")
TRAIN_STAGES = ("modulator", "base", "aging", "view-finetune", "controller", "temporal")
PREREQS = {
    "modulator": (),
    "dataset": ("modulator",),
    "base": ("modulator",),
    "aging": ("base", "dataset"),
    "view-finetune": ("aging",),
    "controller": ("view-finetune",),
    "controller-rgb": ("view-finetune",),
    "temporal": ("controller",),
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class StageOrderError(RuntimeError):
    pass


class FreezeViolation(RuntimeError):
    pass


def config_help() -> str:
    width = max(map(len, DEFAULTS))
    return "\n".join(f"  {k.ljust(width)}  {d} (default {v!r})" for k, (v, d) in DEFAULTS.items())


def _coerce(key: str, value):
    default = DEFAULTS[key][0]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(key, f"expected a list of numbers, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


class RunConfig:
    """Flat ``key: value`` configuration, validated on construction."""

    def __init__(self, values: dict | None = None):
        merged = {k: v for k, (v, _) in DEFAULTS.items()}
        for key, value in (values or {}).items():
            if not isinstance(key, str) or key not in DEFAULTS:
                raise ConfigError(str(key), "unknown configuration key")
            merged[key] = _coerce(key, value)
        self.values = merged
        self.validate()

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) if path.exists() else None
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"not valid YAML: {exc}") from exc
        if not path.exists():
            raise ConfigError("<file>", f"config file {path} not found")
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("<file>", "config must be a flat mapping of key: value")
        for key, value in raw.items():
            if isinstance(value, dict):
                raise ConfigError(str(key), "nested mappings are not allowed; use dotted keys")
        return cls({**raw, **(overrides or {})})

    @staticmethod
    def parse_override(text: str) -> tuple[str, object]:
        if "=" not in text:
            raise ConfigError(text, "override must look like key=value")
        key, raw = text.split("=", 1)
        return key.strip(), yaml.safe_load(raw)

    def __getitem__(self, key):
        return self.values[key]

    def with_values(self, **kw) -> "RunConfig":
        return RunConfig({**self.values, **{k.replace("__", "."): v for k, v in kw.items()}})

    def validate(self):
        v = self.values
        positive = [k for k in v if k.endswith((".steps", ".batch_size", ".lr", ".T")) and k != "sampler.steps"]
        for k in positive:
            if k.endswith(".steps") and v[k] < 0:
                raise ConfigError(k, "must be >= 0")
            if not k.endswith(".steps") and not v[k] > 0:
                raise ConfigError(k, "must be > 0")
        for k, options in CHOICES.items():
            if v[k] not in options:
                raise ConfigError(k, f"must be one of {options}")
        for k in DEFAULTS:
            if k.startswith("adapters.") and not (v[k] == "toy" or v[k].startswith("external:")):
                raise ConfigError(k, "must be 'toy' or 'external:<path>'")
            if k.startswith("loss.") and not v[k] >= 0:
                raise ConfigError(k, "must be >= 0")
        if not 1 <= v["sampler.steps"] <= v["diffusion.T"]:
            raise ConfigError("sampler.steps", f"must be in [1, {v['diffusion.T']}]")
        if v["sampler.guidance_scale"] < 0:
            raise ConfigError("sampler.guidance_scale", "must be >= 0")
        for k in ("dataset.identities", "dataset.views", "dataset.ages", "eval.identities", "eval.views", "dataset.workers"):
            if v[k] < 1:
                raise ConfigError(k, "must be >= 1")
        if not 0 <= v["dataset.delta_min"] <= v["dataset.delta_max"] <= 100:
            raise ConfigError("dataset.delta_max", "need 0 <= delta_min <= delta_max <= 100")
        if not 0 <= v["dataset.val_fraction"] < 1:
            raise ConfigError("dataset.val_fraction", "must be in [0, 1)")
        if not 0 <= v["base.ref_prob"] <= 1:
            raise ConfigError("base.ref_prob", "must be in [0, 1]")
        if not v["eval.ages"] or any(not 0 <= a <= 100 for a in v["eval.ages"]):
            raise ConfigError("eval.ages", "need a non-empty list of ages in [0, 100]")
        if v["world.resolution"] % 16 or v["world.resolution"] < 32:
            raise ConfigError("world.resolution", "must be a multiple of 16 and at least 32")

    def hash(self) -> str:
        payload = {k: v for k, v in self.values.items() if k not in UNHASHED}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.values, sort_keys=False)

    def stage_config(self, prefix: str) -> StageConfig:
        v = self.values
        cfg = StageConfig(steps=v[f"{prefix}.steps"], lr=v[f"{prefix}.lr"], batch_size=v[f"{prefix}.batch_size"], seed=derive_seed(v["seed"], prefix))
        if prefix == "base":
            cfg.ref_prob = v["base.ref_prob"]
        return cfg


@contextlib.contextmanager
def seeded(seed: int):
    """Deterministic parameter initialisation without touching the global stream."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        yield


def _sha(*parts) -> str:
    return hashlib.sha256("|".join(map(str, parts)).encode()).hexdigest()[:16]


class Run:
    """One run directory: config, lazily built world, checkpoints."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.run_dir = Path(config["run_dir"])
        self.ckpt_dir = self.run_dir / "checkpoints"
        self.log_dir = self.run_dir / "logs"
        self.dataset_dir = Path(config["dataset.path"]) if config["dataset.path"] else self.run_dir / "dataset"
        self.world = ToyWorld(seed=config["world.seed"], resolution=config["world.resolution"])
        self.adapters = build_adapters({k: config[f"adapters.{k}"] for k in ADAPTER_KEYS}, self.world)
        self.codec = LatentCodec()
        self.schedule = NoiseSchedule(config["diffusion.T"], config["diffusion.schedule"])
        self.sampler = SamplerConfig(config["sampler.steps"], config["sampler.guidance_scale"], config["sampler.clip"])

    # -- checkpoints --------------------------------------------------------

    def manifest_path(self, stage: str) -> Path:
        return self.ckpt_dir / f"{stage}.json"

    def has(self, stage: str) -> bool:
        return self.manifest_path(stage).exists()

    def manifest(self, stage: str) -> dict:
        if not self.has(stage):
            raise StageOrderError(f"stage '{stage}' has no checkpoint in {self.ckpt_dir}")
        return json.loads(self.manifest_path(stage).read_text())

    def require(self, stage: str):
        for pre in PREREQS[stage]:
            if not self.has(pre):
                raise StageOrderError(f"stage '{stage}' needs the '{pre}' stage to be run first")

    def save(self, stage: str, state: dict | None, extra: dict | None = None) -> Path:
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        parents = {p: self.manifest(p)["lineage_hash"] for p in PREREQS[stage]}
        checksum = param_checksum(state) if state is not None else ""
        manifest = {
            "stage": stage,
            "config_hash": self.config.hash(),
            "schedule": self.schedule.signature(),
            "param_checksum": checksum,
            "parents": parents,
            "lineage_hash": _sha(stage, self.config.hash(), checksum, *sorted(parents.values())),
            **(extra or {}),
        }
        if state is not None:
            torch.save(state, self.ckpt_dir / f"{stage}.pt")
        self.manifest_path(stage).write_text(json.dumps(manifest, indent=2) + "\n")
        return self.manifest_path(stage)

    def state(self, stage: str) -> dict:
        manifest = self.manifest(stage)
        state = torch.load(self.ckpt_dir / f"{stage}.pt", weights_only=True)
        if param_checksum(state) != manifest["param_checksum"]:
            raise StageOrderError(f"checkpoint '{stage}' does not match its manifest checksum")
        return state

    def lineage(self, stage: str) -> list[str]:
        """Stage names from the root to ``stage`` along first parents."""
        chain = [stage]
        while PREREQS[chain[-1]]:
            chain.append(PREREQS[chain[-1]][0])
        return chain[::-1]

    # -- model assembly ---------------------------------------------------------

    def modulator(self) -> AgeModulator:
        c = self.config
        gen = self.adapters.generator
        mod = AgeModulator(gen.L, gen.D, self.adapters.text_embedder.embed_dim, shared_rows=c["modulator.shared_rows"], norm_axis=c["modulator.norm_axis"])
        mod.load_state_dict(self.state("modulator"))
        return mod.requires_grad_(False)

    def base(self) -> UNet:
        unet = UNet()
        unet.load_state_dict(self.state("base"))
        return unet.requires_grad_(False)

    def bundle(self, trained: bool = True) -> AgingBundle:
        bundle = AgingBundle(self.base(), separate_ref_proj=self.config["aging.separate_ref_proj"])
        if trained:
            bundle.load_trainable_state(self.state("aging"))
        return bundle

    def view_model(self, trained: bool = True) -> ViewModel:
        with seeded(derive_seed(self.config["seed"], "view-init")):
            vm = ViewModel.from_base(self.base())
        if trained:
            vm.load_state_dict(self.state("view-finetune"))
        return vm

    def controller(self, condition: str = "angle", trained: bool = True) -> ControlBranch:
        with seeded(derive_seed(self.config["seed"], "controller-init", condition)):
            branch = ControlBranch(self.view_model(), condition)
        if trained:
            branch.load_state_dict(self.state(controller_stage(condition)))
        return branch

    def model(self, stage: str) -> AgeViewDenoiser:
        """The composite denoiser as it stands after ``stage``."""
        if stage not in ("aging", "controller", "controller-rgb", "temporal"):
            raise ValueError(f"no sampling model for stage {stage!r}")
        model = AgeViewDenoiser(self.bundle())
        if stage != "aging":
            model.controller = self.controller("rgb" if stage == "controller-rgb" else "angle")
            model.encoder_injection = self.config["controller.encoder_injection"]
        if stage == "temporal":
            with seeded(derive_seed(self.config["seed"], "temporal-init")):
                model.add_temporal_layers()
            model.temporal_layers.load_state_dict(self.state("temporal"))
        model.frame_pos = self.config["temporal.frame_pos"]
        return model.requires_grad_(False).eval()

    def latest_model_stage(self) -> str:
        for stage in ("temporal", "controller", "aging"):
            if self.has(stage):
                return stage
        raise StageOrderError("no aging checkpoint yet; run the 'aging' stage first")

    def latent_data(self) -> LatentData:
        groups = load_dataset(self.dataset_dir / MANIFEST_NAME)
        data = LatentData(groups, self.codec)
        return data.subset("train") if "val" in data.split else data


def controller_stage(condition: str) -> str:
    return "controller" if condition == "angle" else "controller-rgb"


def frozen_checksums(model: AgeViewDenoiser) -> dict:
    """Checksums of the frozen base (minus inserted layers), the aging replica and the controller."""
    out = {"base": model.bundle.base_checksum(), "aging": model.bundle.aging_checksum()}
    if model.controller is not None:
        out["controller"] = param_checksum(model.controller)
    return out


def _check_frozen(before: dict, after: dict, keys, stage: str):
    for k in keys:
        if before[k] != after[k]:
            raise FreezeViolation(f"stage '{stage}' modified frozen parameters of '{k}'")


def _log_file(run: Run, stage: str):
    run.log_dir.mkdir(parents=True, exist_ok=True)
    return open(run.log_dir / f"{stage}.jsonl", "w")


def stage1_config(c: RunConfig) -> Stage1Config:
    """Age modulator training settings of a run."""
    return Stage1Config(
        steps=c["modulator.steps"], batch_size=c["modulator.batch_size"], lr=c["modulator.lr"], seed=derive_seed(c["seed"], "modulator"),
        weights=LossWeights.from_config(c.values), norm_axis=c["modulator.norm_axis"], shared_rows=c["modulator.shared_rows"],
    )


def run_stage(config: RunConfig, stage: str) -> Path:
    """Run one stage with its freeze mask; returns the checkpoint manifest path."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
    run = Run(config)
    c = config
    condition = c["controller.condition"]
    key = controller_stage(condition) if stage == "controller" else stage
    run.require(key)
    torch.manual_seed(derive_seed(c["seed"], "global", key))

    if stage == "modulator":
        with _log_file(run, stage) as fh:
            mod, _ = train_stage1(run.adapters, stage1_config(c), fh)
        return run.save(stage, mod.state_dict(), {"graph": mod.config()})

    if stage == "dataset":
        dcfg = DatasetConfig(
            identities=c["dataset.identities"], views=c["dataset.views"], ages=c["dataset.ages"], seed=derive_seed(c["seed"], "dataset"),
            delta_min=c["dataset.delta_min"], delta_max=c["dataset.delta_max"], val_fraction=c["dataset.val_fraction"],
            max_bytes=c["dataset.max_bytes"], workers=c["dataset.workers"],
        )
        manifest = generate_dataset(run.modulator(), run.adapters, dcfg, run.dataset_dir, {"modulator": run.manifest("modulator")["lineage_hash"]})
        digest = hashlib.sha256((run.dataset_dir / MANIFEST_NAME).read_bytes()).hexdigest()
        return run.save(stage, None, {"dataset_hash": manifest.config_hash, "manifest_sha256": digest, "records": len(manifest.records)})

    if stage == "base":
        with seeded(derive_seed(c["seed"], "base-init")):
            unet = UNet()
        with _log_file(run, stage) as fh:
            unet, _ = pretrain_base(run.adapters, run.modulator(), run.codec, run.schedule, config.stage_config("base"), unet, fh)
        return run.save(stage, unet.state_dict(), {"graph": unet.cfg.as_dict(), "checksums": {"base": param_checksum(unet)}})

    data = run.latent_data()
    if stage == "aging":
        bundle = run.bundle(trained=False)
        model = AgeViewDenoiser(bundle)
        before = frozen_checksums(model)
        with _log_file(run, stage) as fh:
            train_aging(bundle, data, run.schedule, config.stage_config("aging"), fh)
        after = frozen_checksums(model)
        _check_frozen(before, after, ["base"], stage)
        return run.save(stage, bundle.trainable_state(), {"checksums": after})

    if stage == "view-finetune":
        base_sum = param_checksum(run.base())
        vm = run.view_model(trained=False)
        with _log_file(run, stage) as fh:
            finetune_view_model(vm, run.adapters, run.codec, run.schedule, config.stage_config("view"), fh)
        after = {"base": param_checksum(run.base()), "aging": run.manifest("aging")["checksums"]["aging"]}
        if after["base"] != base_sum:
            raise FreezeViolation("view fine-tuning modified the base checkpoint")
        return run.save(stage, vm.state_dict(), {"checksums": after})

    if stage == "controller":
        model = AgeViewDenoiser(run.bundle())
        model.controller = run.controller(condition, trained=False)
        model.encoder_injection = c["controller.encoder_injection"]
        before = frozen_checksums(model)
        with _log_file(run, key) as fh:
            train_controller(model, data, run.schedule, config.stage_config("controller"), log_file=fh)
        after = frozen_checksums(model)
        _check_frozen(before, after, ["base", "aging"], key)
        return run.save(key, model.controller.state_dict(), {"condition": condition, "checksums": after})

    if stage == "temporal":
        model = run.model("controller")
        with seeded(derive_seed(c["seed"], "temporal-init")):
            model.add_temporal_layers()
        model.frame_pos = c["temporal.frame_pos"]
        before = frozen_checksums(model)
        with _log_file(run, stage) as fh:
            train_temporal(model, data, run.schedule, config.stage_config("temporal"), fh)
        after = frozen_checksums(model)
        _check_frozen(before, after, ["base", "aging", "controller"], stage)
        return run.save(stage, model.temporal_layers.state_dict(), {"checksums": after})
    raise AssertionError(stage)


# -- sampling ------------------------------------------------------------------


def make_sample_fn(run: Run, stage: str, subjects=None, sampler: SamplerConfig | None = None):
    """``sample_fn(inputs, ages, poses, seed, idx=None)`` for the model after ``stage``."""
    model = run.model(stage)
    sampler = sampler or run.sampler
    rgb = stage == "controller-rgb"

    def sample_fn(inputs, ages, poses, seed, idx=None):
        poses = torch.as_tensor(poses, dtype=torch.float32).reshape(-1, 2)
        f, g = poses.shape[0], inputs.shape[0]
        x_in = run.codec.encode(inputs)
        enc = view_encoding(poses[:, 0], poses[:, 1]).repeat(g, 1)
        hint = None
        if rgb:
            if subjects is None or idx is None:
                raise ValueError("the rgb arm needs subject latents to render its target-pose hint")
            styles = subjects.styles[idx].repeat_interleave(f, 0)
            hint = run.codec.encode(run.adapters.generator.render(styles, poses.repeat(g, 1)))
        return sample_groups(model, run.codec, run.schedule, x_in, ages, enc, f, seed, sampler, stage != "aging", hint)

    return sample_fn


def _check_pose(pose: CameraPose):
    if abs(pose.azimuth) > POSE_BOX[0] + 1e-9 or abs(pose.polar) > POSE_BOX[1] + 1e-9:
        raise ValueError(f"pose {pose.as_tuple()} outside the pose box +-{POSE_BOX[0]} x +-{POSE_BOX[1]}")


@torch.no_grad()
def sample_multiview(run: Run, image: torch.Tensor, target_age: float, poses: list[CameraPose], seed: int = 0, stage: str | None = None, sampler=None) -> list[ImageSample]:
    """Age ``image`` (taken at pose (0, 0)) to ``target_age`` and render every pose.

    All frames share one joint DDIM trajectory so temporal layers see them
    together.
    """
    if not 0 <= target_age <= 100:
        raise ValueError(f"target age {target_age} outside [0, 100]")
    if not poses:
        raise ValueError("need at least one pose")
    for p in poses:
        _check_pose(p)
    stage = stage or run.latest_model_stage()
    fn = make_sample_fn(run, stage, sampler=sampler)
    pose_t = torch.tensor([p.as_tuple() for p in poses], dtype=torch.float32)
    frames = fn(image.unsqueeze(0), torch.tensor([float(target_age)]), pose_t, seed)
    return [ImageSample(frames[i], p) for i, p in enumerate(poses)]


# -- evaluation ------------------------------------------------------------------


def protocol_from_config(config: RunConfig) -> EvalProtocol:
    c = config
    return EvalProtocol(c["eval.identities"], tuple(c["eval.ages"]), c["eval.views"], c["eval.seed"], c["eval.pose_mode"])


def evaluate_run(config: RunConfig, stage: str | None = None, large_gap: bool | None = None) -> EvalReport:
    run = Run(config)
    stage = stage or run.latest_model_stage()
    protocol = protocol_from_config(config)
    subjects = heldout_subjects(run.adapters, protocol.identities, protocol.seed)
    fn = make_sample_fn(run, stage, subjects)
    report = evaluate(fn, run.adapters, subjects, protocol)
    report.stage = stage
    report.config_hash = config.hash()
    if config["eval.large_gap"] if large_gap is None else large_gap:
        report.large_gap = large_gap_protocol(fn if stage != "controller-rgb" else make_sample_fn(run, "controller", subjects), run.adapters, run.modulator(), subjects, seed=protocol.seed)
    return report


def run_pipeline(config: RunConfig, ablation: bool = True, timings: dict | None = None) -> EvalReport:
    """All stages in order, then the evaluation of every model variant.

    The returned report is for the final model; the other variants' view and
    identity numbers go into ``report.extra``.  Wall-clock seconds per step
    are written into ``timings`` when given.
    """
    timings = {} if timings is None else timings

    def timed(name, fn, *args, **kw):
        start = time.perf_counter()
        out = fn(*args, **kw)
        timings[name] = time.perf_counter() - start
        return out

    for stage in STAGES:
        timed(stage, run_stage, config, stage)
    if ablation:
        timed("controller-rgb", run_stage, config.with_values(**{"controller__condition": "rgb"}), "controller")
    report = timed("eval", evaluate_run, config, "temporal")
    extra = {}
    variants = ["aging", "controller"] + (["controller-rgb"] if ablation else [])
    for stage in variants:
        r = timed(f"eval-{stage}", evaluate_run, config, stage, large_gap=False)
        extra.update({f"{stage}.view_l2": r.view_l2, f"{stage}.id_cosine": r.id_cosine, f"{stage}.age_mae": r.age_mae, f"{stage}.cross_view_id": r.cross_view_id})
    report.extra = extra
    out = Path(config["run_dir"]) / "eval.json"
    out.write_text(report.to_json() + "\n")
    return report
