"""Modulator training and the multiview aging dataset built from it."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .diffusion import DivergenceError
from .losses import LossWeights, stage1_losses
from .modulation import AgeModulator
from .world import POSE_BOX, Adapters, CameraPose, age_prompt

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
MANIFEST_VERSION = 1


class DatasetError(ValueError):
    pass


def derive_seed(*parts) -> int:
    """Stable 62-bit seed from any sequence of printable parts."""
    digest = hashlib.sha256(":".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**62 - 1)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def to_uint8(pixels: torch.Tensor) -> np.ndarray:
    """[3, H, W] in [-1, 1] -> HWC uint8."""
    q = ((pixels.detach().double().clamp(-1, 1) + 1.0) * 127.5).round()
    return q.to(torch.uint8).permute(1, 2, 0).numpy()


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1) / 127.5 - 1.0


def quantize(pixels: torch.Tensor) -> torch.Tensor:
    return from_uint8(to_uint8(pixels))


def write_png(path: Path, pixels: torch.Tensor) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path, format="PNG")
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_png(path: Path) -> torch.Tensor:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def sample_poses(generator: torch.Generator, n: int, box=POSE_BOX) -> torch.Tensor:
    u = torch.rand(n, 2, generator=generator, dtype=torch.float64) * 2 - 1
    return (u * torch.tensor(box, dtype=torch.float64)).float()


# -- modulator training ------------------------------------------------------


@dataclass
class Stage1Config:
    steps: int = 4000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    age_min: int = 0
    age_max: int = 75
    weights: LossWeights = field(default_factory=LossWeights)
    norm_axis: str = "row"
    shared_rows: bool = True

    def as_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d


def _prompt_embeddings(embedder, ages) -> torch.Tensor:
    return torch.stack([embedder.embed_text(age_prompt(a)).values for a in ages])


def _stage1_batch(adapters: Adapters, cfg: Stage1Config, seed: int, n: int):
    g = torch.Generator().manual_seed(seed)
    gen = adapters.generator
    w = gen.map_to_w(torch.randn(n, 1, 512, generator=g))
    poses = sample_poses(g, n)
    target = torch.randint(cfg.age_min, cfg.age_max + 1, (n,), generator=g).float()
    with torch.no_grad():
        source = adapters.age_predictor.predict_age(gen.render(w, torch.zeros_like(poses)))
    return w, poses, target, source


def new_modulator(adapters: Adapters, cfg: Stage1Config) -> AgeModulator:
    gen = adapters.generator
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return AgeModulator(
            num_layers=gen.L,
            style_dim=gen.D,
            embed_dim=adapters.text_embedder.embed_dim,
            shared_rows=cfg.shared_rows,
            norm_axis=cfg.norm_axis,
        )


def stage1_report(modulator, adapters, cfg: Stage1Config, w, poses, target, source):
    emb = adapters.text_embedder
    e_t = _prompt_embeddings(emb, target.tolist())
    e_i = _prompt_embeddings(emb, source.round().tolist())
    out = modulator(w, e_t)
    x = adapters.generator.render(w, poses)
    x_age = adapters.generator.render(out.aged, poses)
    return stage1_losses(adapters, x, x_age, out.residual, target, e_t, e_i, cfg.weights)


def heldout_age_mae(modulator, adapters, cfg: Stage1Config, n: int = 64, seed: int = 987_654) -> float:
    """Mean |target - predicted age| of aged renders on fresh latents."""
    w, poses, target, _ = _stage1_batch(adapters, cfg, seed, n)
    with torch.no_grad():
        aged = modulator(w, _prompt_embeddings(adapters.text_embedder, target.tolist())).aged
        pred = adapters.age_predictor.predict_age(adapters.generator.render(aged, poses))
    return float((pred - target).abs().mean())


def heldout_stage1_loss(modulator, adapters, cfg: Stage1Config, n: int = 64, seed: int = 987_654) -> float:
    """Weighted total objective on a fixed batch of fresh latents."""
    w, poses, target, source = _stage1_batch(adapters, cfg, seed, n)
    with torch.no_grad():
        return float(stage1_report(modulator, adapters, cfg, w, poses, target, source).total)


def train_stage1(adapters: Adapters, cfg: Stage1Config, log_file=None, modulator=None) -> tuple[AgeModulator, list]:
    """Fit the age modulator on freshly sampled latents.

    Each step draws latents, poses and integer target ages, renders the
    original and aged latents at the same pose, and descends the weighted
    loss.  Returns the modulator and the per-step loss history.
    """
    modulator = modulator or new_modulator(adapters, cfg)
    history = []
    if cfg.steps == 0:
        return modulator, history
    opt = torch.optim.Adam(modulator.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps)
    for step in range(cfg.steps):
        batch = _stage1_batch(adapters, cfg, derive_seed(cfg.seed, "stage1", step), cfg.batch_size)
        report = stage1_report(modulator, adapters, cfg, *batch)
        if not torch.isfinite(report.total):
            raise DivergenceError(f"modulator loss diverged at step {step}: {report.as_floats()}")
        opt.zero_grad(set_to_none=True)
        report.total.backward()
        opt.step()
        sched.step()
        row = {"step": step, **{k: float(v.detach()) for k, v in report.terms.items()}, "total": float(report.total.detach())}
        history.append(row)
        if log_file is not None:
            log_file.write(json.dumps(row) + "\n")
        if step % 500 == 0:
            log.info("stage1 step %d total %.4f", step, row["total"])
    return modulator, history


# -- dataset -----------------------------------------------------------------


@dataclass
class DatasetRecord:
    identity_id: int
    view_index: int
    age_index: int
    pose: CameraPose
    source_age: float
    target_age: float
    image_path: str
    split: str
    latent_seed: int
    input_path: str
    sha256: str = ""

    def to_json(self) -> dict:
        d = asdict(self)
        d["pose"] = {"azimuth": self.pose.azimuth, "polar": self.pose.polar}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetRecord":
        d = dict(d)
        d["pose"] = CameraPose(**d["pose"])
        return cls(**d)


@dataclass
class DatasetManifest:
    records: list
    config_hash: str
    counts: tuple  # (identities, views, ages)
    header: dict = field(default_factory=dict)

    def validate(self):
        n, v, a = self.counts
        if len(self.records) != n * v * a:
            raise DatasetError(f"expected {n * v * a} records, found {len(self.records)}")
        seen = set()
        for i, r in enumerate(self.records):
            key = (r.identity_id, r.view_index, r.age_index)
            if key in seen:
                raise DatasetError(f"record {i}: duplicate (identity, view, age) {key}")
            seen.add(key)
            if not (0 <= r.view_index < v) or not (0 <= r.age_index < a):
                raise DatasetError(f"record {i}: index out of range")
            if not (0 <= r.target_age <= 100):
                raise DatasetError(f"record {i}: target age {r.target_age} outside [0, 100]")

    def write(self, path: Path):
        header = {"type": "header", "version": MANIFEST_VERSION, "config_hash": self.config_hash,
                  "counts": list(self.counts), **self.header}
        with open(path, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for r in self.records:
                fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: Path) -> "DatasetManifest":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise DatasetError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("type") != "header":
            raise DatasetError(f"{path}: first line is not a header")
        records = [DatasetRecord.from_json(json.loads(line)) for line in lines[1:] if line.strip()]
        extra = {k: v for k, v in header.items() if k not in ("type", "version", "config_hash", "counts")}
        m = cls(records, header["config_hash"], tuple(header["counts"]), extra)
        m.validate()
        return m


@dataclass
class DatasetConfig:
    identities: int = 64
    views: int = 8
    ages: int = 3
    seed: int = 0
    delta_min: float = 10.0
    delta_max: float = 40.0
    fixed_ages: tuple | None = None
    val_fraction: float = 0.0
    max_bytes: int = 2 * 1024**3
    workers: int = 1


def age_offsets(a: int) -> list[float]:
    if a == 1:
        return [0.0]
    return [-1.0 + 2.0 * i / (a - 1) for i in range(a)]


def identity_plan(adapters: Adapters, cfg: DatasetConfig, identity_id: int) -> dict:
    """Seeded latent, poses and target ages for one identity."""
    latent_seed = derive_seed(cfg.seed, "identity", identity_id)
    g = torch.Generator().manual_seed(derive_seed(cfg.seed, "plan", identity_id))
    gen = adapters.generator
    w = gen.map_to_w(torch.randn(1, 512, generator=torch.Generator().manual_seed(latent_seed)))
    poses = sample_poses(g, cfg.views)
    with torch.no_grad():
        source = float(adapters.age_predictor.predict_age(gen.render(w, torch.zeros(2))))
    delta = cfg.delta_min + (cfg.delta_max - cfg.delta_min) * float(torch.rand(1, generator=g, dtype=torch.float64))
    if cfg.fixed_ages:
        ages = [float(a) for a in cfg.fixed_ages]
        offsets = [None] * len(ages)
    else:
        offsets = age_offsets(cfg.ages)
        ages = [float(round(min(100.0, max(0.0, source + o * delta)))) for o in offsets]
    return {"latent_seed": latent_seed, "w": w, "poses": poses, "source_age": source, "ages": ages, "offsets": offsets}


def aged_styles(modulator: AgeModulator, adapters: Adapters, w: torch.Tensor, target_age: float, offset) -> torch.Tensor:
    """The latent rendered for one (identity, age); the source age keeps ``w``."""
    if offset == 0.0:
        return w
    with torch.no_grad():
        e_t = adapters.text_embedder.embed_text(age_prompt(target_age)).values
        return modulator(w, e_t).aged


def rerender_record(record: DatasetRecord, modulator, adapters: Adapters, cfg: DatasetConfig) -> torch.Tensor:
    plan = identity_plan(adapters, cfg, record.identity_id)
    if plan["latent_seed"] != record.latent_seed:
        raise DatasetError("latent seed does not match the dataset configuration")
    styles = aged_styles(modulator, adapters, plan["w"], record.target_age, plan["offsets"][record.age_index])
    pose = torch.tensor(record.pose.as_tuple(), dtype=torch.float32)
    with torch.no_grad():
        return adapters.generator.render(styles, pose)


def _generate_identity(modulator, adapters, cfg: DatasetConfig, out_dir: Path, i: int) -> list:
    plan = identity_plan(adapters, cfg, i)
    split = "val" if i >= round(cfg.identities * (1 - cfg.val_fraction)) else "train"
    rel_dir = Path("images") / f"{i:05d}"
    input_rel = str(rel_dir / "input.png")
    with torch.no_grad():
        write_png(out_dir / input_rel, adapters.generator.render(plan["w"], torch.zeros(2)))
    records = []
    for a, (age, off) in enumerate(zip(plan["ages"], plan["offsets"])):
        styles = aged_styles(modulator, adapters, plan["w"], age, off)
        with torch.no_grad():
            images = adapters.generator.render(styles, plan["poses"])
        for v in range(cfg.views):
            rel = str(rel_dir / f"v{v}_a{a}.png")
            digest = write_png(out_dir / rel, images[v])
            pose = CameraPose(float(plan["poses"][v, 0]), float(plan["poses"][v, 1]))
            records.append(DatasetRecord(i, v, a, pose, plan["source_age"], age, rel, split, plan["latent_seed"], input_rel, digest))
    return records


def generate_dataset(modulator: AgeModulator, adapters: Adapters, cfg: DatasetConfig, out_dir, extra_header=None) -> DatasetManifest:
    """Render ``identities x views x ages`` images plus ``manifest.jsonl``.

    All views of one (identity, age) come from a single aged latent.
    """
    out_dir = Path(out_dir)
    n, v = cfg.identities, cfg.views
    a = len(cfg.fixed_ages) if cfg.fixed_ages else cfg.ages
    res = adapters.generator.resolution
    estimate = (n * (v * a + 1)) * (res * res * 3 + 1024)
    if estimate > cfg.max_bytes:
        raise DatasetError(f"dataset needs about {estimate} bytes, over the budget of {cfg.max_bytes}")
    out_dir.mkdir(parents=True, exist_ok=True)
    if not out_dir.is_dir():
        raise DatasetError(f"cannot write to {out_dir}")
    chash = config_hash({"dataset": asdict(cfg), "modulator": _module_digest(modulator), "world": getattr(adapters.generator, "seed", None)})
    if cfg.workers > 1 and n > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            chunks = list(pool.map(lambda i: _generate_identity(modulator, adapters, cfg, out_dir, i), range(n)))
    else:
        chunks = [_generate_identity(modulator, adapters, cfg, out_dir, i) for i in range(n)]
    records = [r for chunk in chunks for r in chunk]
    header = {"dataset_config": asdict(cfg), **(extra_header or {})}
    manifest = DatasetManifest(records, chash, (n, v, a), header)
    manifest.validate()
    manifest.write(out_dir / MANIFEST_NAME)
    return manifest


def _module_digest(module) -> str:
    from .diffusion import param_checksum

    return param_checksum(module)[:16]


# -- loading -----------------------------------------------------------------


@dataclass
class FrameGroup:
    """All views of one identity at one target age."""

    identity_id: int
    age_index: int
    source_age: float
    target_age: float
    split: str
    input_image: torch.Tensor  # [3, H, W], pose (0, 0), source age
    poses: torch.Tensor  # [V, 2]
    images: torch.Tensor  # [V, 3, H, W]

    def samples(self):
        """(input image, target age, target pose, target image, group key) per view."""
        key = (self.identity_id, self.age_index)
        for v in range(self.poses.shape[0]):
            pose = CameraPose(float(self.poses[v, 0]), float(self.poses[v, 1]))
            yield self.input_image, self.target_age, pose, self.images[v], key


def _checked_image(root: Path, rel: str, digest: str, index: int) -> torch.Tensor:
    path = root / rel
    if not path.exists():
        raise DatasetError(f"record {index}: missing file {rel}")
    if digest and hashlib.sha256(path.read_bytes()).hexdigest() != digest:
        raise DatasetError(f"record {index}: checksum mismatch for {rel}")
    return read_png(path)


def load_dataset(manifest_path) -> list[FrameGroup]:
    """Load and verify a generated dataset, grouped into frame groups.

    Images are returned exactly as stored; no preprocessing is applied.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    manifest = DatasetManifest.read(manifest_path)
    root = manifest_path.parent
    inputs: dict = {}
    groups: dict = {}
    for i, r in enumerate(manifest.records):
        if r.input_path not in inputs:
            inputs[r.input_path] = _checked_image(root, r.input_path, "", i)
        img = _checked_image(root, r.image_path, r.sha256, i)
        key = (r.identity_id, r.age_index)
        groups.setdefault(key, []).append((r, img))
    out = []
    for (ident, a), items in sorted(groups.items()):
        items.sort(key=lambda it: it[0].view_index)
        r0 = items[0][0]
        out.append(FrameGroup(
            identity_id=ident,
            age_index=a,
            source_age=r0.source_age,
            target_age=r0.target_age,
            split=r0.split,
            input_image=inputs[r0.input_path],
            poses=torch.tensor([it[0].pose.as_tuple() for it in items], dtype=torch.float32),
            images=torch.stack([it[1] for it in items]),
        ))
    return out


def frame_groups_by_identity(groups: list[FrameGroup]) -> dict:
    out: dict = {}
    for g in groups:
        out.setdefault(g.identity_id, []).append(g)
    return out
