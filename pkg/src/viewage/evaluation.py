"""Held-out evaluation: age accuracy, identity preservation, view accuracy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .control import perimeter_poses, pose_sq_error
from .dataset import derive_seed, sample_poses
from .world import POSE_BOX, Adapters, CameraPose, age_prompt

REFERENCE_LABEL = "paper, not reproducible at desk scale"
PUBLISHED_RESULTS = {
    "main": {"age_mae": 7.46, "id_cosine": 0.68, "view_l2": 0.0092},
    "large_gap": {"0->30": (25.670, 7.19), "0->70": (59.38, 9.62), "70->30": (29.31, 5.92), "70->0": (4.12, 1.34)},
    "view_control": {"angle": 0.0092, "rgb": 0.022},
}
LARGE_GAP_PAIRS = ((0, 30), (0, 70), (70, 30), (70, 0))
FULL_SCALE_PROTOCOL = {"identities": 200, "ages": tuple(range(0, 71, 10)), "views": 8}


@dataclass
class EvalProtocol:
    identities: int = 16
    ages: tuple = tuple(range(0, 71, 10))
    views: int = 8
    seed: int = 12_345
    pose_mode: str = "perimeter"

    def __post_init__(self):
        if self.identities < 1 or self.views < 1 or not self.ages:
            raise ValueError("evaluation set is empty")
        if self.pose_mode not in ("perimeter", "random"):
            raise ValueError(f"pose_mode must be 'perimeter' or 'random', got {self.pose_mode!r}")
        if any(not 0 <= a <= 100 for a in self.ages):
            raise ValueError("evaluation ages must lie in [0, 100]")

    @property
    def counts(self) -> tuple[int, int, int]:
        return self.identities, len(self.ages), self.views

    def poses(self) -> list[CameraPose]:
        if self.pose_mode == "perimeter":
            return perimeter_poses(self.views, POSE_BOX)
        g = torch.Generator().manual_seed(derive_seed(self.seed, "eval-poses"))
        return [CameraPose(float(a), float(p)) for a, p in sample_poses(g, self.views).tolist()]


@dataclass
class EvalSubjects:
    """Held-out subjects: latents never drawn by dataset generation."""

    styles: torch.Tensor  # [n, L, D]
    inputs: torch.Tensor  # [n, 3, H, W] at pose (0, 0)
    source_age: torch.Tensor  # [n]


def heldout_subjects(adapters: Adapters, n: int, seed: int) -> EvalSubjects:
    if n < 1:
        raise ValueError("evaluation set is empty")
    gen = adapters.generator
    z = torch.stack([torch.randn(1, 512, generator=torch.Generator().manual_seed(derive_seed(seed, "eval", i))) for i in range(n)])
    w = gen.map_to_w(z)
    with torch.no_grad():
        x = gen.render(w, torch.zeros(n, 2))
        src = adapters.age_predictor.predict_age(x)
    return EvalSubjects(w, x, src)


@dataclass
class EvalReport:
    age_mae: float
    id_cosine: float
    view_l2: float
    cross_view_id: float
    per_age: dict
    config_hash: str = ""
    stage: str = ""
    counts: tuple = ()
    large_gap: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    FIELDS = ("stage", "config_hash", "counts", "age_mae", "id_cosine", "view_l2", "cross_view_id", "per_age", "large_gap", "extra")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.FIELDS}
        out["counts"] = list(self.counts)
        out["published_reference"] = {"label": REFERENCE_LABEL, **PUBLISHED_RESULTS}
        # Normalised to its JSON form so a save/load round trip compares equal.
        return json.loads(json.dumps(out))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        kw = {k: d[k] for k in cls.FIELDS if k in d}
        kw["counts"] = tuple(kw.get("counts", ()))
        return cls(**kw)

    def to_text(self) -> str:
        """Tab-delimited rows: metric, value, then the labelled published rows."""
        rows = [("metric", "value")]
        rows += [("stage", self.stage), ("config_hash", self.config_hash), ("counts", "x".join(map(str, self.counts)))]
        rows += [(k, f"{getattr(self, k):.6f}") for k in ("age_mae", "id_cosine", "view_l2", "cross_view_id")]
        for age, b in self.per_age.items():
            rows.append((f"age_{age}", f"mae={b['mae']:.4f} pred={b['pred_mean']:.2f}+-{b['pred_std']:.2f} id={b['id']:.4f} view={b['view']:.6f}"))
        for k, (m, s) in self.large_gap.items():
            rows.append((f"large_gap_{k}", f"{m:.2f}+-{s:.2f}"))
        for k, v in self.extra.items():
            rows.append((k, f"{v:.6f}" if isinstance(v, float) else str(v)))
        ref = PUBLISHED_RESULTS
        rows.append((f"[{REFERENCE_LABEL}] age_mae/id_cosine/view_l2", "/".join(str(v) for v in ref["main"].values())))
        for k, (m, s) in ref["large_gap"].items():
            rows.append((f"[{REFERENCE_LABEL}] large_gap_{k}", f"{m}+-{s}"))
        rows.append((f"[{REFERENCE_LABEL}] view_l2 angle/rgb", f"{ref['view_control']['angle']}/{ref['view_control']['rgb']}"))
        return "\n".join("\t".join(r) for r in rows)


def pairwise_cosine(emb: torch.Tensor) -> torch.Tensor:
    """Mean off-diagonal cosine within each group of ``emb`` [G, F, d]."""
    f = emb.shape[1]
    if f < 2:
        return torch.ones(emb.shape[0])
    e = F.normalize(emb, dim=-1)
    sims = e @ e.transpose(1, 2)
    return (sims.sum(dim=(1, 2)) - sims.diagonal(dim1=1, dim2=2).sum(-1)) / (f * (f - 1))


@torch.no_grad()
def evaluate(sample_fn, adapters: Adapters, subjects: EvalSubjects, protocol: EvalProtocol, chunk: int = 8) -> EvalReport:
    """Run ``sample_fn`` over subjects x ages x views and score the outputs.

    ``sample_fn(inputs [G,3,H,W], ages [G], poses [F,2], seed, idx=slice)``
    returns images [G*F, 3, H, W], frames of one subject contiguous; ``idx``
    locates the chunk within ``subjects``.
    """
    n = subjects.inputs.shape[0]
    if n == 0:
        raise ValueError("evaluation set is empty")
    poses = torch.tensor([p.as_tuple() for p in protocol.poses()], dtype=torch.float32)
    nv = poses.shape[0]
    id_in = adapters.identity_embedder.embed_identity(subjects.inputs)
    per_age = {}
    all_err, all_id, all_view, all_xv = [], [], [], []
    for age in protocol.ages:
        preds, ids, views, xv = [], [], [], []
        for start in range(0, n, chunk):
            sl = slice(start, min(n, start + chunk))
            g = sl.stop - sl.start
            ages = torch.full((g,), float(age))
            out = sample_fn(subjects.inputs[sl], ages, poses, derive_seed(protocol.seed, "sample", age, start), idx=sl)
            emb = adapters.identity_embedder.embed_identity(out)
            preds.append(adapters.age_predictor.predict_age(out))
            ids.append(F.cosine_similarity(emb, id_in[sl].repeat_interleave(nv, 0), dim=-1))
            views.append(pose_sq_error(adapters.pose_estimator.estimate_pose(out).double(), poses.double().repeat(g, 1)))
            xv.append(pairwise_cosine(emb.reshape(g, nv, -1)))
        pred = torch.cat(preds).double()
        err = (pred - age).abs()
        idc, vw, x = torch.cat(ids).double(), torch.cat(views), torch.cat(xv).double()
        per_age[str(age)] = {
            "mae": float(err.mean()), "pred_mean": float(pred.mean()), "pred_std": float(pred.std(unbiased=False)),
            "id": float(idc.mean()), "view": float(vw.mean()),
        }
        all_err.append(err)
        all_id.append(idc)
        all_view.append(vw)
        all_xv.append(x)
    return EvalReport(
        age_mae=float(torch.cat(all_err).mean()),
        id_cosine=float(torch.cat(all_id).mean()),
        view_l2=float(torch.cat(all_view).mean()),
        cross_view_id=float(torch.cat(all_xv).mean()),
        per_age=per_age,
        counts=(n, len(protocol.ages), nv),
    )


@torch.no_grad()
def large_gap_protocol(sample_fn, adapters: Adapters, modulator, subjects: EvalSubjects, pairs=LARGE_GAP_PAIRS, seed: int = 0) -> dict:
    """Mean and std of predicted output age for extreme source/target pairs.

    Source-age inputs are made by aging each held-out latent with the
    modulator and rendering at pose (0, 0).
    """
    gen, emb = adapters.generator, adapters.text_embedder
    n = subjects.styles.shape[0]
    zero = torch.zeros(1, 2)
    out = {}
    for src, tgt in pairs:
        e_t = emb.embed_text(age_prompt(src)).values.expand(n, -1)
        x_src = gen.render(modulator(subjects.styles, e_t).aged, torch.zeros(n, 2))
        y = sample_fn(x_src, torch.full((n,), float(tgt)), zero, derive_seed(seed, "gap", src, tgt))
        pred = adapters.age_predictor.predict_age(y).double()
        out[f"{src}->{tgt}"] = (float(pred.mean()), float(pred.std(unbiased=False)))
    return out
