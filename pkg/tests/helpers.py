"""Brute-force oracles shared by the unit and acceptance tests."""

import math

import torch

from viewage.dataset import Stage1Config, stage1_report
from viewage.modulation import AgeModulator
from viewage.world import ToyWorld, build_adapters


def attention_loops(q, k, v):
    """Scaled dot-product attention with explicit Python loops, in float64."""
    b, n, d = q.shape
    m = k.shape[1]
    out = torch.zeros(b, n, v.shape[-1], dtype=torch.float64)
    for bi in range(b):
        for i in range(n):
            scores = [sum(float(q[bi, i, c]) * float(k[bi, j, c]) for c in range(d)) / math.sqrt(d) for j in range(m)]
            top = max(scores)
            weights = [math.exp(s - top) for s in scores]
            total = sum(weights)
            for j in range(m):
                out[bi, i] += weights[j] / total * v[bi, j].double()
    return out


def stage1_gradient_errors(seed: int = 0, hidden_dim: int = 6, batch: int = 2, h: float = 1e-6):
    """Relative error of the total Stage-1 loss gradient against central differences.

    Runs at toy dims (4 style rows of 8 channels) in float64 and perturbs every
    modulator parameter entry.  Returns ``{param_name: rel_err}`` where
    ``rel_err = |g - g_fd| / max(|g_fd|, tiny)`` over the flattened tensor.
    """
    world = ToyWorld(num_layers=4, style_dim=8)
    adapters = build_adapters(None, world)
    torch.manual_seed(seed)
    mod = AgeModulator(num_layers=4, style_dim=8, embed_dim=world.embed_dim, hidden_dim=hidden_dim).double()
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in mod.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.1)
    w = torch.randn(batch, 4, 8, generator=g, dtype=torch.float64)
    poses = (torch.rand(batch, 2, generator=g, dtype=torch.float64) - 0.5) * 0.4
    target = torch.tensor([20.0, 65.0][:batch], dtype=torch.float64)
    source = world.age_of(w).double()
    cfg = Stage1Config()

    def loss():
        return stage1_report(mod, adapters, cfg, w, poses, target, source).total

    mod.zero_grad()
    loss().backward()
    errors = {}
    with torch.no_grad():
        for name, p in mod.named_parameters():
            flat = p.view(-1)
            fd = torch.zeros_like(flat)
            for i in range(flat.numel()):
                keep = float(flat[i])
                flat[i] = keep + h
                up = float(loss())
                flat[i] = keep - h
                down = float(loss())
                flat[i] = keep
                fd[i] = (up - down) / (2 * h)
            num = float((p.grad.view(-1) - fd).norm())
            errors[name] = num / max(float(fd.norm()), 1e-12) if float(fd.norm()) > 1e-9 else num
    return errors


def reference_attention_loops(x, ref, w_q, w_k, w_v):
    """Queries from ``x``, keys/values from the token-wise concatenation ``[x ; ref]``."""
    x, ref, w_q, w_k, w_v = (a.detach() for a in (x, ref, w_q, w_k, w_v))
    b, n, c = x.shape
    both = [[x[bi, i] for i in range(n)] + [ref[bi, j] for j in range(ref.shape[1])] for bi in range(b)]

    def proj(w, vec):
        return w.double() @ vec.double()

    q = torch.stack([torch.stack([proj(w_q, x[bi, i]) for i in range(n)]) for bi in range(b)])
    k = torch.stack([torch.stack([proj(w_k, t) for t in both[bi]]) for bi in range(b)])
    v = torch.stack([torch.stack([proj(w_v, t) for t in both[bi]]) for bi in range(b)])
    return attention_loops(q, k, v)


def attention_oracle_errors(cases: int = 120, seed: int = 0):
    """Max abs error of ``attention`` and reference attention vs the loop oracles."""
    from viewage.diffusion import SelfAttention, attention, reference_attention_tokens

    g = torch.Generator().manual_seed(seed)
    worst_plain = worst_ref = 0.0
    for _ in range(cases):
        b = int(torch.randint(1, 3, (1,), generator=g))
        n = int(torch.randint(1, 9, (1,), generator=g))
        m = int(torch.randint(1, 9, (1,), generator=g))
        d = int(torch.randint(1, 17, (1,), generator=g))
        q, k, v = (torch.randn(b, s, d, generator=g) for s in (n, m, m))
        worst_plain = max(worst_plain, float((attention(q, k, v).double() - attention_loops(q, k, v)).abs().max()))

        c = 8 * int(torch.randint(1, 3, (1,), generator=g))
        layer = SelfAttention(c, positional=False)
        with torch.no_grad():
            for lin in (layer.to_q, layer.to_k, layer.to_v):
                lin.weight.copy_(torch.randn(c, c, generator=g) * c**-0.5)
        n_ref = int(torch.randint(1, 9, (1,), generator=g))
        x = torch.randn(b, n, c, generator=g)
        ref = torch.randn(b, n_ref, c, generator=g)
        with torch.no_grad():
            got = reference_attention_tokens(layer, x, ref).double()
        want = reference_attention_loops(x, ref, layer.to_q.weight, layer.to_k.weight, layer.to_v.weight)
        worst_ref = max(worst_ref, float((got - want).abs().max()))
    return worst_plain, worst_ref


def cfg_identity_checks(seed: int = 0):
    """Return (s0_bitwise, s1_bitwise, ddim_zero_eps_err) for a toy two-branch predictor."""
    from viewage.diffusion import NoiseSchedule, ddim_sample

    sched = NoiseSchedule()
    g = torch.Generator().manual_seed(seed)
    z_T = torch.randn(2, 4, 16, 16, generator=g)
    a = torch.randn(4, 16, 16, generator=g)

    def eps_fn(z, t, cond):
        scale = 0.3 if cond is None else 0.7
        return torch.tanh(z * scale + a * (t / 1000.0))

    def manual(branch, steps=10):
        # Plain single-branch DDIM loop, written out independently of the sampler.
        z = z_T
        ts = [int(round(sched.T - i * sched.T / steps)) for i in range(steps + 1)]
        for t, t_prev in zip(ts[:-1], ts[1:]):
            eps = eps_fn(z, t, branch)
            ab, ab_prev = sched.alpha_bar[t].float(), sched.alpha_bar[t_prev].float()
            x0 = (z - (1 - ab).sqrt() * eps) / ab.sqrt()
            z = ab_prev.sqrt() * x0 + (1 - ab_prev).sqrt() * eps
        return z

    s0 = torch.equal(ddim_sample(eps_fn, z_T, sched, 10, 0.0, cond="c", uncond=None), manual(None))
    s1 = torch.equal(ddim_sample(eps_fn, z_T, sched, 10, 1.0, cond="c", uncond=None), manual("c"))
    z = z_T.double()
    one = ddim_sample(lambda z, t, c: torch.zeros_like(z), z, sched, 1, 3.0, cond="c")
    closed = z / sched.alpha_bar[sched.T].sqrt()
    return s0, s1, float((one - closed).abs().max())


def perturbed_modulator(adapters, seed: int = 0, scale: float = 0.02):
    """An untrained modulator with small random affine maps, so aging is non-trivial."""
    from viewage.dataset import Stage1Config, new_modulator

    mod = new_modulator(adapters, Stage1Config(seed=seed))
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for lin in (mod.f_gamma, mod.f_beta):
            lin.weight.copy_(torch.randn(lin.weight.shape, generator=g) * scale)
    return mod


def dataset_contract(modulator, adapters, root, identities=16, views=8, ages=3, seed=0):
    """Generate twice and re-render every record; returns a dict of observations."""
    from pathlib import Path

    from viewage.dataset import DatasetConfig, generate_dataset, read_png, rerender_record, quantize

    cfg = DatasetConfig(identities=identities, views=views, ages=ages, seed=seed)
    root = Path(root)
    m1 = generate_dataset(modulator, adapters, cfg, root / "a")
    m2 = generate_dataset(modulator, adapters, cfg, root / "b")
    files_a = sorted(p.relative_to(root / "a") for p in (root / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(root / "b") for p in (root / "b").rglob("*") if p.is_file())
    same_bytes = files_a == files_b and all((root / "a" / f).read_bytes() == (root / "b" / f).read_bytes() for f in files_a)
    per_identity = {}
    for r in m1.records:
        per_identity[r.identity_id] = per_identity.get(r.identity_id, 0) + 1
    rerender_ok = all(
        torch.equal(quantize(rerender_record(r, modulator, adapters, cfg)), read_png(root / "a" / r.image_path)) for r in m1.records
    )
    return {
        "records": len(m1.records),
        "per_identity": per_identity,
        "same_manifest": m1.config_hash == m2.config_hash and [r.to_json() for r in m1.records] == [r.to_json() for r in m2.records],
        "same_bytes": same_bytes,
        "rerender_ok": rerender_ok,
        "manifest": m1,
    }


# One "criterion N: PASS|FAIL ..." line per acceptance check, echoed in the
# terminal summary.
VERDICTS: list[str] = []
