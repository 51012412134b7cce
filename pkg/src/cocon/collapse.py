"""Free-embedding witness for the collapse of the synchronization loss.

Each view owns a free parameter matrix ``e``. Embeddings are
``normalize(softplus(e + sigma * xi))`` with fresh noise ``xi`` every step,
a stand-in for the non-negative, noisy pooled features an encoder produces.
Matching only the views' similarity matrices is solved by pushing all
instances onto one point, so pairwise distances stop varying. The hinge
similarity term keeps different instances apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from cocon.losses import LossWeights, ViewEmbeddingBatch, cosine_distance, sim_loss, sync_loss


@dataclass
class WitnessResult:
    objective: str
    variance: float  # variance of all pairwise distances after training
    initial_variance: float
    history: list = field(default_factory=list)


def _embed(params: list[torch.Tensor], noise: float) -> list[torch.Tensor]:
    out = []
    for e in params:
        x = e + noise * torch.randn_like(e) if noise > 0 else e
        out.append(F.normalize(F.softplus(x), dim=-1))
    return out


def pairwise_distance_variance(hs: list[torch.Tensor]) -> float:
    """Variance of D over every unordered pair of the pooled (view, instance) set."""
    x = torch.cat(hs)
    d = cosine_distance(x[:, None, :], x[None, :, :])
    iu = torch.triu_indices(len(x), len(x), offset=1)
    return float(d[iu[0], iu[1]].var(unbiased=False))


def run_witness(
    with_sim: bool,
    steps: int = 500,
    num_instances: int = 16,
    dim: int = 8,
    num_views: int = 2,
    noise: float = 0.3,
    lr: float = 0.05,
    seed: int = 0,
    log_every: int = 50,
) -> WitnessResult:
    """Optimize free embeddings under sync alone or sync plus auto-balanced sim."""
    gen = torch.Generator().manual_seed(seed)
    params = [torch.randn(num_instances, dim, generator=gen).requires_grad_() for _ in range(num_views)]
    opt = torch.optim.Adam(params, lr=lr)
    weights = LossWeights(mu_mode="auto_balance")
    ids = list(range(num_instances))
    torch.manual_seed(seed)

    def variance() -> float:
        with torch.no_grad():
            return pairwise_distance_variance(_embed(params, 0.0))

    start = variance()
    history = []
    for step in range(steps):
        hs = _embed(params, noise)
        views = [ViewEmbeddingBatch(f"v{i}", h, ids) for i, h in enumerate(hs)]
        loss = sync_loss(views)
        if with_sim:
            loss = loss + sim_loss(views, weights)[0]
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and (step + 1) % log_every == 0:
            history.append({"step": step + 1, "loss": loss.item(), "variance": variance()})
    return WitnessResult("sync+sim" if with_sim else "sync", variance(), start, history)
