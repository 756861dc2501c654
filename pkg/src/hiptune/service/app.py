"""HTTP front end over the core package."""

from __future__ import annotations

import numpy as np
import torch
from fastapi import FastAPI, HTTPException

from ..checkpoint import load_checkpoint
from ..errors import HiPTuneError
from ..evaluation import compute_metrics
from ..model import hiptune_score
from ..taxonomy import AttackTaxonomy, build_taxonomy
from .schemas import Health, MetricsOut, MetricsRequest, NodeOut, RouteLevel, ScoreOut, ScoreRequest, TaxonomyOut


def create_app(checkpoint: str | None = None) -> FastAPI:
    """Build the app; scoring endpoints need a checkpoint holding a HiPTune model."""
    ckpt = load_checkpoint(checkpoint) if checkpoint else None
    taxonomy: AttackTaxonomy = ckpt.taxonomy if ckpt else build_taxonomy()
    app = FastAPI(title="hiptune", version="0.1.0")

    @app.get("/health", response_model=Health)
    def health():
        return Health(
            model_loaded=bool(ckpt and ckpt.hiptune is not None),
            taxonomy_digest=taxonomy.digest(),
            stage=ckpt.stage if ckpt else None,
        )

    @app.get("/taxonomy", response_model=TaxonomyOut)
    def get_taxonomy():
        nodes = [NodeOut(id=n.id, name=n.name, level=n.level, parent=n.parent, methods=list(n.method_ids)) for n in taxonomy.nodes]
        return TaxonomyOut(digest=taxonomy.digest(), nodes=nodes)

    @app.post("/metrics", response_model=MetricsOut)
    def metrics(req: MetricsRequest):
        try:
            r = compute_metrics(req.scores, req.labels, req.threshold)
        except HiPTuneError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return MetricsOut(**r.summary(), percent=r.as_percentages())

    @app.post("/score", response_model=ScoreOut)
    def score(req: ScoreRequest):
        if ckpt is None or ckpt.hiptune is None:
            raise HTTPException(status_code=503, detail="no HiPTune checkpoint loaded")
        cfg = ckpt.encoder.cfg
        img = np.asarray(req.image, dtype=np.float32)
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if img.shape != expected:
            raise HTTPException(status_code=422, detail=f"image must have shape {list(expected)}, got {list(img.shape)}")
        try:
            p_live, p_fake, decision = hiptune_score(torch.from_numpy(img), ckpt.hiptune)
        except HiPTuneError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        path = [
            RouteLevel(level=i + 1, node_id=nid, node=taxonomy[nid].name, distribution=[float(v) for v in dist])
            for i, (nid, dist) in enumerate(zip(decision.node_ids, decision.distributions))
        ]
        return ScoreOut(p_live=p_live, p_fake=p_fake, stopped_at_live=decision.stopped_at_live, path=path)

    return app
