"""Pipeline stages: each reads its inputs from the work directory and writes artifacts back."""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import shutil
from pathlib import Path
from typing import Dict, Iterable, Optional

import numpy as np
import scipy
import torch

from . import __version__, demo
from .cloud import FeatureField, load_cloud, read_field, read_ply, save_cloud, voxel_downsample, write_field
from .config import PipelineConfig, dump_config
from .embed import DirectoryProvider, MockProvider, ViewFilter
from .lift import CoverageParams, coverage, coverage_loop, lift_views
from .model import (ConfigError, GraphInputs, MoeSuperpointNet, NumericalError, evaluate_losses,
                    forward, load_checkpoint, save_checkpoint, train_toy)
from .panoptic import (cluster_instances, eval_oracle, eval_panoptic, eval_semantic, predict_points,
                       query, scores_json, superpoint_things, write_query_ply)
from .pseudolabel import PseudoLabelSet, derive_labels
from .render import Intrinsics, grid_rig, load_views, render_views, save_views
from .superpoint import SuperpointHierarchy, build_hierarchy

log = logging.getLogger("ovpano")

STAGES = ("render", "filter", "lift", "label", "partition", "train", "infer", "query", "eval")


class MissingPrerequisite(RuntimeError):
    def __init__(self, what, stage: str, hint: Optional[str] = None):
        super().__init__(f"missing {what}; " + (hint or f"run the '{stage}' stage first"))
        self.stage = stage


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


class Pipeline:
    def __init__(self, cfg: PipelineConfig, threads: int = 1):
        self.cfg = cfg
        self.threads = max(1, int(threads))
        self.workdir = Path(cfg.paths.workdir)
        torch.set_num_threads(self.threads)

    # -------------------------------------------------------------- helpers
    def path(self, name: str) -> Path:
        return self.cfg.paths.resolve(name)

    def need(self, name: str, stage: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingPrerequisite(p, stage)
        return p

    def load_cloud(self, path: Path):
        cloud = load_cloud(path)
        if self.cfg.cloud.voxel > 0:
            cloud = voxel_downsample(cloud, self.cfg.cloud.voxel)
        return cloud

    def provider(self):
        pc = self.cfg.provider
        if pc.kind == "directory":
            return DirectoryProvider(self.need("features", "an external encoder export"))
        return MockProvider(pc.seed, self.cfg.palette(), pc.dim, pc.traits)

    def intrinsics(self) -> Intrinsics:
        r = self.cfg.render
        return Intrinsics(fx=r.fx, fy=r.fy, cx=r.width / 2 if r.cx is None else r.cx,
                          cy=r.height / 2 if r.cy is None else r.cy, width=r.width, height=r.height)

    def view_filter(self, provider) -> ViewFilter:
        f = self.cfg.filter
        return ViewFilter(provider, f.positives, f.negatives, f.threshold, f.logit_scale)

    def manifest(self, stage: str, inputs: Iterable[Path], outputs: Iterable[Path],
                 notes: Optional[dict] = None) -> None:
        """Record hashes, seed, versions and filled defaults for one stage run."""
        out_dir = self.workdir / "manifests"
        out_dir.mkdir(parents=True, exist_ok=True)
        record = {
            "stage": stage, "seed": self.cfg.seed, "threads": self.threads,
            "inputs": {str(p): _digest(p) for p in inputs},
            "outputs": {str(p): _digest(p) for p in outputs},
            "versions": {"ovpano": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "torch": torch.__version__, "python": platform.python_version()},
            "config": self.cfg.to_dict(), "defaults": sorted(self.cfg.defaults),
            "notes": notes or {},
        }
        _json_dump(out_dir / f"{stage}.json", record)

    def _fresh_dir(self, name: str) -> Path:
        p = self.path(name)
        if p.exists():
            shutil.rmtree(p)
        p.mkdir(parents=True)
        return p

    # --------------------------------------------------------------- stages
    def render(self) -> dict:
        cloud_path = self.need("cloud", "demo")
        cloud = self.load_cloud(cloud_path)
        r = self.cfg.render
        poses = grid_rig(cloud, r.spacing, r.margin, self.intrinsics())
        views = render_views(cloud, poses, r.splat_px, threads=self.threads)
        out = self._fresh_dir("views")
        save_views(out, views)
        self.manifest("render", [cloud_path], [out])
        log.info("rendered %d views", len(views))
        return {"views": len(views)}

    def filter(self) -> dict:
        views_dir = self.need("views", "render")
        views = load_views(views_dir)
        vf = self.view_filter(self.provider())
        verdicts = [vf(v) for v in views]
        kept = sum(v.keep for v in verdicts)
        out = self.path("filter")
        _json_dump(out, {"threshold": vf.threshold, "kept": kept, "total": len(views),
                         "views": [{"view_id": v.view_id, "keep": v.keep, "best_label": v.best_label,
                                    "probability": v.probability} for v in verdicts]})
        self.manifest("filter", [views_dir], [out])
        log.info("kept %d of %d views", kept, len(views))
        return {"kept": kept, "total": len(views)}

    def lift(self) -> dict:
        cloud_path = self.need("cloud", "demo")
        views_dir = self.need("views", "render")
        filt_path = self.need("filter", "filter")
        cloud = self.load_cloud(cloud_path)
        keep = [v["view_id"] for v in json.loads(filt_path.read_text())["views"] if v["keep"]]
        provider = self.provider()
        views = load_views(views_dir, keep)
        lc = self.cfg.lift
        dim = getattr(provider, "dim", None)
        if views:
            fld, _ = lift_views(cloud, views, provider, lc.tau_rel, dim)
        else:
            fld = FeatureField.empty(len(cloud), dim or 0)
        first = coverage(fld)
        params = CoverageParams(lc.target_coverage, lc.max_rounds, lc.cube_radius,
                                self.cfg.label.eps_scale, self.cfg.label.base_minpts, lc.tau_rel,
                                self.cfg.render.splat_px, self.cfg.seed, self.intrinsics())
        rounds_log: list = []
        fld, rounds = coverage_loop(cloud, fld, provider, params, self.view_filter(provider),
                                    rounds_log, self.threads)
        out = self.path("field")
        write_field(out, fld)
        stats = {"coverage_initial": first, "coverage": coverage(fld), "rounds": rounds,
                 "log": rounds_log}
        _json_dump(self.workdir / "lift.json", stats)
        self.manifest("lift", [cloud_path, views_dir, filt_path], [out, self.workdir / "lift.json"])
        log.info("coverage %.3f after %d extra rounds", stats["coverage"], rounds)
        return stats

    def label(self) -> dict:
        cloud_path = self.need("cloud", "demo")
        field_path = self.need("field", "lift")
        cloud = self.load_cloud(cloud_path)
        fld = read_field(field_path)
        lc = self.cfg.label
        labels = derive_labels(cloud, fld, lc.k, self.provider(), self.cfg.seed, lc.eps_scale,
                               lc.base_minpts, lc.max_iter, self.cfg.filter.logit_scale)
        out = self.path("labels")
        sidecar = out.with_suffix(".json")
        labels.save(cloud, out, sidecar)
        reprs = sorted(out.parent.glob(f"{sidecar.stem}_class*.hev1"))
        self.manifest("label", [cloud_path, field_path], [out, sidecar, *reprs])
        stats = {"classes": labels.n_classes, "instances": labels.n_instances,
                 "things": [bool(t) for t in labels.is_thing]}
        log.info("pseudo-labels: %s", stats)
        return stats

    def _labels(self, stage: str = "label") -> PseudoLabelSet:
        return PseudoLabelSet.load(self.need("labels", stage))

    def partition(self) -> dict:
        cloud_path = self.need("cloud", "demo")
        labels_path = self.need("labels", "label")
        field_path = self.need("field", "lift")
        cloud = self.load_cloud(cloud_path)
        sc = self.cfg.superpoint
        hier = build_hierarchy(cloud, self._labels(), read_field(field_path), sc.levels,
                               sc.lams, sc.k_nn, sc.color_weight, self.cfg.seed)
        out = self._fresh_dir("hierarchy")
        hier.save(out)
        sizes = [lv.size for lv in hier.levels]
        notes = {} if hier.depth == sc.levels else {
            "depth": f"stopped at {hier.depth} of {sc.levels} levels (no further coarsening)"}
        self.manifest("partition", [cloud_path, labels_path, field_path], [out], notes)
        log.info("superpoints per level: %s", sizes)
        return {"sizes": sizes}

    def _inputs(self):
        hier = SuperpointHierarchy.load(self.need("hierarchy", "partition"))
        return hier, GraphInputs.from_hierarchy(hier)

    def train(self) -> dict:
        hier, inputs = self._inputs()
        if inputs.targets is None:
            raise MissingPrerequisite(f"targets in {self.path('hierarchy')}", "partition",
                                      "re-run 'partition' after 'label'")
        moe = self.cfg.moe(hier.depth, inputs.targets.shape[2])
        model = MoeSuperpointNet(moe)
        steps = self.cfg.model.steps
        trace = train_toy(model, inputs, steps)
        final = evaluate_losses(model, inputs, seed=moe.seed * 1_000_003 + steps)
        if not all(np.isfinite(list(final.values()))):
            raise NumericalError(steps)
        final["step"] = steps
        ckpt = self.path("checkpoint")
        save_checkpoint(ckpt, model, {"steps": steps})
        log_path = self.path("train_log")
        with open(log_path, "w") as fh:
            for row in trace.steps + [final]:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        self.manifest("train", [self.path("hierarchy")], [ckpt, log_path])
        first = trace.steps[0]["total"] if trace.steps else final["total"]
        log.info("total loss %.4f -> %.4f over %d steps", first, final["total"], steps)
        return {"loss_first": first, "loss_final": final["total"], "steps": steps}

    def infer(self) -> dict:
        cloud_path = self.need("cloud", "demo")
        ckpt = self.need("checkpoint", "train")
        hier, inputs = self._inputs()
        model, _ = load_checkpoint(ckpt)
        provider = self.provider()
        with torch.no_grad():
            out = forward(model, inputs)
        pred_vec = out.pred_vec.numpy()
        affinity = out.pred_affinity.numpy()
        lv = hier.levels[0]
        things = superpoint_things(pred_vec, provider, self.cfg.filter.logit_scale)
        sp_inst = cluster_instances(lv.size, lv.edges, affinity, self.cfg.infer.affinity_threshold, things)
        label_set = self.cfg.eval.label_set or None
        pred = predict_points(lv.parent_of, pred_vec, sp_inst, label_set, provider)
        cloud = self.load_cloud(cloud_path)
        field_out = self.path("pred_field")
        write_field(field_out, FeatureField(pred.vectors, np.ones(len(cloud), dtype=np.int64)))
        extra = {"inst": pred.instance.astype(np.int32)}
        if pred.classes is not None:
            extra["sem"] = pred.classes.astype(np.int32)
        ply_out = self.path("prediction")
        save_cloud(cloud, ply_out, extra=extra)
        n_inst = int(sp_inst.max()) + 1 if (sp_inst >= 0).any() else 0
        self.manifest("infer", [cloud_path, ckpt, self.path("hierarchy")], [field_out, ply_out])
        log.info("%d instances from %d thing superpoints", n_inst, int(things.sum()))
        return {"instances": n_inst, "thing_superpoints": int(things.sum())}

    def query(self, text: Optional[str] = None, threshold: Optional[float] = None) -> dict:
        text = text if text is not None else self.cfg.query.text
        threshold = self.cfg.query.threshold if threshold is None else threshold
        if not text:
            raise ConfigError("query needs a text (--text or query.text)")
        cloud_path = self.need("cloud", "demo")
        field_path = self.need("pred_field", "infer")
        cloud = self.load_cloud(cloud_path)
        fld = read_field(field_path)
        sim, mask = query(fld.features, text, self.provider(), threshold, fld.hit_count)
        out = self.path("query")
        write_query_ply(out, cloud, sim, mask)
        self.manifest("query", [cloud_path, field_path], [out], {"text": text, "threshold": threshold})
        log.info("%d of %d points match %r above %.2f", int(mask.sum()), len(mask), text, threshold)
        return {"text": text, "threshold": threshold, "matches": int(mask.sum())}

    def eval(self) -> dict:
        cloud_path = self.need("cloud", "demo")
        cloud = self.load_cloud(cloud_path)
        if cloud.gt_semantic is None:
            raise MissingPrerequisite(f"ground truth labels (gt_sem) in {cloud_path}", "eval",
                                      "eval needs a cloud with ground truth labels")
        label_set = self.cfg.eval.label_set
        if not label_set:
            raise ConfigError("eval.label_set is empty")
        pred_path = self.need("prediction", "infer")
        props, _ = read_ply(pred_path)
        if "sem" not in props:
            raise MissingPrerequisite(f"class ids in {pred_path}", "infer",
                                      "re-run 'infer' with eval.label_set set")
        n = len(label_set)
        scores: Dict[str, object] = {}
        sem = props["sem"].astype(np.int64)
        if cloud.gt_instance is not None:
            scores["panoptic"] = eval_panoptic(sem, props["inst"].astype(np.int64), cloud.gt_semantic,
                                               cloud.gt_instance, n).to_dict()
        else:
            s = eval_semantic(sem, cloud.gt_semantic, n)
            scores["semantic"] = {"miou": s.miou, "macc": s.macc, "iou": s.iou, "acc": s.acc}
        inputs = [cloud_path, pred_path]
        if self.path("labels").exists():
            labels = self._labels()
            o = eval_oracle(labels.z_pc, labels.class_repr, cloud.gt_semantic, label_set, self.provider())
            scores["oracle"] = {"miou": o.miou, "macc": o.macc, "labeled_fraction": o.labeled_fraction}
            inputs.append(self.path("labels"))
        inst = props["inst"]
        scores["instances"] = int(inst.max()) + 1 if (inst >= 0).any() else 0
        lift_stats = self.workdir / "lift.json"
        if lift_stats.exists():
            scores["coverage"] = json.loads(lift_stats.read_text())["coverage"]
            inputs.append(lift_stats)
        if self.path("train_log").exists():
            rows = [json.loads(line) for line in self.path("train_log").read_text().splitlines()]
            scores["train"] = {"loss_first": rows[0]["total"], "loss_final": rows[-1]["total"],
                               "steps": rows[-1]["step"]}
            inputs.append(self.path("train_log"))
        out = self.path("scores")
        out.write_text(scores_json(scores))
        self.manifest("eval", inputs, [out])
        return scores

    def run(self, stage: str, **kwargs) -> dict:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        self.workdir.mkdir(parents=True, exist_ok=True)
        return getattr(self, stage)(**kwargs)


def demo_config(cfg: PipelineConfig) -> PipelineConfig:
    """Point the provider and label set at the built-in scene's concepts."""
    cfg.provider.kind = "mock"
    cfg.provider.palette = {",".join(map(str, rgb)): tok for rgb, tok in demo.demo_palette().items()}
    cfg.provider.traits = demo.demo_traits()
    cfg.eval.label_set = list(demo.LABEL_SET)
    if not cfg.query.text:
        cfg.query.text = demo.THING_CONCEPT
    if "query.threshold" in cfg.defaults:
        cfg.query.threshold = demo.QUERY_THRESHOLD
    return cfg


def run_demo(cfg: PipelineConfig, threads: int = 1) -> dict:
    """Write the synthetic scene and its config, then run every stage."""
    cfg = demo_config(cfg)
    pipe = Pipeline(cfg, threads)
    pipe.workdir.mkdir(parents=True, exist_ok=True)
    (pipe.workdir / "config.toml").write_text(dump_config(cfg))
    save_cloud(demo.make_scene(cfg.seed), pipe.path("cloud"))
    for stage in STAGES:
        pipe.run(stage)
    return json.loads(pipe.path("scores").read_text())
