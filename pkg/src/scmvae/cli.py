"""Command-line interface: data generation, training, evaluation, traversal,
volume reporting and gradient checking.

Exit codes: 0 success, 1 usage error, 2 runtime failure. The output
directory of any subcommand can be overridden with SCMVAE_OUT_DIR.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _out_dir(args):
    return os.environ.get("SCMVAE_OUT_DIR", args.out_dir)


def _load_setup(checkpoint_path, hierarchy_path):
    from .hierarchy import SamplingHierarchy
    from .model import load_checkpoint

    with open(hierarchy_path) as fh:
        hierarchy = SamplingHierarchy.from_json(fh.read())
    model = load_checkpoint(checkpoint_path, hierarchy)
    with open(checkpoint_path) as fh:
        extra = json.load(fh).get("extra", {})
    return model, hierarchy, extra


def cmd_gen_data(args):
    from .torusgen import FactorRanges, generate_dataset

    out = _out_dir(args)
    generate_dataset(args.count, out, resolution=(args.resolution, args.resolution),
                     seed=args.seed, ranges=FactorRanges())
    print(f"wrote {args.count} meshes and manifest.csv to {out}")
    return 0


def cmd_train(args):
    from .losses import LossConfig
    from .model import ModelConfig
    from .torusgen import read_manifest
    from .trainer import TrainConfig, train

    if args.config:
        with open(args.config) as fh:
            config = TrainConfig.from_dict(json.load(fh))
    else:
        config = TrainConfig(
            learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
            lr_decay_per_epoch=args.lr_decay, seed=args.seed,
            loss=LossConfig(beta=args.beta, temperature=args.temperature,
                            threshold=args.threshold, lambda1=args.lambda1,
                            lambda2=args.lambda2,
                            enable_cls=not args.disable_cls,
                            enable_reg=not args.disable_reg),
            model=ModelConfig(latent_dim=args.latent_dim,
                              spiral_length=args.spiral_length,
                              dilation=args.dilation))
    manifest = read_manifest(args.manifest)
    out = _out_dir(args)
    _, log = train(manifest, config, out)
    last = log.epochs[-1]
    print(f"trained {config.epochs} epochs; final val total "
          f"{last['val_total']:.6f}; checkpoints in {out}")
    return 0


def cmd_eval(args):
    from .torusgen import read_manifest
    from .trainer import evaluate

    model, _, _ = _load_setup(args.checkpoint, args.hierarchy)
    manifest = read_manifest(args.manifest)
    report = evaluate(model, manifest, split=args.split, nna_cap=args.nna_cap,
                      seed=args.seed)
    doc = report.as_dict()
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
    width = max(len(k) for k in doc)
    for k, v in doc.items():
        print(f"{k:<{width}}  {v:.6g}")
    return 0


def cmd_traverse(args):
    from .mesh import TriMesh, save_mesh

    model, _, _ = _load_setup(args.checkpoint, args.hierarchy)
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    for slot in ([args.slot] if args.slot else [1, 2]):
        values, verts = model.traverse(slot, steps=args.steps)
        for i, v in enumerate(verts):
            save_mesh(TriMesh(v, model.template.faces),
                      os.path.join(out, f"traverse_z{slot}_{i:03d}.obj"))
    print(f"wrote traversal meshes to {out}")
    return 0


def cmd_volume_report(args):
    from .mesh import TriMesh, mesh_volume
    from .model import CLS_SLOT, REG_SLOT

    model, _, extra = _load_setup(args.checkpoint, args.hierarchy)
    if model.latent_stats is None:
        raise ValueError("checkpoint has no latent statistics (untrained model)")
    mean, std = model.latent_stats
    lo = extra.get("label_min", -3.0)
    hi = extra.get("label_max", 3.0)
    dz = model.config.latent_dim
    edges = np.linspace(-3 * std[REG_SLOT], 3 * std[REG_SLOT], args.bins + 1)
    label_edges = np.linspace(lo, hi, args.bins + 1)
    out = _out_dir(args)
    rows = []
    for b in range(args.bins):
        z2_vals = np.linspace(edges[b], edges[b + 1], args.shapes_per_bin)
        vols = {"-": [], "+": []}
        for sign, z1 in (("-", -3 * std[CLS_SLOT]), ("+", 3 * std[CLS_SLOT])):
            z = np.zeros((len(z2_vals), dz))
            z[:, REG_SLOT] = z2_vals
            z[:, CLS_SLOT] = z1
            dec = model.decode(z)
            verts = dec.data
            dec.release_graph()
            vols[sign] = [mesh_volume(TriMesh(v, model.template.faces)) for v in verts]
        lo_v, hi_v = float(np.mean(vols["-"])), float(np.mean(vols["+"]))
        rows.append((b, float(label_edges[b]), float(label_edges[b + 1]),
                     lo_v, hi_v, hi_v - lo_v))
    with open(out, "w") as fh:
        fh.write("bin,label_lo,label_hi,volume_z1_minus,volume_z1_plus,difference\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]:.17g},{r[2]:.17g},{r[3]:.17g},{r[4]:.17g},{r[5]:.17g}\n")
    print(f"wrote volume report ({args.bins} bins) to {out}")
    return 0


def cmd_gradcheck(args):
    from .diffcore import ParamStore, Tensor, grad_check, linear
    from .hierarchy import build_hierarchy
    from .losses import LossConfig, total_loss
    from .model import MeshVAE, ModelConfig
    from .torusgen import TorusFactors, generate_torus

    # isolated op
    rng = np.random.default_rng(args.seed)
    store = ParamStore()
    w = store.add("W", rng.standard_normal((5, 4)))
    b = store.add("b", rng.standard_normal(4))
    x = rng.standard_normal((3, 5))
    op_report = grad_check(lambda: (linear(Tensor(x), w, b) ** 2).sum(),
                           store, h=1e-5, tol=1e-6)

    # full objective on a micro-batch
    template = generate_torus(TorusFactors(1.0, False, 0.0, 0.0), (8, 8), seed=0)
    config = ModelConfig(channels=(2, 2), latent_dim=4, spiral_length=4, dilation=1,
                         downsample_factors=(4, 4))
    model = MeshVAE(config, build_hierarchy(template, config.downsample_factors),
                    seed=args.seed)
    xb = np.stack([
        generate_torus(TorusFactors(1.0 + 0.05 * i, i % 2 == 1, 0.2, 0.0), (8, 8)).vertices
        for i in range(4)])
    y_cls = np.array([0, 1, 0, 1])
    y_reg = np.array([0.0, 0.25, 0.5, 0.52])
    loss_cfg = LossConfig(beta=0.0015, temperature=5.0, threshold=0.05)

    def closure():
        code = model.encode(xb, noise_seed=args.seed)
        return total_loss(xb, model.decode(code.z), code, y_cls, y_reg, loss_cfg)[0]

    full_report = grad_check(closure, model.params, h=1e-5, tol=1e-4)
    print(f"isolated op max rel error: {op_report['max_rel_error']:.3g} "
          f"({'pass' if op_report['passed'] else 'FAIL'} at tol 1e-6)")
    print(f"full objective max rel error: {full_report['max_rel_error']:.3g} "
          f"({'pass' if full_report['passed'] else 'FAIL'} at tol 1e-4)")
    return 0 if op_report["passed"] and full_report["passed"] else 2


def build_parser():
    p = argparse.ArgumentParser(prog="scmvae",
                                description="Supervised contrastive mesh VAE pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic torus dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--resolution", type=int, default=32,
                   help="major/minor tessellation (NxN)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--config", help="JSON file mirroring TrainConfig")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=3.6e-4)
    t.add_argument("--lr-decay", type=float, default=0.77)
    t.add_argument("--beta", type=float, default=0.0015)
    t.add_argument("--temperature", type=float, default=181.0)
    t.add_argument("--threshold", type=float, default=0.035)
    t.add_argument("--lambda1", type=float, default=1.0)
    t.add_argument("--lambda2", type=float, default=1.0)
    t.add_argument("--latent-dim", type=int, default=12)
    t.add_argument("--spiral-length", type=int, default=45)
    t.add_argument("--dilation", type=int, default=2)
    t.add_argument("--disable-cls", action="store_true",
                   help="drop the classification contrastive term")
    t.add_argument("--disable-reg", action="store_true",
                   help="drop the regression contrastive term")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compute the metric suite for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--hierarchy", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--out", help="write the report as JSON here")
    e.add_argument("--nna-cap", type=int, default=200)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    tr = sub.add_parser("traverse", help="decode latent traversals to OBJ files")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--hierarchy", required=True)
    tr.add_argument("--out-dir", required=True)
    tr.add_argument("--slot", type=int, choices=[1, 2],
                    help="traverse one slot only (default: both)")
    tr.add_argument("--steps", type=int, default=11)
    tr.set_defaults(func=cmd_traverse)

    v = sub.add_parser("volume-report",
                       help="CSV of decoded volumes along z2 for z1 at +-3 sigma")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--hierarchy", required=True)
    v.add_argument("--out-dir", dest="out_dir", required=True,
                   help="output CSV path")
    v.add_argument("--bins", type=int, default=6)
    v.add_argument("--shapes-per-bin", type=int, default=10)
    v.set_defaults(func=cmd_volume_report)

    gc = sub.add_parser("gradcheck", help="verify analytic gradients by finite differences")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError, KeyError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
