"""Desk-scale calibration run: trains the five configurations and prints the
directional metrics the acceptance suite will assert. Not part of the package."""

import json
import sys
import time
from pathlib import Path

import numpy as np

from srdistill.toy import write_toy_corpus
from srdistill import degradation as dg
from srdistill.trainer import TrainConfig, fit
from srdistill.models import GeneratorConfig, DiscriminatorConfig, load_checkpoint
from srdistill.losses import LossWeights
from srdistill.evalkit import evaluate, domain_gap_analysis, upscale_image
from srdistill.features import FeatureExtractor
from srdistill.imaging import read_png

ROOT = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/root/cal1")
STEPS_SUP = int(sys.argv[2]) if len(sys.argv) > 2 else 3000
STEPS_PDD = int(sys.argv[3]) if len(sys.argv) > 3 else 2500

GEN = GeneratorConfig(channels=16, growth=8, blocks=2, scale=4)
DISC = DiscriminatorConfig(base=16)

SUP_WEIGHTS = LossWeights(alpha_wavelet=1.0, alpha_feat=0.05, alpha_gan=0.1)
ADAPT_WEIGHTS = LossWeights(alpha_wavelet=1.0, alpha_feat=0.05, alpha_gan=0.005,
                            lambda_intra=0.5, lambda_inter=1.5, lambda_gan=0.002)


def stage(name):
    print(f"\n=== {name} [{time.strftime('%H:%M:%S')}] ===", flush=True)


def synth_all():
    stage("corpus + datasets")
    write_toy_corpus(ROOT / "hr_train", 200, size=128, seed=11)
    write_toy_corpus(ROOT / "hr_test", 24, size=128, seed=12)
    pairs = [
        ("bicubic_train", "hr_train", dg.simple_config(4), 21),
        ("broad_train", "hr_train", dg.broad_config(4), 22),
        ("pseudo_train", "hr_train", dg.pseudo_real_config(4), 23),
        ("bicubic_test", "hr_test", dg.simple_config(4), 24),
        ("pseudo_test", "hr_test", dg.pseudo_real_config(4), 25),
    ]
    for out, src, cfg, seed in pairs:
        if not (ROOT / out / "manifest.json").exists():
            dg.synthesize_dataset(ROOT / src, cfg, ROOT / out, seed=seed)
            print("synthesized", out, flush=True)


def run(name, **kw):
    out = ROOT / name
    if (out / "ckpt_final.bin").exists():
        print(f"{name}: cached")
        return out / "ckpt_final.bin"
    stage(name)
    base = dict(
        labeled_manifest=str(ROOT / "bicubic_train/manifest.json"),
        unlabeled_lr_dir=str(ROOT / "pseudo_train/lr"),
        batch_size=8, lr_size=24, scale=4, lr0=1e-3,
        weights=SUP_WEIGHTS,
        generator=GEN, discriminator=DISC,
        checkpoint_every=100000,
    )
    base.update(kw)
    cfg = TrainConfig(**base)
    t0 = time.time()
    art = fit(cfg, out, progress=True)
    print(f"{name} done in {(time.time()-t0)/60:.1f} min")
    return art.final_checkpoint


def main():
    synth_all()
    spec = run("spec_sup", mode="supervised_only", seed=31,
               total_iters=STEPS_SUP, halve_at=STEPS_SUP // 2)
    gene = run("gene_sup", mode="supervised_only", seed=32,
               labeled_manifest=str(ROOT / "broad_train/manifest.json"),
               total_iters=STEPS_SUP, halve_at=STEPS_SUP // 2)
    ema = run("adapt_ema", mode="pdd_ema", seed=33, init_generalist=str(gene),
              weights=ADAPT_WEIGHTS, lr0=3e-4,
              total_iters=STEPS_PDD, halve_at=STEPS_PDD // 2)
    static = run("adapt_static", mode="pdd_static", seed=34,
                 init_specialist=str(spec), init_generalist=str(gene),
                 weights=ADAPT_WEIGHTS, lr0=3e-4,
                 total_iters=1200, halve_at=600)
    naive = run("naive", mode="naive_distill", seed=35,
                init_specialist=str(gene), init_generalist=str(gene),
                weights=ADAPT_WEIGHTS, lr0=3e-4,
                total_iters=STEPS_PDD, halve_at=STEPS_PDD // 2)

    stage("metrics")
    bt, pt = ROOT / "bicubic_test/manifest.json", ROOT / "pseudo_test/manifest.json"
    rows = {}
    for name, ck in (("spec", spec), ("gene", gene), ("ema", ema), ("static", static), ("naive", naive)):
        rb = evaluate(ck, bt, color_correction=True)
        rp = evaluate(ck, pt, color_correction=True)
        sharp = float(np.mean([r["sharpness"] for r in rp.per_image]))
        rows[name] = dict(psnr_bicubic=rb.psnr_y, psnr_pseudo=rp.psnr_y, sharp_pseudo=sharp)
        print(f"{name:8s} psnr_bicubic={rb.psnr_y:7.3f} psnr_pseudo={rp.psnr_y:7.3f} sharp={sharp:.5f}", flush=True)

    lab = [read_png(e["lr_path"]) for e in dg.Manifest.load(bt).entries]
    unl = [read_png(e["lr_path"]) for e in dg.Manifest.load(pt).entries]
    ex = FeatureExtractor.toy(seed=0)

    def gap(ck):
        model = load_checkpoint(ck).pair.specialist
        model.eval()
        pl = [upscale_image(model, im) for im in lab]
        pu = [upscale_image(model, im) for im in unl]
        return domain_gap_analysis(pl, pu, ex)["kl"]

    kl_before, kl_after = gap(spec), gap(static)

    print("\n=== criteria ===")
    print("C4a spec>gene on bicubic:", rows["spec"]["psnr_bicubic"] > rows["gene"]["psnr_bicubic"],
          f"({rows['spec']['psnr_bicubic']:.3f} vs {rows['gene']['psnr_bicubic']:.3f})")
    print("C4b gene>spec on pseudo :", rows["gene"]["psnr_pseudo"] > rows["spec"]["psnr_pseudo"],
          f"({rows['gene']['psnr_pseudo']:.3f} vs {rows['spec']['psnr_pseudo']:.3f})")
    print(f"C5  ema - gene on pseudo: {rows['ema']['psnr_pseudo'] - rows['gene']['psnr_pseudo']:+.3f} dB (need >= +0.3)")
    print(f"C5b sharp ratio ema/gene: {rows['ema']['sharp_pseudo']/rows['gene']['sharp_pseudo']:.3f} (need >= 0.9)")
    print(f"C6  KL: {kl_before:.3f} -> {kl_after:.3f} (decrease: {kl_after < kl_before})")
    print(f"C9  naive sharp {rows['naive']['sharp_pseudo']:.5f} vs ema {rows['ema']['sharp_pseudo']:.5f} "
          f"(naive lower: {rows['naive']['sharp_pseudo'] < rows['ema']['sharp_pseudo']})")
    (ROOT / "summary.json").write_text(json.dumps(
        {"rows": rows, "kl_before": kl_before, "kl_after": kl_after}, indent=2))


if __name__ == "__main__":
    main()
