"""Command-line pipeline: data generation, training stages, and reports.

Each subcommand checks its upstream artifacts, writes its own outputs plus a
provenance record (config hash, seeds, input hashes, wall time), and exits
nonzero with an actionable message when something is missing.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import evaluation, inverse as inv_mod, nn, report, simulator, surrogate as sur_mod, wae as wae_mod
from .config import ConfigError, config_hash, parse_config, stage_seed

TRAIN_DS = "train.ds"
VAL_DS = "val.ds"
AE_ENC = "ae_encoder.ckpt"
AE_DEC = "ae_decoder.ckpt"
AE_DISC = "ae_discriminator.ckpt"
WAE_LOG = "wae_log.csv"
INV_CKPT = "inverse.ckpt"
INV_LOG = "inverse_log.csv"
ENSEMBLE_DIR = "ensemble"
SUR_CKPT = "surrogate.ckpt"
SUR_INV = "inverse_cotrained.ckpt"
SUR_LOG = "surrogate_log.csv"
BASE_SUR = "baseline_surrogate.ckpt"
BASE_HEAD = "baseline_head.ckpt"
BASE_LOG = "baseline_log.csv"


class MissingArtifactError(RuntimeError):
    pass


def _require(out, name, producer):
    path = os.path.join(out, name)
    if not os.path.exists(path):
        raise MissingArtifactError(
            f"missing artifact {path}; run `macc {producer}` first")
    return path


def _file_hash(path):
    from .config import fnv1a_64
    with open(path, "rb") as fh:
        return f"{fnv1a_64(fh.read()):016x}"


def _write_provenance(out, stage, cfg, seed, inputs, outputs, wall):
    rec = {
        "stage": stage,
        "config_hash": config_hash(cfg),
        "global_seed": seed,
        "stage_seed": stage_seed(seed, stage) if stage in
        ("dataset", "wae", "inverse", "ensemble", "surrogate", "baseline", "eval", "sweep") else seed,
        "inputs": {p: _file_hash(p) for p in inputs},
        "outputs": {p: _file_hash(p) for p in outputs},
        "wall_time_s": round(wall, 3),
    }
    path = os.path.join(out, f"{stage}.prov.json")
    with open(path, "w") as fh:
        json.dump(rec, fh, indent=2)
    return path


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _opt_kwargs(cfg):
    return dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                batch_size=cfg.batch_size)


def _load_datasets(out):
    train = simulator.load_dataset(_require(out, TRAIN_DS, "generate-data"), split="train")
    val = simulator.load_dataset(_require(out, VAL_DS, "generate-data"), split="val")
    return train, val


def _load_wae(out, cfg):
    enc = wae_mod.Encoder(cfg.latent_dim, cfg.image_size, cfg.n_band, cfg.n_sca)
    dec = wae_mod.Decoder(cfg.latent_dim, cfg.image_size, cfg.n_band, cfg.n_sca)
    nn.load_checkpoint(_require(out, AE_ENC, "train-ae"), enc.layers())
    nn.load_checkpoint(_require(out, AE_DEC, "train-ae"), dec.layers())
    return enc, dec


def _load_surrogate(out, cfg):
    sur = sur_mod.Surrogate(cfg.d_in, cfg.latent_dim)
    nn.load_checkpoint(_require(out, SUR_CKPT, "train-surrogate"), sur.layers())
    return sur


def _load_inverse(out, cfg, name=INV_CKPT, producer="train-inverse"):
    inv = inv_mod.Inverse(cfg.image_size, cfg.n_band, cfg.n_sca)
    nn.load_checkpoint(_require(out, name, producer), inv.layers())
    return inv


# ------------------------------------------------------------------- stages

def cmd_generate_data(cfg, seed, out, args):
    t0 = time.perf_counter()
    ds_seed = stage_seed(seed, "dataset") + cfg.dataset_seed
    train, val = simulator.generate_dataset(cfg.n_train, cfg.n_val, ds_seed,
                                            image_size=cfg.image_size,
                                            n_band=cfg.n_band)
    tp, vp = os.path.join(out, TRAIN_DS), os.path.join(out, VAL_DS)
    simulator.save_dataset(tp, train)
    simulator.save_dataset(vp, val)
    _write_provenance(out, "dataset", cfg, seed, [], [tp, vp], time.perf_counter() - t0)
    print(f"wrote {tp} ({train.n} samples) and {vp} ({val.n} samples)")
    return 0


def cmd_train_ae(cfg, seed, out, args):
    t0 = time.perf_counter()
    train, val = _load_datasets(out)
    rows = []

    def cb(row):
        rows.append(row)
        print(f"[wae] epoch {row.epoch}: total={row.total:.4f} "
              f"val_img_mse={row.val_image_mse:.6f}", flush=True)

    enc, dec, disc, _ = wae_mod.train_autoencoder(
        train, val, latent_dim=cfg.latent_dim, gamma_s=cfg.gamma_s,
        gamma_a=cfg.gamma_a, epochs=cfg.wae_epochs, patience=cfg.wae_patience,
        seed=stage_seed(seed, "wae"), log_cb=cb, **_opt_kwargs(cfg))

    paths = [os.path.join(out, n) for n in (AE_ENC, AE_DEC, AE_DISC)]
    nn.save_checkpoint(paths[0], enc.layers())
    nn.save_checkpoint(paths[1], dec.layers())
    nn.save_checkpoint(paths[2], disc.layers())
    wall = time.perf_counter() - t0
    log_path = _write_csv(
        os.path.join(out, WAE_LOG),
        ["epoch", "image_term", "scalar_term", "adv_term", "total",
         "disc_loss", "val_image_mse", "val_scalar_mse"],
        [[r.epoch, r.image_term, r.scalar_term, r.adv_term, r.total,
          r.disc_loss, r.val_image_mse, r.val_scalar_mse]
         for r in rows])
    report.plot_training_log(
        [r.__dict__ for r in rows],
        ["image_term", "scalar_term", "adv_term", "val_image_mse"],
        os.path.join(out, "wae_log.png"), title="autoencoder training")
    _write_provenance(out, "wae", cfg, seed,
                      [os.path.join(out, TRAIN_DS), os.path.join(out, VAL_DS)],
                      paths + [log_path], wall)
    print(f"autoencoder trained ({len(rows)} epochs), checkpoints in {out}")
    return 0


def cmd_train_inverse(cfg, seed, out, args):
    t0 = time.perf_counter()
    train, val = _load_datasets(out)
    _require(out, AE_DEC, "train-ae")  # joint stage downstream needs the decoder
    rows = []
    inv, _ = inv_mod.pretrain_inverse(
        train, val, epochs=cfg.inverse_epochs, patience=cfg.wae_patience,
        seed=stage_seed(seed, "inverse"),
        log_cb=lambda r: (rows.append(r),
                          print(f"[inverse] epoch {r[0]}: train={r[1]:.5f} val={r[2]:.5f}",
                                flush=True)),
        **_opt_kwargs(cfg))
    inv_path = os.path.join(out, INV_CKPT)
    nn.save_checkpoint(inv_path, inv.layers())

    member_seeds = [stage_seed(seed, "ensemble") + 10 * (i + 1)
                    for i in range(cfg.n_members)]
    members = inv_mod.bootstrap_inverses(
        train, val, cfg.n_members, cfg.fraction, member_seeds,
        epochs=cfg.member_epochs, patience=cfg.wae_patience, **_opt_kwargs(cfg))
    manifest = inv_mod.save_ensemble(os.path.join(out, ENSEMBLE_DIR), members)

    wall = time.perf_counter() - t0
    log_path = _write_csv(os.path.join(out, INV_LOG),
                          ["epoch", "train_mse", "val_mse"],
                          [[e, tr, va] for e, tr, va in rows])
    _write_provenance(out, "inverse", cfg, seed,
                      [os.path.join(out, TRAIN_DS), os.path.join(out, VAL_DS)],
                      [inv_path, log_path, manifest], wall)
    print(f"inverse pre-trained and {cfg.n_members}-member ensemble written to {out}")
    return 0


def cmd_train_surrogate(cfg, seed, out, args):
    t0 = time.perf_counter()
    train, val = _load_datasets(out)
    enc, dec = _load_wae(out, cfg)
    inv = _load_inverse(out, cfg)
    rows = []
    sur, inv, _ = sur_mod.train_surrogate(
        train, val, enc, dec, inv, lambda_cyc=cfg.lambda_cyc,
        epochs=cfg.surrogate_epochs, seed=stage_seed(seed, "surrogate"),
        log_cb=lambda r: (rows.append(r),
                          print(f"[surrogate] epoch {r[0]}: reg={r[1]:.5f} "
                                f"val_img_mse={r[7]:.6f}", flush=True)),
        **{k: v for k, v in _opt_kwargs(cfg).items()})

    sp, ip = os.path.join(out, SUR_CKPT), os.path.join(out, SUR_INV)
    nn.save_checkpoint(sp, sur.layers())
    nn.save_checkpoint(ip, inv.layers())
    wall = time.perf_counter() - t0
    header = ["epoch", "regression", "latent_cycle", "input_cycle",
              "inv_regression", "inv_latent_cycle", "val_regression_mse",
              "val_image_mse"]
    log_path = _write_csv(os.path.join(out, SUR_LOG), header, rows)
    report.plot_training_log(
        [dict(zip(header, r)) for r in rows],
        ["regression", "latent_cycle", "input_cycle", "val_image_mse"],
        os.path.join(out, "surrogate_log.png"),
        title=f"surrogate training (lambda_cyc={cfg.lambda_cyc:g})")
    _write_provenance(out, "surrogate", cfg, seed,
                      [os.path.join(out, n) for n in (TRAIN_DS, VAL_DS, AE_ENC, AE_DEC, INV_CKPT)],
                      [sp, ip, log_path], wall)
    print(f"surrogate trained (lambda_cyc={cfg.lambda_cyc:g}); checkpoints in {out}")
    return 0


def cmd_train_baseline(cfg, seed, out, args):
    t0 = time.perf_counter()
    train, val = _load_datasets(out)
    rows = []
    sur, head, _ = sur_mod.train_baseline(
        train, val, latent_dim=cfg.latent_dim, gamma_s=cfg.gamma_s,
        epochs=cfg.baseline_epochs, seed=stage_seed(seed, "baseline"),
        log_cb=lambda r: (rows.append(r),
                          print(f"[baseline] epoch {r[0]}: val_img_mse={r[3]:.6f}",
                                flush=True)),
        **_opt_kwargs(cfg))
    sp, hp = os.path.join(out, BASE_SUR), os.path.join(out, BASE_HEAD)
    nn.save_checkpoint(sp, sur.layers())
    nn.save_checkpoint(hp, head.layers())
    wall = time.perf_counter() - t0
    log_path = _write_csv(os.path.join(out, BASE_LOG),
                          ["epoch", "image_term", "scalar_term",
                           "val_image_mse", "val_scalar_mse"],
                          rows)
    _write_provenance(out, "baseline", cfg, seed,
                      [os.path.join(out, n) for n in (TRAIN_DS, VAL_DS)],
                      [sp, hp, log_path], wall)
    print(f"baseline trained; checkpoints in {out}")
    return 0


def cmd_evaluate(cfg, seed, out, args):
    t0 = time.perf_counter()
    _, val = _load_datasets(out)
    _, dec = _load_wae(out, cfg)
    sur = _load_surrogate(out, cfg)

    bands = evaluation.mse_per_band(sur, dec, val)
    mean_r2, scalar_r2 = evaluation.mean_r2_scalars(sur, dec, val)
    rep = evaluation.MetricsReport(seed=seed, config_hash=config_hash(cfg),
                                   band_mse=bands, mean_r2_scalars=mean_r2,
                                   scalar_r2=scalar_r2)
    path = os.path.join(out, f"metrics_{config_hash(cfg)}_{seed}.csv")
    evaluation.write_metrics_csv(path, rep)
    _plot_band_mse(bands, os.path.join(out, "band_mse.png"))
    _write_provenance(out, "eval", cfg, seed,
                      [os.path.join(out, n) for n in (VAL_DS, AE_DEC, SUR_CKPT)],
                      [path], time.perf_counter() - t0)
    print(f"wrote {path}: mean scalar R2 = "
          f"{'n/a' if mean_r2 is None else f'{mean_r2:.4f}'}, "
          f"band MSE = {[round(m, 6) for m, _ in bands]}")
    return 0


def _plot_band_mse(bands, path):
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 3.5))
    means = [m for m, _ in bands]
    stds = [s for _, s in bands]
    ax.bar(range(len(bands)), means, yerr=stds, capsize=3, color="tab:blue")
    ax.set_xlabel("energy band")
    ax.set_ylabel("val image MSE")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def cmd_scan_test(cfg, seed, out, args):
    t0 = time.perf_counter()
    _, dec = _load_wae(out, cfg)
    sur = _load_surrogate(out, cfg)
    manifest = _require(out, os.path.join(ENSEMBLE_DIR, "ensemble_manifest.txt"),
                        "train-inverse")
    members = inv_mod.load_ensemble(manifest, cfg.image_size, cfg.n_band, cfg.n_sca)

    scan_sets = evaluation.make_scan_sets(stage_seed(seed, "eval"),
                                          bases_per_dim=cfg.scan_bases,
                                          d_in=cfg.d_in, steps=cfg.scan_steps)
    result = evaluation.consistency_score(sur, dec, members, scan_sets)

    path = os.path.join(out, f"scan_{config_hash(cfg)}_{seed}.csv")
    rows = [[i, m.subset_seed, m.fraction, result.member_r2[i],
             result.member_r2_all_dims[i], result.flagged[i]]
            for i, m in enumerate(members)]
    _write_csv(path, ["member", "subset_seed", "fraction", "r2_scan_dim",
                      "r2_all_dims", "flagged_fraction"], rows)
    summary = os.path.join(out, f"scan_summary_{config_hash(cfg)}_{seed}.csv")
    _write_csv(summary, ["consistency_score_sum", "consistency_score_mean", "n_members"],
               [[result.score_sum, result.score_mean, result.n_members]])

    panels = []
    for ss in scan_sets[:25]:
        rimg, rsca = dec.decode(sur.predict(ss.points))
        xcyc = members[0].inverse.predict(rimg, rsca)
        score = evaluation.r2(xcyc[:, ss.dim], ss.points[:, ss.dim])
        panels.append({"dim": ss.dim, "truth": ss.points[:, ss.dim],
                       "recovered": xcyc[:, ss.dim],
                       "r2": 0.0 if score is None else score})
    report.plot_scan_panels(panels, os.path.join(out, "scan_panels.png"))
    report.plot_member_scores(result.member_r2, os.path.join(out, "scan_members.png"))
    _write_provenance(out, "eval", cfg, seed,
                      [os.path.join(out, n) for n in (AE_DEC, SUR_CKPT)] + [manifest],
                      [path, summary], time.perf_counter() - t0)
    print(f"consistency score: sum={result.score_sum:.3f} mean={result.score_mean:.3f} "
          f"over {result.n_members} members -> {path}")
    return 0


def cmd_perturb_test(cfg, seed, out, args):
    t0 = time.perf_counter()
    train, val = _load_datasets(out)
    _, dec = _load_wae(out, cfg)
    sur = _load_surrogate(out, cfg)
    sens = evaluation.perturbation_test(sur, dec, val, cfg.sigma,
                                        stage_seed(seed, "eval"), train=train)
    path = os.path.join(out, f"perturb_{config_hash(cfg)}_{seed}.csv")
    _write_csv(path, ["sigma", "sensitivity", "seed"], [[cfg.sigma, sens, seed]])
    _write_provenance(out, "eval", cfg, seed,
                      [os.path.join(out, n) for n in (TRAIN_DS, VAL_DS, AE_DEC, SUR_CKPT)],
                      [path], time.perf_counter() - t0)
    print(f"perturbation sensitivity at sigma={cfg.sigma:g}: {sens:.6f} -> {path}")
    return 0


def _sweep_arm(out, cfg, fraction, lam, seed):
    train, val = _load_datasets(out)
    enc, dec = _load_wae(out, cfg)
    k = max(1, int(round(fraction * train.n)))
    subset_rng = np.random.Generator(np.random.PCG64(10_000 + int(fraction * 1000)))
    subset = np.sort(subset_rng.permutation(train.n)[:k])
    inv, _ = inv_mod.pretrain_inverse(train, val, epochs=cfg.member_epochs,
                                      patience=cfg.wae_patience,
                                      seed=stage_seed(seed, "sweep"),
                                      subset=subset, **_opt_kwargs(cfg))
    sur, _, _ = sur_mod.train_surrogate(train, val, enc, dec, inv,
                                        lambda_cyc=lam, epochs=cfg.surrogate_epochs,
                                        seed=stage_seed(seed, "sweep") + 1,
                                        subset=subset, **_opt_kwargs(cfg))
    bands = evaluation.mse_per_band(sur, dec, val)
    return {"fraction": fraction, "lambda_cyc": lam, "seed": seed,
            "val_image_mse": float(np.mean([m for m, _ in bands]))}


def cmd_sweep(cfg, seed, out, args):
    t0 = time.perf_counter()
    _load_datasets(out)
    _require(out, AE_ENC, "train-ae")
    arms = [(f, lam, s) for f in cfg.fractions for s in cfg.sweep_seeds
            for lam in cfg.sweep_lambdas]
    threads = getattr(args, "threads", 1) or 1
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_sweep_arm_star,
                                 [(out, cfg, f, lam, s) for f, lam, s in arms]))
    else:
        rows = []
        for f, lam, s in arms:
            rows.append(_sweep_arm(out, cfg, f, lam, s))
            print(f"[sweep] fraction={f:g} lambda={lam:g} seed={s}: "
                  f"val_image_mse={rows[-1]['val_image_mse']:.6f}", flush=True)
    path = os.path.join(out, f"sweep_{config_hash(cfg)}_{seed}.csv")
    _write_csv(path, ["fraction", "lambda_cyc", "seed", "val_image_mse"],
               [[r["fraction"], r["lambda_cyc"], r["seed"], r["val_image_mse"]]
                for r in rows])
    report.plot_sweep(rows, os.path.join(out, "sweep.png"))
    _write_provenance(out, "sweep", cfg, seed,
                      [os.path.join(out, n) for n in (TRAIN_DS, VAL_DS, AE_ENC, AE_DEC)],
                      [path], time.perf_counter() - t0)
    print(f"sweep complete: {len(rows)} arms -> {path}")
    return 0


def _sweep_arm_star(packed):
    return _sweep_arm(*packed)


# --------------------------------------------------------------------- main

COMMANDS = {
    "generate-data": cmd_generate_data,
    "train-ae": cmd_train_ae,
    "train-inverse": cmd_train_inverse,
    "train-surrogate": cmd_train_surrogate,
    "train-baseline": cmd_train_baseline,
    "evaluate": cmd_evaluate,
    "scan-test": cmd_scan_test,
    "perturb-test": cmd_perturb_test,
    "sweep": cmd_sweep,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="macc",
        description="Train and evaluate manifold- and cycle-consistent "
                    "neural surrogates on the built-in synthetic simulator.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key-value config file")
        p.add_argument("--seed", type=int, default=0, help="global seed (fans out per stage)")
        p.add_argument("--out", default="runs", help="artifact directory")
        if name == "sweep":
            p.add_argument("--threads", type=int, default=1,
                           help="concurrent sweep arms (process isolation)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    try:
        return COMMANDS[args.command](cfg, args.seed, args.out, args)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FloatingPointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
