#!/usr/bin/env python3
"""Render the CSV outputs of `abd` run directories as PNG figures.

    python scripts/plot.py RUN_DIR [RUN_DIR ...] [-o OUT_DIR]

Recognised files: metrics.csv (train-policy), losses.csv (train-dynamics),
retention.csv (eval-shift), ablation.csv (ablate). Several run directories
overlay on the same axes, labelled by directory name.
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def plot_metrics(runs, out):
    fig, axes = plt.subplots(1, 3, figsize=(14, 4))
    for name, df in runs:
        axes[0].plot(df["env_steps"], df["mean_return"], label=name)
        axes[1].plot(df["env_steps"], df["value_loss"], label=name)
        if df["orth_loss"].notna().any():
            axes[2].plot(df["env_steps"], df["orth_loss"], label=name)
    for ax, title in zip(axes, ["mean return", "value loss", "orth loss"]):
        ax.set_xlabel("env steps")
        ax.set_title(title)
    axes[1].set_yscale("log")
    axes[2].set_yscale("log")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "metrics.png", dpi=120)


def plot_losses(runs, out):
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, df in runs:
        ax.plot(df["epoch"], df["train_loss"], label=name)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_title("dynamics regression loss (standardised)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "losses.png", dpi=120)


def plot_retention(runs, out):
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, df in runs:
        nominal = df.loc[df["factor"].astype(str) == "nominal", "mean_return"]
        scale = 100.0 / nominal.iloc[0] if len(nominal) and nominal.iloc[0] else 1.0
        df = df[df["factor"].astype(str) != "nominal"].astype({"factor": float})
        lo = (df["mean_return"] - df["ci_lo"]) * scale
        hi = (df["ci_hi"] - df["mean_return"]) * scale
        ax.errorbar(df["factor"], df["retention_pct"], yerr=[lo, hi], marker="o", capsize=3, label=name)
    ax.axhline(100.0, color="grey", lw=0.5)
    ax.set_xlabel("mass factor")
    ax.set_ylabel("retention %")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "retention.png", dpi=120)


def plot_ablation(runs, out):
    df = pd.concat([d.assign(run=n) for n, d in runs])
    metrics = sorted(df["metric"].unique())
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 4), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        sub = df[df["metric"] == metric].groupby("variant")["value"]
        mean, std = sub.mean(), sub.std().fillna(0.0)
        ax.bar(mean.index, mean.values, yerr=std.values, capsize=3)
        ax.set_title(metric)
        ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(out / "ablation.png", dpi=120)


PLOTTERS = {
    "metrics.csv": plot_metrics,
    "losses.csv": plot_losses,
    "retention.csv": plot_retention,
    "ablation.csv": plot_ablation,
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("runs", nargs="+", type=Path)
    ap.add_argument("-o", "--out", type=Path, default=Path("plots"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    made = 0
    for fname, plot in PLOTTERS.items():
        runs = [(r.name, pd.read_csv(r / fname, na_values=["nan"])) for r in args.runs if (r / fname).exists()]
        if runs:
            plot(runs, args.out)
            made += 1
            print(f"wrote {args.out / fname.replace('.csv', '.png')}")
    if not made:
        raise SystemExit("no recognised CSV files in the given run directories")


if __name__ == "__main__":
    main()
