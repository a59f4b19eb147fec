"""
レポート CSV の可視化
scripts/plot_results.py

report / eval が書き出した histogram.csv と roc.csv から
s̄ のヒストグラム（clean と敵対的サンプル）と攻撃ごとの ROC 曲線を PNG で保存する

使い方:
    python scripts/plot_results.py --report-dir runs/default
"""
import argparse
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

# プロジェクトルートディレクトリをPythonパスに追加
script_dir = os.path.dirname(os.path.abspath(__file__))
project_root = os.path.dirname(script_dir)
sys.path.insert(0, project_root)

from utils.constants import HISTOGRAM_FILE, ROC_FILE, ensure_directory_exists


def plot_histogram(histogram: pd.DataFrame, path: str):
    """共通ビンの棒グラフを重ねて描く"""
    fig, ax = plt.subplots(figsize=(7, 4))
    widths = histogram["bin_right"] - histogram["bin_left"]
    for column, color in (("clean", "tab:blue"), ("adversarial", "tab:red")):
        ax.bar(histogram["bin_left"], histogram[column], width=widths, align="edge",
               alpha=0.5, color=color, label=column)
    ax.set_xlabel("average local spatial entropy")
    ax.set_ylabel("images")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_roc(curves: pd.DataFrame, path: str):
    fig, ax = plt.subplots(figsize=(5, 5))
    for attack, curve in curves.groupby("attack", sort=False):
        ax.plot(curve["fpr"], curve["tpr"], label=attack)
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def main():
    parser = argparse.ArgumentParser(description="ヒストグラムと ROC 曲線を描画")
    parser.add_argument("--report-dir", required=True, help="histogram.csv と roc.csv のあるディレクトリ")
    parser.add_argument("--out-dir", help="出力先（省略時は report-dir）")
    args = parser.parse_args()
    out_dir = args.out_dir or args.report_dir
    ensure_directory_exists(out_dir)

    histogram_path = os.path.join(args.report_dir, HISTOGRAM_FILE)
    roc_path = os.path.join(args.report_dir, ROC_FILE)
    for path in (histogram_path, roc_path):
        if not os.path.exists(path):
            print(f"[PLOT] エラー: {path} がありません（先に eval か report を実行してください）")
            sys.exit(4)

    histogram = pd.read_csv(histogram_path)
    if histogram.empty:
        print("[PLOT] ヒストグラムが空のためスキップします")
    else:
        plot_histogram(histogram, os.path.join(out_dir, "histogram.png"))
        print(f"[PLOT] {os.path.join(out_dir, 'histogram.png')}")

    curves = pd.read_csv(roc_path)
    if curves.empty:
        print("[PLOT] ROC 曲線がないためスキップします")
    else:
        plot_roc(curves, os.path.join(out_dir, "roc.png"))
        print(f"[PLOT] {os.path.join(out_dir, 'roc.png')}")


if __name__ == "__main__":
    main()
