"""Figure rendering for the report path.

Headless by construction: the Agg backend is forced before pyplot loads,
so figures render identically with or without a display.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import RunStats  # noqa: E402


def plot_timeline(timeline_rows: list[dict[str, str]], path: str,
                  title: str = "run timeline") -> None:
    t = [float(r["t_start_s"]) for r in timeline_rows]
    occ = [float(r["occupancy"]) for r in timeline_rows]
    queued = [int(r["queued"]) for r in timeline_rows]
    ttft = [(float(r["mean_ttft_s"]) if r["mean_ttft_s"] else None)
            for r in timeline_rows]
    tput = [float(r["throughput_tps"]) for r in timeline_rows]

    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(8, 7))
    axes[0].plot(t, occ, color="tab:blue")
    axes[0].set_ylabel("KVCache occupancy")
    axes[0].set_ylim(0, 1.05)
    ax2 = axes[0].twinx()
    ax2.plot(t, queued, color="tab:gray", alpha=0.6)
    ax2.set_ylabel("queued", color="tab:gray")

    tt = [(x, y) for x, y in zip(t, ttft) if y is not None]
    if tt:
        axes[1].plot([x for x, _ in tt], [y for _, y in tt], color="tab:red")
    axes[1].set_ylabel("mean TTFT (s)")
    axes[1].set_yscale("log")

    axes[2].plot(t, tput, color="tab:green")
    axes[2].set_ylabel("tokens/s")
    axes[2].set_xlabel("time (s)")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _cdf(ax, values: list[float], label: str) -> None:
    if not values:
        return
    xs = sorted(values)
    ys = [(i + 1) / len(xs) for i in range(len(xs))]
    ax.plot(xs, ys, label=label)


def plot_latency_cdfs(stats_by_policy: dict[str, RunStats], path: str) -> None:
    fig, (ax_ttft, ax_tpot) = plt.subplots(1, 2, figsize=(9, 4))
    for policy in sorted(stats_by_policy):
        st = stats_by_policy[policy]
        _cdf(ax_ttft, st.ttfts(), policy)
        _cdf(ax_tpot, st.tpots(), policy)
    ax_ttft.set_xlabel("TTFT (s)")
    ax_ttft.set_ylabel("CDF")
    ax_ttft.set_xscale("log")
    ax_ttft.legend()
    ax_tpot.set_xlabel("TPOT (s)")
    ax_tpot.set_xscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
