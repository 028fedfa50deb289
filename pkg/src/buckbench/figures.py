"""Static PNG rendering for run and comparison reports.

Everything funnels through one save helper that pins the backend, the
canvas, and the PNG metadata, so rerunning a seeded pipeline reproduces
the image files byte for byte.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .fileio import atomic_write_bytes  # noqa: E402

_DPI = 120


def _save(fig, path):
    import io

    buf = io.BytesIO()
    # strip the library version stamp so bytes depend on data alone
    fig.savefig(buf, format="png", dpi=_DPI, metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def render_run_figure(traj, scenario, path):
    """Voltage with its reference, and inductor current, against time."""
    fig, (ax_v, ax_i) = plt.subplots(2, 1, sharex=True, figsize=(7, 5))
    t_ms = traj.t * 1e3
    ax_v.plot(t_ms, traj.v_c, label="v_c")
    ax_v.plot(t_ms, [scenario.v_ref.at(t) for t in traj.t], "--",
              label="v_ref")
    ax_v.set_ylabel("voltage [V]")
    ax_v.legend(loc="lower right")
    ax_v.set_title(scenario.name)
    ax_i.plot(t_ms, traj.i_l)
    ax_i.set_ylabel("current [A]")
    ax_i.set_xlabel("time [ms]")
    fig.tight_layout()
    _save(fig, path)


def render_compare_figure(comp, path, label_a=None, label_b=None):
    """Figure-style side-by-side panels from a comparison's merged table."""
    table = comp.table
    if table is None:
        raise ValueError("comparison carries no plot table")
    la = label_a or comp.controller_a
    lb = label_b or comp.controller_b
    fig, (ax_v, ax_i) = plt.subplots(2, 1, sharex=True, figsize=(7, 5))
    t_ms = table["t"] * 1e3
    ax_v.plot(t_ms, table["v_c_a"], label=la)
    ax_v.plot(t_ms, table["v_c_b"], label=lb)
    ax_v.plot(t_ms, table["v_ref"], "k--", linewidth=1, label="v_ref")
    ax_v.set_ylabel("voltage [V]")
    ax_v.legend(loc="lower right")
    ax_v.set_title(comp.scenario)
    ax_i.plot(t_ms, table["i_l_a"], label=la)
    ax_i.plot(t_ms, table["i_l_b"], label=lb)
    ax_i.set_ylabel("current [A]")
    ax_i.set_xlabel("time [ms]")
    ax_i.legend(loc="lower right")
    fig.tight_layout()
    _save(fig, path)
