"""CSV and SVG emitters. Formats are fixed so reruns are byte-identical.

Schema versions (bump on any column change):

* ``trajectories/1``: rollout_id, kind, t, warmup, uncertainty, reward_pred,
  then one ``phys_<component>`` column per decoded physical component.
  ``uncertainty`` is empty where no ensemble prediction exists.
* ``traces/1``: series, t, mean, std, runs
* ``vector_field/1``: ix, iy, x_center, y_center, count, dx, dy, empty
* ``training_log/1``: step, elbo, recon_o, recon_r, recon_s, kl, grad_norm
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from latentdiag.diagnostics import DiscrepancyTrace, VectorField
from latentdiag.envs import Environment
from latentdiag.rollouts import LatentTrajectory

SCHEMAS = {
    "trajectories": 1,
    "traces": 1,
    "vector_field": 1,
    "training_log": 1,
    "svg": 1,
}
TRACE_COLUMNS = ("series", "t", "mean", "std", "runs")
FIELD_COLUMNS = ("ix", "iy", "x_center", "y_center", "count", "dx", "dy", "empty")


def _num(x: float) -> str:
    return "" if not math.isfinite(x) else f"{x:.8f}"


def encoded_names(env: Environment) -> list[str]:
    names = []
    for c, is_angle in zip(env.components, env.angle_mask):
        if c in env.excluded:
            continue
        names.extend([f"sin_{c}", f"cos_{c}"] if is_angle else [c])
    return names


def trajectory_columns(env: Environment) -> list[str]:
    return ["rollout_id", "kind", "t", "warmup", "uncertainty", "reward_pred"] + [
        f"phys_{n}" for n in encoded_names(env)
    ]


def trajectories_csv(trajs: Sequence[LatentTrajectory], env: Environment) -> str:
    lines = [",".join(trajectory_columns(env))]
    for tr in trajs:
        for t in range(len(tr)):
            row = [str(tr.rollout_id), tr.kind, str(t), str(int(tr.warmup[t])),
                   _num(tr.uncertainty[t]), _num(tr.reward_pred[t])]
            row += [_num(v) for v in tr.phys_pred[t]]
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def traces_csv(series: Mapping[str, DiscrepancyTrace]) -> str:
    lines = [",".join(TRACE_COLUMNS)]
    for name, tr in series.items():
        for t, m, s in tr.rows():
            lines.append(f"{name},{t},{_num(m)},{_num(s)},{tr.runs}")
    return "\n".join(lines) + "\n"


def vector_field_csv(vf: VectorField) -> str:
    xc = 0.5 * (vf.x_edges[1:] + vf.x_edges[:-1])
    yc = 0.5 * (vf.y_edges[1:] + vf.y_edges[:-1])
    lines = [",".join(FIELD_COLUMNS)]
    nx, ny = vf.shape
    for i in range(nx):
        for j in range(ny):
            dx, dy = vf.mean[i, j]
            lines.append(f"{i},{j},{_num(xc[i])},{_num(yc[j])},{vf.counts[i, j]},{_num(dx)},{_num(dy)},"
                         f"{int(vf.counts[i, j] == 0)}")
    return "\n".join(lines) + "\n"


OVERLAY_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def vector_field_svg(vf: VectorField, overlays: Mapping[str, np.ndarray] | None = None,
                     size: int = 640, title: str = "") -> str:
    """One ``<g class="cell">`` per bin (arrow when non-empty), then overlay paths."""
    pad = 30
    nx, ny = vf.shape
    x0, x1 = vf.x_edges[0], vf.x_edges[-1]
    y0, y1 = vf.y_edges[0], vf.y_edges[-1]
    w = h = size - 2 * pad
    cw, ch = w / nx, h / ny

    def px(x):
        return pad + (x - x0) / (x1 - x0) * w

    def py(y):
        return pad + h - (y - y0) / (y1 - y0) * h

    norms = np.linalg.norm(vf.mean.reshape(-1, 2), axis=1)
    longest = float(norms.max()) if norms.size and norms.max() > 0 else 1.0
    scale = 0.45 * min(cw, ch) / longest
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}" data-schema="svg/{SCHEMAS["svg"]}">',
        f"<title>{title}</title>",
        '<rect x="0" y="0" width="100%" height="100%" fill="white"/>',
        '<g class="field">',
    ]
    for i in range(nx):
        for j in range(ny):
            cx = pad + (i + 0.5) * cw
            cy = pad + h - (j + 0.5) * ch
            count = int(vf.counts[i, j])
            parts = [f'<g class="cell" data-ix="{i}" data-iy="{j}" data-count="{count}">',
                     f'<rect x="{cx - cw / 2:.3f}" y="{cy - ch / 2:.3f}" width="{cw:.3f}" height="{ch:.3f}" '
                     f'fill="none" stroke="#eeeeee" stroke-width="0.5"/>']
            if count:
                dx, dy = vf.mean[i, j] * scale
                parts.append(f'<line x1="{cx:.3f}" y1="{cy:.3f}" x2="{cx + dx:.3f}" y2="{cy - dy:.3f}" '
                             f'stroke="#555555" stroke-width="1"/>')
                parts.append(f'<circle cx="{cx + dx:.3f}" cy="{cy - dy:.3f}" r="1.2" fill="#555555"/>')
            parts.append("</g>")
            out.append("".join(parts))
    out.append("</g>")
    for k, (name, path) in enumerate((overlays or {}).items()):
        color = OVERLAY_COLORS[k % len(OVERLAY_COLORS)]
        pts = " ".join(f"{px(x):.3f},{py(y):.3f}" for x, y in np.asarray(path))
        out.append(f'<g class="overlay" data-name="{name}"><polyline points="{pts}" fill="none" '
                   f'stroke="{color}" stroke-width="2"/>')
        if len(path):
            sx, sy = np.asarray(path)[0]
            out.append(f'<circle cx="{px(sx):.3f}" cy="{py(sy):.3f}" r="4" fill="{color}"/>')
        out.append(f'<text x="{pad + 5}" y="{pad + 14 * (k + 1)}" fill="{color}" font-size="12">{name}</text></g>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def write_manifest(out_dir: Path, files: Iterable[tuple[Path, str]]) -> Path:
    """``manifest.json`` listing each emitted file with its schema and sha256."""
    entries = {}
    for path, schema in files:
        entries[path.name] = {"schema": f"{schema}/{SCHEMAS[schema]}",
                              "sha256": hashlib.sha256(path.read_bytes()).hexdigest()}
    p = out_dir / "manifest.json"
    existing = json.loads(p.read_text()) if p.exists() else {}
    existing.update(entries)
    p.write_text(json.dumps(existing, indent=2, sort_keys=True) + "\n")
    return p
