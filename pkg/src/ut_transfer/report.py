"""Dependency-free SVG line plots and the plain-text run summary."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from xml.sax.saxutils import escape, quoteattr

from .transfer import TransferMatrix

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
DASHES = ("", "6,3", "2,2", "8,3,2,3")


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def sweep_svg(matrix: TransferMatrix, surrogate: str, best_epoch: int, fully_trained: int | None = None,
              width: int = 640, height: int = 400) -> str:
    """Post-attack accuracy against surrogate epoch, one polyline per (target, attack).

    A dashed vertical line marks ``best_epoch``; a dotted one marks the
    fully-trained epoch when given. Series carry ``data-*`` attributes with
    their raw values so the plot can be checked against the matrix CSV.
    """
    m = matrix.select(surrogate=surrogate)
    if not m.cells:
        raise ValueError(f"no cells for surrogate {surrogate!r}")
    epochs = m.surrogate_epochs
    left, right, top, bottom = 60, 170, 30, 50
    pw, ph = width - left - right, height - top - bottom
    e0, e1 = epochs[0], max(epochs[-1], epochs[0] + 1)

    def sx(e: float) -> float:
        return left + pw * (e - e0) / (e1 - e0)

    def sy(acc: float) -> float:
        return top + ph * (1 - acc / 100.0)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" data-surrogate={quoteattr(surrogate)}>',
           f'<title>{escape(f"transfer accuracy vs {surrogate} epoch")}</title>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for acc in range(0, 101, 20):
        y = _fmt(sy(acc))
        out.append(f'<line class="grid" x1="{left}" y1="{y}" x2="{left + pw}" y2="{y}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{y}" font-size="11" text-anchor="end" dominant-baseline="middle">'
                   f'{acc}</text>')
    tick_step = max(1, len(epochs) // 10)
    for e in epochs[::tick_step]:
        x = _fmt(sx(e))
        out.append(f'<text x="{x}" y="{top + ph + 16}" font-size="11" text-anchor="middle">{e}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" font-size="12" text-anchor="middle">'
               f'surrogate epoch ({escape(surrogate)})</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">post-attack target accuracy (%)</text>')

    series = [(t, a) for t in m.targets for a in m.attacks]
    for i, ((tarch, tepoch), attack) in enumerate(series):
        cells = sorted((c for c in m.cells if (c.target_arch, c.target_epoch) == (tarch, tepoch)
                        and c.attack == attack), key=lambda c: c.surrogate_epoch)
        if not cells:
            continue
        pts = " ".join(f"{_fmt(sx(c.surrogate_epoch))},{_fmt(sy(c.post_attack_acc))}" for c in cells)
        colour = PALETTE[i % len(PALETTE)]
        dash = DASHES[m.attacks.index(attack) % len(DASHES)]
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(f'<polyline class="series" data-target={quoteattr(f"{tarch}@{tepoch}")} '
                   f'data-attack={quoteattr(attack)} '
                   f'data-epochs="{",".join(str(c.surrogate_epoch) for c in cells)}" '
                   f'data-acc="{",".join(repr(c.post_attack_acc) for c in cells)}" '
                   f'points="{pts}" fill="none" stroke="{colour}" stroke-width="1.5"{dash_attr}/>')
        ly = top + 14 * i + 8
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                   f'stroke="{colour}"{dash_attr}/>')
        out.append(f'<text x="{left + pw + 34}" y="{ly}" font-size="10" dominant-baseline="middle">'
                   f'{escape(f"{tarch}@{tepoch} {attack}")}</text>')

    bx = _fmt(sx(best_epoch))
    out.append(f'<line class="best-epoch" data-epoch="{best_epoch}" x1="{bx}" y1="{top}" x2="{bx}" '
               f'y2="{top + ph}" stroke="#000" stroke-dasharray="5,4"/>')
    if fully_trained is not None:
        fx = _fmt(sx(fully_trained))
        out.append(f'<line class="fully-trained-epoch" data-epoch="{fully_trained}" x1="{fx}" y1="{top}" '
                   f'x2="{fx}" y2="{top + ph}" stroke="#888" stroke-dasharray="1,3"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def parse_sweep_svg(text: str) -> dict:
    """Read back the structural content of :func:`sweep_svg` output."""
    root = ET.fromstring(text)
    ns = "{http://www.w3.org/2000/svg}"
    series = {}
    for pl in root.iter(f"{ns}polyline"):
        if pl.get("class") != "series":
            continue
        epochs = [int(e) for e in pl.get("data-epochs").split(",")]
        accs = [float(a) for a in pl.get("data-acc").split(",")]
        series[(pl.get("data-target"), pl.get("data-attack"))] = dict(zip(epochs, accs))
    markers = {ln.get("class"): int(ln.get("data-epoch")) for ln in root.iter(f"{ns}line")
               if ln.get("class") in ("best-epoch", "fully-trained-epoch")}
    return {"surrogate": root.get("data-surrogate"), "series": series, "markers": markers}


def table(rows: list[list[str]], header: list[str]) -> str:
    cols = list(zip(header, *rows)) if rows else [(h,) for h in header]
    widths = [max(len(str(v)) for v in col) for col in cols]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*map(str, r)) for r in rows]
    return "\n".join(lines) + "\n"
