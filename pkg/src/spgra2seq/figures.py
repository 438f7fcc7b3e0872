"""Static diagnostics: patch-graph SVGs and healing triplet PNGs."""

from __future__ import annotations

import base64
import json
import logging
import os
import xml.etree.ElementTree as ET

import numpy as np

from . import graph
from .evaluate import encode_codes
from .model import SPGra2Seq
from .sketch import make_patchset, rasterize, to_png
from .tensor import no_grad

log = logging.getLogger(__name__)

SVG_NS = "http://www.w3.org/2000/svg"


def top1_from_matrix(a: np.ndarray) -> list[int]:
    """Strongest off-diagonal inner link per patch node (-1 if none), 0-based."""
    inner = np.array(a, dtype=np.float64)[1:, 1:]
    np.fill_diagonal(inner, -np.inf)
    out = []
    for row in inner:
        j = int(row.argmax())
        out.append(j if np.isfinite(row[j]) and row[j] > 0 else -1)
    return out


def graph_svg(pixels: np.ndarray, centers, top1, scale: int = 4, radius: float = 3.0) -> str:
    """Raster as an embedded PNG, red dots at patch centers, blue top-1 edges."""
    n = pixels.shape[0]
    ET.register_namespace("", SVG_NS)
    root = ET.Element(f"{{{SVG_NS}}}svg", width=str(n * scale), height=str(n * scale),
                      viewBox=f"0 0 {n} {n}", version="1.1")
    href = "data:image/png;base64," + base64.b64encode(to_png(pixels)).decode("ascii")
    ET.SubElement(root, f"{{{SVG_NS}}}image", x="0", y="0", width=str(n), height=str(n), href=href)
    edges = ET.SubElement(root, f"{{{SVG_NS}}}g", id="edges")
    for i, j in enumerate(top1):
        if j < 0:
            continue
        (x1, y1), (x2, y2) = centers[i], centers[j]
        ET.SubElement(edges, f"{{{SVG_NS}}}line", x1=str(x1 + 0.5), y1=str(y1 + 0.5), x2=str(x2 + 0.5),
                      y2=str(y2 + 0.5), stroke="blue", attrib={"stroke-width": "0.8", "data-src": str(i),
                                                               "data-dst": str(j)})
    dots = ET.SubElement(root, f"{{{SVG_NS}}}g", id="centers")
    for i, (x, y) in enumerate(centers):
        ET.SubElement(dots, f"{{{SVG_NS}}}circle", cx=str(x + 0.5), cy=str(y + 0.5), r=str(radius / scale * 2),
                      fill="red", attrib={"data-node": str(i + 1)})
    return ET.tostring(root, encoding="unicode", xml_declaration=True)


def sketch_graph(model: SPGra2Seq, seq, policy: str | None = None, seed: int = 0) -> dict:
    """Adjacency of one sketch under ``policy`` plus what the SVG needs."""
    cfg = model.cfg
    policy = policy or cfg.policy
    pset, canvas = make_patchset(seq, cfg.canvas, cfg.patch, cfg.M)
    with no_grad():
        _, V, g = model.encode([pset], train=False, rng=np.random.default_rng(seed), sample=False,
                               policy=policy)
    a = g.adj.data[0]
    adj = graph.Adjacency(np.asarray(a, dtype=np.float64), policy,
                          None if g.first is None else g.first[0], None if g.second is None else g.second[0])
    info = graph.graph_dump(adj, pset.centers)
    if adj.first is None:
        info["top1"] = top1_from_matrix(a)
    info["canvas"] = canvas
    return info


def graph_dump(model: SPGra2Seq, seq, out_svg, policy: str | None = None, seed: int = 0) -> dict:
    info = sketch_graph(model, seq, policy, seed)
    canvas = info.pop("canvas")
    svg = graph_svg(canvas.pixels, info["centers"], info["top1"])
    with open(out_svg, "w") as f:
        f.write(svg)
    with open(os.path.splitext(str(out_svg))[0] + ".json", "w") as f:
        json.dump(info, f, indent=1)
    return info


def heal_demo(model: SPGra2Seq, seqs, mask: float, out_dir, seed: int = 0) -> list[str]:
    """original / masked / healed PNGs for each sketch; returns the written paths."""
    cfg = model.cfg
    seqs = list(seqs)
    if not seqs:
        return []
    os.makedirs(out_dir, exist_ok=True)
    codes = encode_codes(model, seqs, mask, seed)
    healed = model.generate(codes, greedy=True)
    paths = []
    for i, (seq, gen) in enumerate(zip(seqs, healed)):
        _, masked = make_patchset(seq, cfg.canvas, cfg.patch, cfg.M, mask, [seed, i])
        for tag, img in (("original", rasterize(seq, cfg.canvas).pixels), ("masked", masked.pixels),
                         ("healed", rasterize(gen, cfg.canvas).pixels)):
            path = os.path.join(out_dir, f"{i:04d}_{tag}.png")
            with open(path, "wb") as f:
                f.write(to_png(img))
            paths.append(path)
    return paths
