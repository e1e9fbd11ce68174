"""On-disk formats: weight files, JSONL results, PGM/PPM images, flow SVGs.

Weight file layout::

    STADV-WEIGHTS 1\\n
    {json header on one line}\\n
    <little-endian float32 payload>

The header lists every tensor as ``{"name", "shape", "offset", "nbytes"}``
with offsets relative to the start of the payload.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

__all__ = [
    "WeightFormatError",
    "save_weights",
    "load_weights",
    "weight_header",
    "RESULT_FIELDS",
    "outcome_record",
    "write_results",
    "read_results",
    "export_image",
    "read_pnm",
    "export_flow_svg",
]

WEIGHT_MAGIC = b"STADV-WEIGHTS 1\n"
RESULT_FIELDS = ("method", "model", "defense", "target", "success", "flow_tv", "flow_l2", "tau", "seed", "wall_ms")


class WeightFormatError(ValueError):
    pass


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_weights(model, path, meta=None):
    """Write ``model.weights`` as float32 in manifest order."""
    entries, chunks, offset = [], [], 0
    for name, shape in model.manifest.items():
        arr = np.ascontiguousarray(model.weights[name], dtype="<f4")
        if arr.shape != tuple(shape):
            raise WeightFormatError(f"weight {name} has shape {arr.shape}, manifest says {shape}")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(shape), "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    header = {
        "format_version": 1,
        "architecture": model.name,
        "dtype": "float32-le",
        "payload_bytes": offset,
        "tensors": entries,
        "meta": meta or {},
    }
    path = Path(path)
    try:
        path.write_bytes(WEIGHT_MAGIC + _dumps(header).encode() + b"\n" + b"".join(chunks))
    except OSError as err:
        raise OSError(f"cannot write weights to {path}: {err}") from err
    return path


def _split_weight_file(raw, path):
    if not raw.startswith(WEIGHT_MAGIC):
        raise WeightFormatError(f"{path}: not a weight file (bad magic)")
    end = raw.find(b"\n", len(WEIGHT_MAGIC))
    if end < 0:
        raise WeightFormatError(f"{path}: unterminated header")
    try:
        header = json.loads(raw[len(WEIGHT_MAGIC) : end])
    except ValueError as err:
        raise WeightFormatError(f"{path}: unreadable header: {err}") from err
    return header, raw[end + 1 :]


def weight_header(path):
    return _split_weight_file(Path(path).read_bytes(), path)[0]


def load_weights(model, path):
    """Load weights into ``model``; nothing is assigned unless the whole file checks out."""
    path = Path(path)
    header, payload = _split_weight_file(path.read_bytes(), path)
    if header.get("format_version") != 1:
        raise WeightFormatError(f"{path}: unsupported format version {header.get('format_version')}")
    arch = header.get("architecture")
    if arch != model.name:
        raise WeightFormatError(f"{path}: file holds architecture {arch!r}, model is {model.name!r}")
    if header.get("payload_bytes") != len(payload):
        raise WeightFormatError(
            f"{path}: payload is {len(payload)} bytes, header says {header.get('payload_bytes')}"
        )
    manifest = model.manifest
    entries = header.get("tensors", [])
    names = [e["name"] for e in entries]
    if sorted(names) != sorted(manifest):
        raise WeightFormatError(f"{path}: tensor names do not match architecture {model.name!r}")

    loaded, spans = {}, []
    for e in entries:
        shape = tuple(e["shape"])
        if shape != manifest[e["name"]]:
            raise WeightFormatError(f"{path}: {e['name']} has shape {shape}, expected {manifest[e['name']]}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        start = e["offset"]
        if e.get("nbytes") != nbytes or start < 0 or start + nbytes > len(payload):
            raise WeightFormatError(f"{path}: {e['name']} offset {start} (+{nbytes}) outside payload of {len(payload)} bytes")
        spans.append((start, start + nbytes, e["name"]))
        loaded[e["name"]] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape)
    spans.sort()
    cursor = 0
    for start, stop, name in spans:
        if start != cursor:
            raise WeightFormatError(f"{path}: {name} at offset {start} overlaps or leaves a gap (expected {cursor})")
        cursor = stop
    if cursor != len(payload):
        raise WeightFormatError(f"{path}: {len(payload) - cursor} unaccounted payload bytes")
    model.weights = {k: loaded[k].astype(np.float64) for k in manifest}
    return header


# --- result records -------------------------------------------------------


def _clean(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else None
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def outcome_record(outcome, model="", defense="none", seed=0, index=None):
    """Flatten an AttackOutcome into the stable result-record layout."""
    rec = {
        "method": outcome.method,
        "model": model,
        "defense": defense,
        "target": outcome.target,
        "success": bool(outcome.success),
        "flow_tv": outcome.flow_tv,
        "flow_l2": outcome.flow_l2,
        "tau": outcome.tau,
        "seed": seed,
        "wall_ms": outcome.wall_ms,
        "index": index,
        "true_class": outcome.true_class,
        "prediction": outcome.prediction,
    }
    for key in ("l2", "linf", "epsilon", "termination", "iterations", "flow_units"):
        if key in outcome.info:
            rec[key] = outcome.info[key]
    return _clean(rec)


def _to_record(item):
    if isinstance(item, dict):
        return _clean(item)
    if hasattr(item, "to_record"):
        return _clean(item.to_record())
    if hasattr(item, "method") and hasattr(item, "success"):
        return outcome_record(item)
    raise TypeError(f"cannot serialise {type(item).__name__} as a result record")


def write_results(items, path, run_config=None):
    """Write newline-delimited JSON, one object per line.

    When ``run_config`` is given it is written first as ``{"run_config": ...}``.
    """
    path = Path(path)
    lines = []
    if run_config is not None:
        lines.append(_dumps({"run_config": _clean(run_config)}))
    lines.extend(_dumps(_to_record(it)) for it in items)
    try:
        path.write_text("".join(line + "\n" for line in lines))
    except OSError as err:
        raise OSError(f"cannot write results to {path}: {err}") from err
    return path


def read_results(path):
    """Return ``(run_config or None, records)`` from a results file."""
    header, records = None, []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "run_config" in obj and len(obj) == 1:
            header = obj["run_config"]
        else:
            records.append(obj)
    return header, records


# --- images -----------------------------------------------------------------


def _quantize(x, pixel_range):
    lo, hi = pixel_range
    scaled = (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)
    return np.floor(np.clip(scaled, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_image(x, path, pixel_range=(0.0, 1.0), comment=None):
    """Write (H,W) / (H,W,1) as binary PGM (P5) or (H,W,3) as PPM (P6), maxval 255."""
    x = np.asarray(x)
    if x.ndim == 3 and x.shape[2] == 1:
        x = x[..., 0]
    if x.ndim == 2:
        magic = b"P5"
    elif x.ndim == 3 and x.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"export_image needs (H,W), (H,W,1) or (H,W,3), got {x.shape}")
    h, w = x.shape[:2]
    head = magic + b"\n"
    if comment:
        for line in str(comment).splitlines():
            head += b"# " + line.encode() + b"\n"
    head += f"{w} {h}\n255\n".encode()
    path = Path(path)
    try:
        path.write_bytes(head + _quantize(x, pixel_range).tobytes())
    except OSError as err:
        raise OSError(f"cannot write image {path}: {err}") from err
    return path


def read_pnm(path, pixel_range=(0.0, 1.0)):
    """Read a binary PGM/PPM written by :func:`export_image`; returns (H,W,C) floats."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None or maxval != 255:
        raise ValueError(f"{path}: unsupported PNM variant {magic!r} maxval {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    lo, hi = pixel_range
    return data.reshape(h, w, channels).astype(np.float64) / 255.0 * (hi - lo) + lo


def export_flow_svg(flow, x, path, stride=2, cell=12, arrow_scale=1.0, pixel_range=(0.0, 1.0), comment=None):
    """Quiver plot of ``flow`` over a faded copy of ``x``.

    One arrow per ``stride``-th grid cell, from the pixel centre toward
    ``(u + du, v + dv)``. Each image pixel is a ``cell``-unit square and a flow
    of one pixel draws ``cell * arrow_scale`` units long.
    """
    flow = np.asarray(flow, dtype=np.float64)
    img = np.asarray(x, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w = flow.shape[:2]
    if img.shape[:2] != (h, w):
        raise ValueError(f"flow {flow.shape} and image {img.shape} differ in size")
    q = _quantize(img, pixel_range)
    if q.shape[2] == 1:
        q = np.repeat(q, 3, axis=2)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cell}" height="{h * cell}" '
        f'viewBox="0 0 {w * cell} {h * cell}">',
        f"<!-- arrow scale: 1 pixel of flow = {cell * arrow_scale:g} svg units; "
        f"cell size {cell}; stride {stride} -->",
    ]
    if comment:
        out.append(f"<!-- {escape(str(comment)).replace('--', '- -')} -->")
    out += [
        "<defs><marker id=\"head\" markerWidth=\"6\" markerHeight=\"6\" refX=\"5\" refY=\"3\" "
        "orient=\"auto\"><path d=\"M0,0 L6,3 L0,6 z\" fill=\"#d62728\"/></marker></defs>",
        '<g id="image" opacity="0.35">',
    ]
    for r in range(h):
        for c in range(w):
            red, green, blue = (int(v) for v in q[r, c])
            out.append(
                f'<rect x="{c * cell}" y="{r * cell}" width="{cell}" height="{cell}" '
                f'fill="rgb({red},{green},{blue})"/>'
            )
    out.append("</g>")
    out.append('<g id="flow" stroke="#d62728" stroke-width="1.2">')
    for r in range(0, h, stride):
        for c in range(0, w, stride):
            x1, y1 = (c + 0.5) * cell, (r + 0.5) * cell
            x2 = x1 + flow[r, c, 1] * cell * arrow_scale
            y2 = y1 + flow[r, c, 0] * cell * arrow_scale
            marker = ' marker-end="url(#head)"' if (x1, y1) != (x2, y2) else ""
            out.append(f'<line x1="{x1:.6g}" y1="{y1:.6g}" x2="{x2:.6g}" y2="{y2:.6g}"{marker}/>')
    out.append("</g>")
    out.append("</svg>")
    path = Path(path)
    try:
        path.write_text("\n".join(out) + "\n")
    except OSError as err:
        raise OSError(f"cannot write flow SVG {path}: {err}") from err
    return path
