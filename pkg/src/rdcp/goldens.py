"""Golden bitstreams: raw ``.bits`` files plus a plain-text sidecar.

Sidecar layout (one record per line)::

    format rdcp-bits
    version 1
    nbits <n>
    model <id> <count> <count> ...
    model_ids <id> <id> ...
    symbols <s> <s> ...
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .coding import FORMAT_VERSION, Bitstream, FrequencyModel, ac_encode
from .codec import attach_posterior_decoder, design_mse_codec, encode_instance
from .core import JointSource

SIDECAR_SUFFIX = ".txt"


def sidecar(stream: Bitstream, models, model_ids, symbols, extra=()) -> str:
    lines = ["format rdcp-bits", f"version {FORMAT_VERSION}", f"nbits {len(stream)}"]
    for k, m in enumerate(models):
        lines.append(" ".join(["model", str(k)] + [str(c) for c in m.counts]))
    lines.append(" ".join(["model_ids"] + [str(i) for i in model_ids]))
    lines.append(" ".join(["symbols"] + [str(s) for s in symbols]))
    lines.extend(extra)
    return "\n".join(lines) + "\n"


def read_sidecar(text: str) -> dict:
    out = {"models": {}, "extra": {}}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, *rest = line.split()
        if key == "model":
            out["models"][int(rest[0])] = FrequencyModel(tuple(int(c) for c in rest[1:]))
        elif key in ("model_ids", "symbols"):
            out[key] = [int(v) for v in rest]
        elif key in ("version", "nbits"):
            out[key] = int(rest[0])
        elif key == "format":
            out[key] = rest[0]
        else:
            out["extra"][key] = " ".join(rest)
    if out.get("format") != "rdcp-bits":
        raise ValueError("not an rdcp-bits sidecar")
    if out.get("version") != FORMAT_VERSION:
        raise ValueError(f"sidecar version {out.get('version')} != coder version {FORMAT_VERSION}")
    return out


def read_golden(bits_path) -> tuple:
    """Return (stream, per-position models, symbols, sidecar dict)."""
    bits_path = Path(bits_path)
    meta = read_sidecar(bits_path.with_suffix(SIDECAR_SUFFIX).read_text())
    stream = Bitstream.from_bytes(bits_path.read_bytes(), meta["nbits"])
    models = [meta["models"][i] for i in meta["model_ids"]]
    return stream, models, meta["symbols"], meta


def _coder_case(symbols, models, model_ids, extra=()):
    per_pos = [models[i] for i in model_ids]
    stream = ac_encode(symbols, per_pos)
    return stream.to_bytes(), sidecar(stream, models, model_ids, symbols, extra).encode()


def quaternary_pipeline():
    src = JointSource.from_marginal([0.25] * 4, x_values=[0.0, 1.0, 2.0, 3.0])
    return attach_posterior_decoder(design_mse_codec(src, 2))


def golden_files() -> dict:
    """Every golden file name mapped to its exact bytes."""
    files = {}
    rng = np.random.default_rng(20240)

    def add(name, case):
        files[name + ".bits"], files[name + SIDECAR_SUFFIX] = case

    add("ac_empty", _coder_case([], [FrequencyModel.uniform(4)], []))
    add("ac_uniform256", _coder_case([200], [FrequencyModel.uniform(256)], [0]))
    bern = FrequencyModel.from_pmf([0.9, 0.1])
    syms = (rng.random(1000) < 0.1).astype(int).tolist()
    add("ac_bern01_1000", _coder_case(syms, [bern], [0] * 1000))
    ctx = [FrequencyModel.from_pmf([0.5, 0.3, 0.2]), FrequencyModel.from_pmf([0.05, 0.95]),
           FrequencyModel.from_pmf([0.1] * 10, total=1000)]
    ids = rng.integers(0, 3, size=300).tolist()
    syms = [int(rng.choice(len(ctx[i]), p=np.array(ctx[i].counts) / ctx[i].total)) for i in ids]
    add("ac_contexts_300", _coder_case(syms, ctx, ids))

    pipe = quaternary_pipeline()
    enc = encode_instance(pipe, 3, "*")
    m = int(pipe.assign[3, 0])
    extra = ("x 3", "y *", f"m {m}", f"xhat {float(pipe.g1[m, 0])!r}",
             f"bits_y {len(enc.y_bits)}", f"bits_m {len(enc.m_bits)}")
    stream = enc.bits
    files["instance_4point_x3.bits"] = stream.to_bytes()
    files["instance_4point_x3" + SIDECAR_SUFFIX] = sidecar(
        stream, [pipe.m_models[0]], [0], [pipe.local_label(m, 0)], extra).encode()
    files["pipeline_4point.json"] = (pipe.to_json() + "\n").encode()
    return files


def regenerate(out_dir) -> dict:
    """Write all goldens; returns {"new": [...], "changed": [...], "unchanged": [...]}."""
    out = Path(out_dir)
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    summary = {"created_dir": created, "new": [], "changed": [], "unchanged": []}
    for name, data in sorted(golden_files().items()):
        path = out / name
        if not path.exists():
            summary["new"].append(name)
        elif path.read_bytes() != data:
            summary["changed"].append(name)
        else:
            summary["unchanged"].append(name)
            continue
        path.write_bytes(data)
    return summary


def compare(out_dir) -> dict:
    """Same summary as ``regenerate`` without writing anything."""
    out = Path(out_dir)
    summary = {"created_dir": False, "new": [], "changed": [], "unchanged": []}
    for name, data in sorted(golden_files().items()):
        path = out / name
        if not path.exists():
            summary["new"].append(name)
        elif path.read_bytes() != data:
            summary["changed"].append(name)
        else:
            summary["unchanged"].append(name)
    return summary
