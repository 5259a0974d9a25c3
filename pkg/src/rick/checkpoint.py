"""Checkpoint I/O.

Layout: an ASCII header of ``key=value`` lines terminated by ``end``,
followed by every parameter array as raw little-endian float64, in layer
order (G layers then D layers, weight before bias).
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import GANPair, build_filter_layout, build_gan

MAGIC = "rick-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    gan: GANPair
    bank: str = ""
    iteration: int = 0
    seed: int = 0


def _shape_str(shape) -> str:
    return "x".join(str(d) for d in shape)


def dumps(gan: GANPair, bank: str = "", iteration: int = 0, seed: int = 0) -> bytes:
    layout = build_filter_layout(gan.g, gan.d)
    if bank and len(bank) != len(layout):
        raise ValueError(f"bank length {len(bank)} != {len(layout)} filters")
    lines = [f"{MAGIC} {VERSION}",
             f"arch={gan.arch}",
             f"dz={gan.g.dz}",
             f"iteration={iteration}",
             f"seed={seed}",
             f"n_filters={len(layout)}"]
    for net in (gan.g, gan.d):
        for li, layer in enumerate(net.layers):
            lines.append(f"layer={net.tag}.{li} kind={layer.kind} weight={_shape_str(layer.weight.shape)} "
                         f"bias={_shape_str(layer.bias.shape)} padding={layer.padding} "
                         f"filters={layout.offset(net.tag, li)}+{layer.n_filters} span={layer.span_len}")
    lines.append(f"bank={bank}")
    lines.append("end")
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode("ascii"))
    for net in (gan.g, gan.d):
        for p in net.params():
            buf.write(p.data.astype("<f8").tobytes())
    return buf.getvalue()


def save(path: str | Path, gan: GANPair, bank: str = "", iteration: int = 0, seed: int = 0) -> None:
    Path(path).write_bytes(dumps(gan, bank, iteration, seed))


def loads(raw: bytes) -> Checkpoint:
    header_end = raw.find(b"\nend\n")
    if header_end < 0:
        raise ValueError("checkpoint header not terminated")
    header = raw[:header_end].decode("ascii").split("\n")
    if not header[0].startswith(MAGIC):
        raise ValueError("not a checkpoint file")
    version = int(header[0].split()[1])
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta: dict[str, str] = {}
    shapes: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
    for line in header[1:]:
        key, _, value = line.partition("=")
        if key == "layer":
            fields = dict(tok.split("=", 1) for tok in value.split()[1:])
            shapes.append((tuple(int(d) for d in fields["weight"].split("x")),
                           tuple(int(d) for d in fields["bias"].split("x"))))
        else:
            meta[key] = value
    gan = build_gan(meta["arch"], np.random.default_rng(0), int(meta["dz"]))
    body = memoryview(raw)[header_end + len(b"\nend\n"):]
    pos = 0
    params = gan.g.params() + gan.d.params()
    expected = [s for pair in shapes for s in pair]
    if [p.shape for p in params] != expected:
        raise ValueError("checkpoint shapes do not match the architecture")
    for p in params:
        nbytes = p.size * 8
        arr = np.frombuffer(body[pos:pos + nbytes], dtype="<f8").astype(np.float64).reshape(p.shape)
        p.data = arr.copy()
        pos += nbytes
    if pos != len(body):
        raise ValueError("trailing bytes in checkpoint")
    return Checkpoint(gan, meta.get("bank", ""), int(meta["iteration"]), int(meta["seed"]))


def load(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())

