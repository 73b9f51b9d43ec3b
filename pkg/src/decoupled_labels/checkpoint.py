"""Checkpoints: a text manifest plus one flat little-endian float64 blob.

Layout of a checkpoint directory::

    manifest.txt   key = value header lines, then one
                   ``array <name> <offset> <dim0>x<dim1>...`` line per array
    arrays.bin     all arrays back to back, row-major
    config.cfg     the experiment configuration
    vocab.tsv      the predicate vocabulary

The correlation matrix is stored as array ``M`` with ``n_p`` in the header.
"""
from pathlib import Path

import numpy as np

from .config import format_config, load_config
from .labels import load_vocabulary, save_vocabulary

FORMAT = "decoupled-labels-checkpoint-1"


def save_checkpoint(path, arrays, header, cfg, vocab):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"format = {FORMAT}"]
    lines += [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in header.items()]
    offset = 0
    chunks = []
    for name in arrays:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        if any(c.isspace() for c in name):
            raise ValueError(f"array name {name!r} contains whitespace")
        shape = "x".join(str(s) for s in a.shape) or "scalar"
        lines.append(f"array {name} {offset} {shape}")
        chunks.append(a.tobytes())
        offset += a.size
    (path / "arrays.bin").write_bytes(b"".join(chunks))
    (path / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (path / "config.cfg").write_text(format_config(cfg), encoding="utf-8")
    save_vocabulary(vocab, path / "vocab.tsv")


def load_checkpoint(path):
    """Return ``(arrays, header, cfg, vocab)``."""
    path = Path(path)
    blob = np.frombuffer((path / "arrays.bin").read_bytes(), dtype="<f8")
    arrays, header = {}, {}
    for lineno, line in enumerate((path / "manifest.txt").read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("array "):
            _, name, offset, shape = line.split()
            dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
            n = int(np.prod(dims)) if dims else 1
            start = int(offset)
            if start + n > blob.size:
                raise ValueError(f"{path}/manifest.txt:{lineno}: array {name} runs past the end of arrays.bin")
            arrays[name] = blob[start:start + n].reshape(dims).astype(np.float64)
        else:
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
    if header.get("format") != FORMAT:
        raise ValueError(f"{path}: not a checkpoint of format {FORMAT}")
    return arrays, header, load_config(path / "config.cfg"), load_vocabulary(path / "vocab.tsv")
