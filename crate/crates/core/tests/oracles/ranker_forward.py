"""Straight-line numpy evaluation of the ranker on the tiny seed-0 fixture.

Reads tests/fixtures/tiny_seed0.ckpt, builds the same smooth inputs as the
Rust unit test and prints the 3x4 logit matrix with 17 significant digits.
Written directly from the architecture description, without looking at the
packed Rust implementation.
"""

import math
import struct
import sys
from pathlib import Path

import numpy as np


def read_ckpt(path):
    data = Path(path).read_bytes()
    assert data[:10] == b"NIAB-CKPT1"
    off = 10
    cfg = struct.unpack_from("<7I", data, off)
    off += 28
    scoring = data[off]
    off += 1
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + n].decode()
        off += n
        rank = data[off]
        off += 1
        dims = struct.unpack_from("<%dI" % rank, data, off)
        off += 4 * rank
        size = int(np.prod(dims))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).astype(np.float64)
        off += 4 * size
        tensors[name] = arr.reshape(dims)
    assert off == len(data)
    keys = ["input_dim", "d_model", "n_layers", "n_heads", "mlp_hidden", "max_steps", "max_candidates"]
    return dict(zip(keys, cfg), scoring=scoring), tensors


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mha(xq, xkv, t, prefix, heads):
    q = xq @ t[prefix + "q.w"] + t[prefix + "q.b"]
    k = xkv @ t[prefix + "k.w"] + t[prefix + "k.b"]
    v = xkv @ t[prefix + "v.w"] + t[prefix + "v.b"]
    dk = q.shape[1] // heads
    out = np.zeros_like(q)
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        p = softmax(q[:, sl] @ k[:, sl].T / math.sqrt(dk))
        out[:, sl] = p @ v[:, sl]
    return out @ t[prefix + "o.w"] + t[prefix + "o.b"]


def main():
    root = Path(__file__).resolve().parents[1]
    cfg, t = read_ckpt(root / "fixtures" / "tiny_seed0.ckpt")
    d, dm, heads = cfg["input_dim"], cfg["d_model"], cfg["n_heads"]
    S, C = 3, 4
    H = np.array([[math.sin(0.3 * i + 0.7 * j) for j in range(d)] for i in range(S)])
    A = np.array([[math.cos(0.5 * i - 0.2 * j) for j in range(d)] for i in range(C)])

    pe = np.zeros((S, dm))
    for pos in range(S):
        for j in range(dm):
            ang = pos / 10000 ** (2 * (j // 2) / dm)
            pe[pos, j] = math.sin(ang) if j % 2 == 0 else math.cos(ang)

    x = (H @ t["proj_h.w"] + t["proj_h.b"]) * math.sqrt(dm) + pe
    a = (A @ t["proj_a.w"] + t["proj_a.b"]) * math.sqrt(dm)
    for i in range(cfg["n_layers"]):
        p = f"enc{i}."
        y1 = layer_norm(x + mha(x, x, t, p + "attn_", heads), t[p + "ln1.gain"], t[p + "ln1.bias"])
        ff = gelu(y1 @ t[p + "ff1.w"] + t[p + "ff1.b"]) @ t[p + "ff2.w"] + t[p + "ff2.b"]
        x = layer_norm(y1 + ff, t[p + "ln2.gain"], t[p + "ln2.bias"])
    a_att = mha(a, x, t, "cross_", heads)

    w1 = np.concatenate([t["mlp.w1_step"], t["mlp.w1_cand"]], axis=0)
    logits = np.zeros((S, C))
    for s in range(S):
        for c in range(C):
            pair = np.concatenate([x[s], a_att[c]])
            logits[s, c] = gelu(pair @ w1 + t["mlp.b1"]) @ t["mlp.w2"] + t["mlp.b2"][0]
    for row in logits:
        sys.stdout.write("[" + ", ".join("%.17g" % v for v in row) + "],\n")


if __name__ == "__main__":
    main()
