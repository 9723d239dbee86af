"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from pfedmoe import data, fed, models, nn


def conv_oracle(x, w, b, stride, padding):
    """Direct six-loop convolution (cross-correlation), no vectorisation."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for s in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for u in range(k):
                            for v in range(k):
                                acc += w[o, c, u, v] * xp[s, c, i * stride + u, j * stride + v]
                    out[s, o, i, j] = acc
    return out


def pool_oracle(x, size, stride):
    n, c, h, w = x.shape
    ho, wo = (h - size) // stride + 1, (w - size) // stride + 1
    out = np.empty((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, :, i, j] = x[:, :, i * stride:i * stride + size, j * stride:j * stride + size].max(axis=(2, 3))
    return out


def tiny_moe(dims=(3, 16, 16), num_classes=4, m=8, seed=0, local="cnn5") -> models.MoeModel:
    g = models.build_extractor("cnn5", dims, num_classes, seed=seed)
    split = models.split_extractor_header(models.build_cnn(local, dims, num_classes, seed=seed + 1))
    gate = models.build_gating(dims, m, seed=seed + 2)
    return models.MoeModel(g, split.extractor, gate, split.header)


def toy_shards(num_clients=4, num_classes=4, spc=40, seed=0, size=16, k=2):
    ds = data.gen_synthetic(num_classes, (3, size, size), spc, 8.0, seed=seed)
    spec = data.PartitionSpec(data.Pathological(k, 0.5), num_clients, seed)
    return ds, data.make_shards(ds, spec)


def toy_federation(algorithm="pfedmoe", num_clients=4, rounds=3, seed=0, **kw) -> fed.Federation:
    ds, shards = toy_shards(num_clients, seed=seed)
    opts = dict(num_clients=num_clients, rounds=rounds, batch_size=16, lr_theta=0.1, lr_phi=0.1,
                algorithm=algorithm, assignment="mod5" if algorithm != "fedavg" else "cnn5",
                gate_hidden=8, seed=seed)
    opts.update(kw)
    return fed.Federation(fed.FederationConfig(**opts), shards, ds.dims, ds.num_classes)


def max_abs_diff(a: dict, b: dict) -> float:
    assert a.keys() == b.keys()
    return max(float(np.max(np.abs(a[k] - b[k]))) for k in a) if a else 0.0


def probs_net(layers, input_shape) -> nn.Network:
    return nn.Network(layers, input_shape, name="probe")
