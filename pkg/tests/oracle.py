"""Plain-numpy reference forward pass, written separately from cgnn.model.

Handles undirected-encoding graphs with mean aggregation and no dropout. It
reads weights by parameter name and works on 1-D vectors, one sequence at a
time, so it shares no code path with the batched autodiff implementation.
"""

import numpy as np


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def lstm(P, prefix, x, h, c):
    W, b = P[prefix + ".lstm.W"], P[prefix + ".lstm.b"][0]
    n = h.size
    z = np.concatenate([x, h]) @ W + b
    i, f, g, o = sigmoid(z[:n]), sigmoid(z[n : 2 * n]), np.tanh(z[2 * n : 3 * n]), sigmoid(z[3 * n :])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


def encoder(P, prefix, ctx, msg=None):
    pre = ctx @ P[prefix + ".enc.ctx_W"] + P[prefix + ".enc.b1"][0]
    if msg is not None:
        pre = pre + msg @ P[prefix + ".enc.msg_W"]
    return np.tanh(pre) @ P[prefix + ".enc.W2"] + P[prefix + ".enc.b2"][0]


def reference_forward(P, spec, frames):
    """Per-frame emissions ``[{concept: probs}]`` for one sequence ``(T, D)``."""
    dn, de, du = spec.nodes[0].state_dim, (spec.hyperedges[0].state_dim if spec.hyperedges else 0), spec.global_dim
    hv = {n.name: np.zeros(dn) for n in spec.nodes}
    cv = {n.name: np.zeros(dn) for n in spec.nodes}
    he = {e.name: np.zeros(de) for e in spec.hyperedges}
    ce = {e.name: np.zeros(de) for e in spec.hyperedges}
    hu, cu = P["global.h0"][0].copy(), np.zeros(du)
    out = []
    for x in frames:
        emb = np.tanh(x @ P["frame.W"] + P["frame.b"][0])
        u = hu
        # edges read node states from the previous frame
        for e in spec.hyperedges:
            vbar = np.mean([hv[m] for m, _ in e.members], axis=0)
            xin = encoder(P, "edge." + e.name, np.concatenate([he[e.name], u, emb]), vbar)
            he[e.name], ce[e.name] = lstm(P, "edge." + e.name, xin, he[e.name], ce[e.name])
        new_hv = {}
        for n in spec.nodes:
            incident = [e.name for e in spec.hyperedges if n.name in [m for m, _ in e.members]]
            ebar = np.mean([he[k] for k in incident], axis=0) if incident else None
            xin = encoder(P, "node." + n.name, np.concatenate([hv[n.name], u, emb]), ebar)
            new_hv[n.name], cv[n.name] = lstm(P, "node." + n.name, xin, hv[n.name], cv[n.name])
        hv = new_hv
        gin = encoder(P, "global", np.concatenate([np.mean(list(hv.values()), axis=0), emb]))
        hu, cu = lstm(P, "global", gin, hu, cu)
        ems = {}
        for n in spec.nodes:
            if n.emission is None:
                continue
            z = hv[n.name] @ P[f"node.{n.name}.head.W"] + P[f"node.{n.name}.head.b"][0]
            if n.emission.kind == "categorical":
                ems[n.name] = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
            else:
                ems[n.name] = sigmoid(z)
        out.append(ems)
    return out


def fixed_small_weights(model, scale=0.3):
    """Deterministic, hand-reproducible weights: ``scale * sin(k + 1)`` over a running index."""
    k = 0
    for name in sorted(model.params):
        arr = model.params[name].data
        arr[...] = scale * np.sin(np.arange(k, k + arr.size) + 1.0).reshape(arr.shape)
        k += arr.size
