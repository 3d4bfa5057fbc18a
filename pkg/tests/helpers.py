"""Shared test utilities: finite-difference gradient checking and
independent straight-line numpy re-implementations of the model equations.

The oracles deliberately use explicit loops and raw parameter arrays so
they share no code path with the package implementation.
"""

import numpy as np
import torch


def finite_difference_check(fn, params, rtol=1e-4, eps=1e-6, atol=1e-8):
    """Compare autograd gradients of scalar ``fn()`` against central
    finite differences w.r.t. every tensor in ``params``."""
    for p in params:
        p.requires_grad_(True)
    loss = fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        numeric = torch.zeros_like(p)
        flat = p.detach().reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = float(fn())
                flat[i] = orig - eps
                down = float(fn())
                flat[i] = orig
            num_flat[i] = (up - down) / (2 * eps)
        scale = max(float(g.abs().max()), float(numeric.abs().max()), atol)
        rel = float((g - numeric).abs().max()) / scale
        assert rel < rtol, f"gradient mismatch: rel err {rel:.3e} on shape {tuple(p.shape)}"


def np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_softmax(x, axis=-1):
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def np_activation(name):
    from scipy.special import erf

    return {
        "silu": lambda x: x * np_sigmoid(x),
        "gelu": lambda x: 0.5 * x * (1.0 + erf(x / np.sqrt(2.0))),
        "tanh": np.tanh,
        "relu": lambda x: np.maximum(x, 0.0),
        "identity": lambda x: x,
    }[name]


def affine(x, linear):
    """Apply an ``nn.Linear`` as raw numpy: ``x @ W.T + b``."""
    w = linear.weight.detach().numpy()
    y = x @ w.T
    if linear.bias is not None:
        y = y + linear.bias.detach().numpy()
    return y


def low_rank(x, lr):
    """Apply a LowRankAffine as raw numpy."""
    return affine(affine(x, lr.down), lr.up)


def oracle_view_normalize(tokens, offset, mlp, act):
    """Eq.-style per-token loop: mlp(Z + e) + Z."""
    t_frames, n_tokens, _ = tokens.shape
    out = np.empty_like(tokens)
    for t in range(t_frames):
        for i in range(n_tokens):
            x = tokens[t, i] + offset
            h = act(affine(x, mlp.lin1))
            out[t, i] = affine(h, mlp.lin2) + tokens[t, i]
    return out


def oracle_scale_harmonize(tokens, harmonizer, act):
    """Per frame: softmax weights from the mean token, convex stream blend."""
    t_frames, n_tokens, _ = tokens.shape
    out = np.zeros_like(tokens)
    for t in range(t_frames):
        mean_token = tokens[t].mean(axis=0)
        alpha = np_softmax(affine(mean_token, harmonizer.weight_head))
        for s, stream in enumerate(harmonizer.streams):
            for i in range(n_tokens):
                x = tokens[t, i]
                psi = x + affine(act(affine(x, stream.lin1)), stream.lin2)
                out[t, i] += alpha[s] * psi
    return out


def oracle_motion_gate(tokens, gate):
    """Frame differences, per-token motion encoding, per-channel blend."""
    t_frames, n_tokens, d = tokens.shape
    delta = np.zeros_like(tokens)
    for t in range(1, t_frames):
        delta[t] = tokens[t] - tokens[t - 1]
    motion = np.empty_like(tokens)
    for t in range(t_frames):
        for i in range(n_tokens):
            motion[t, i] = low_rank(delta[t, i], gate.motion_enc)
    out = np.empty_like(tokens)
    for t in range(t_frames):
        summary = np.concatenate([tokens[t].mean(axis=0), motion[t].mean(axis=0)])
        g = np_sigmoid(low_rank(summary, gate.gate_head))
        for i in range(n_tokens):
            out[t, i] = g * tokens[t, i] + (1.0 - g) * motion[t, i]
    return out


def oracle_gated_fuse(f, c, weight, bias):
    g = np_sigmoid(np.concatenate([f, c]) @ weight + bias)
    return g * f + (1.0 - g) * c


def oracle_attend(f, prototypes, temperature):
    scores = np.array([m @ f / temperature for m in prototypes])
    w = np_softmax(scores)
    return sum(wi * mi for wi, mi in zip(w, prototypes))


def oracle_stream(seq, scale):
    """Block means at block centers, linear interpolation, edge clamping."""
    t_frames = seq.shape[0]
    if scale == 1:
        return seq.copy()
    blocks, centers = [], []
    for start in range(0, t_frames, scale):
        members = list(range(start, min(start + scale, t_frames)))
        blocks.append(seq[members].mean(axis=0))
        centers.append(sum(members) / len(members))
    out = np.empty_like(seq)
    for pos in range(t_frames):
        if pos <= centers[0]:
            out[pos] = blocks[0]
        elif pos >= centers[-1]:
            out[pos] = blocks[-1]
        else:
            j = max(b for b in range(len(centers)) if centers[b] <= pos)
            lam = (pos - centers[j]) / (centers[j + 1] - centers[j])
            out[pos] = (1 - lam) * blocks[j] + lam * blocks[j + 1]
    return out


def oracle_temporal_pyramid(tokens, pyramid):
    """Full stream/project/fuse/inject pipeline in straight-line numpy."""
    scales = (1, 2, 4, 8)
    per_frame = tokens.mean(axis=1)
    projected = []
    for proj, s in zip(pyramid.projections, scales):
        u = oracle_stream(per_frame, s)
        projected.append(u + low_rank(u, proj))
    concat = np.concatenate(projected, axis=-1)
    fused = affine(np.tanh(affine(concat, pyramid.fuse_in)), pyramid.fuse_out)
    out = tokens + fused[:, None, :]
    descs = np.stack([p.mean(axis=0) for p in projected])
    return out, descs


def oracle_summarize(tokens, aligner):
    d = tokens.shape[-1]
    flat = tokens.reshape(-1, d)
    seeds = aligner.seeds.detach().numpy()
    raw = np.empty((seeds.shape[0], d))
    for k in range(seeds.shape[0]):
        scores = flat @ seeds[k] / np.sqrt(d)
        w = np_softmax(scores)
        raw[k] = w @ flat
    q = low_rank(raw, aligner.q_proj)
    key = low_rank(raw, aligner.k_proj)
    val = low_rank(raw, aligner.v_proj)
    attn = np_softmax(q @ key.T / np.sqrt(d), axis=-1)
    return raw + low_rank(attn @ val, aligner.o_proj)


def oracle_exchange(summaries, views, aligner):
    d = summaries.shape[-1]
    present = sorted(set(views))
    protos = {
        v: np.mean([summaries[i] for i in range(len(views)) if views[i] == v], axis=0)
        for v in present
    }
    contexts = []
    for b, v in enumerate(views):
        others = [protos[w] for w in present if w != v]
        if not others:
            contexts.append(np.zeros_like(summaries[b]))
            continue
        keys_raw = np.concatenate(others, axis=0)
        q = low_rank(summaries[b], aligner.cross_q)
        k = low_rank(keys_raw, aligner.cross_k)
        attn = np_softmax(q @ k.T / np.sqrt(d), axis=-1)
        contexts.append(attn @ keys_raw)
    return np.stack(contexts)


def oracle_diffuse(tokens, context, aligner):
    pooled = context.mean(axis=0)
    update = np_sigmoid(low_rank(pooled, aligner.diffuse_gate)) * low_rank(
        pooled, aligner.diffuse_proj
    )
    return tokens + update[None, None, :]


def oracle_cons_loss(features, ids, views, tau):
    """Ordered view pairs, same-identity pairs, -log sigmoid(cos/tau)."""
    total = 0.0
    present = sorted(set(views))
    for v1 in present:
        for v2 in present:
            if v1 == v2:
                continue
            terms = []
            for i in range(len(ids)):
                for j in range(len(ids)):
                    if views[i] == v1 and views[j] == v2 and ids[i] == ids[j]:
                        cos = features[i] @ features[j] / (
                            np.linalg.norm(features[i]) * np.linalg.norm(features[j])
                        )
                        terms.append(np.logaddexp(0.0, -cos / tau))
            if terms:
                total += float(np.mean(terms))
    return total


def oracle_align_loss(features, ids, views, projector):
    total = 0.0
    unique = sorted(set(ids))
    for pid in unique:
        rows = [i for i in range(len(ids)) if ids[i] == pid]
        id_views = sorted({views[i] for i in rows})
        view_feats = np.stack([
            np.mean([features[i] for i in rows if views[i] == v], axis=0)
            for v in id_views
        ])
        mean = view_feats.mean(axis=0)
        anchor = mean + low_rank(mean, projector.proj)
        total += float(((anchor - view_feats) ** 2).sum())
    return total / len(unique)


def oracle_triplet(features, ids, margin):
    """Brute force over all anchor/positive/negative with hard mining."""
    n = len(ids)
    dist = np.sqrt(
        np.maximum(
            ((features[:, None, :] - features[None, :, :]) ** 2).sum(-1), 0.0
        )
    )
    losses = []
    for a in range(n):
        pos = [dist[a, j] for j in range(n) if j != a and ids[j] == ids[a]]
        neg = [dist[a, j] for j in range(n) if ids[j] != ids[a]]
        if not pos or not neg:
            continue
        losses.append(max(0.0, max(pos) - min(neg) + margin))
    return float(np.mean(losses)) if losses else 0.0


def oracle_v2m(descriptors, contexts, tau):
    """Brute-force softmax enumeration of the symmetric contrastive loss."""
    d_n = descriptors / np.linalg.norm(descriptors, axis=1, keepdims=True)
    c_n = contexts / np.linalg.norm(contexts, axis=1, keepdims=True)
    logits = d_n @ c_n.T / tau
    n = logits.shape[0]
    forward = np.mean([
        -np.log(np.exp(logits[i, i]) / np.exp(logits[i]).sum()) for i in range(n)
    ])
    backward = np.mean([
        -np.log(np.exp(logits[i, i]) / np.exp(logits[:, i]).sum()) for i in range(n)
    ])
    return 0.5 * (forward + backward)


def oracle_total_stage2(components, w):
    return (
        w.v2m * components["v2m"]
        + w.triplet * components["triplet"]
        + w.ce * components["ce"]
        + w.center * components["center"]
        + w.temporal * components["temporal"]
        + w.multiview * components["multiview"]
    )


def oracle_cmc_map(dist, q_ids, g_ids, q_views, g_views, topk=(1, 5, 10)):
    """Brute-force AP/CMC with explicit rank loops."""
    cmc = {k: 0 for k in topk}
    aps = []
    skipped = 0
    for i in range(len(q_ids)):
        entries = [
            (dist[i, j], g_ids[j]) for j in range(len(g_ids))
            if g_views[j] != q_views[i]
        ]
        entries.sort(key=lambda e: e[0])
        flags = [gid == q_ids[i] for _, gid in entries]
        if not any(flags):
            skipped += 1
            continue
        first = flags.index(True)
        for k in topk:
            if first < k:
                cmc[k] += 1
        hits, precisions = 0, []
        for rank, flag in enumerate(flags, start=1):
            if flag:
                hits += 1
                precisions.append(hits / rank)
        aps.append(sum(precisions) / len(precisions))
    n = len(q_ids) - skipped
    return {k: cmc[k] / n for k in topk}, sum(aps) / len(aps), skipped


def oracle_k_reciprocal(dist, q_feats, g_feats, k1, k2, lam):
    """Loop-based reference of the published k-reciprocal re-ranking."""
    q, g = dist.shape
    n = q + g
    feats = np.concatenate([q_feats, g_feats], axis=0)
    all_dist = np.clip(1.0 - feats @ feats.T, 0.0, None)
    rank = np.argsort(all_dist, axis=1, kind="stable")

    def reciprocal(i, k):
        forward = list(rank[i, : k + 1])
        result = []
        for j in forward:
            if i in list(rank[j, : k + 1]):
                result.append(j)
        return result

    v = np.zeros((n, n))
    for i in range(n):
        rset = reciprocal(i, k1)
        expanded = list(rset)
        for j in rset:
            cand = reciprocal(j, int(round(k1 / 2)))
            common = [c for c in cand if c in rset]
            if len(common) > (2.0 / 3.0) * len(cand):
                expanded.extend(cand)
        expanded = sorted(set(expanded))
        weights = np.array([np.exp(-all_dist[i, j]) for j in expanded])
        weights = weights / weights.sum()
        for j, wj in zip(expanded, weights):
            v[i, j] = wj
    if k2 > 1:
        v_new = np.zeros_like(v)
        for i in range(n):
            neighbors = rank[i, :k2]
            v_new[i] = np.mean([v[j] for j in neighbors], axis=0)
        v = v_new
    out = np.zeros((q, g))
    for i in range(q):
        for j in range(g):
            mn = np.minimum(v[i], v[q + j]).sum()
            mx = np.maximum(v[i], v[q + j]).sum()
            jac = 1.0 - mn / max(mx, 1e-12)
            out[i, j] = lam * dist[i, j] + (1.0 - lam) * jac
    return out
