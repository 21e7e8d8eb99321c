"""Parameter auto-encoder with a defect-mark head.

Client model parameters (one flat d-vector each) are squeezed through a
two-layer encoder into an E-dim embedding. Two consumers hang off that
embedding: a bank of parallel single-layer decoder heads, one per client
model layer, whose concatenated outputs reconstruct the original vector;
and a two-layer quality head predicting the model's defect mark. Training
descends the joint loss lam1*reconstruction + lam2*mark_error. After
training the network is frozen; inference is pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .defects import QualityMark
from .nets import (
    AdamState,
    FlatParams,
    LayerSpec,
    backward,
    clip_grad_norm,
    forward_array,
    init_params,
    load_sections,
    manifest_dim,
    save_sections,
)


@dataclass
class QualityNet:
    """Encoder, per-layer decoder heads, and the mark-prediction head."""

    encoder: FlatParams
    decoder_heads: list
    quality_head: FlatParams
    client_manifest: tuple

    def __post_init__(self):
        d = manifest_dim(self.client_manifest)
        if self.encoder.manifest[0].in_dim != d:
            raise ValueError(
                f"encoder expects {self.encoder.manifest[0].in_dim}-dim input, "
                f"client models have d={d}"
            )
        if len(self.decoder_heads) != len(self.client_manifest):
            raise ValueError("one decoder head per client layer required")
        covered = sum(h.manifest[-1].out_dim for h in self.decoder_heads)
        if covered != d:
            raise ValueError(
                f"decoder heads cover {covered} of {d} parameters"
            )

    @property
    def embed_dim(self) -> int:
        return self.encoder.manifest[-1].out_dim


def init_quality_net(client_manifest, seed: int, embed_dim: int = 64,
                     enc_hidden: int = 256, quality_hidden: int = 32,
                     ) -> QualityNet:
    d = manifest_dim(client_manifest)
    encoder = init_params(
        (LayerSpec(d, enc_hidden, "relu"),
         LayerSpec(enc_hidden, embed_dim, "identity")),
        seed=seed)
    heads = [
        init_params((LayerSpec(embed_dim, spec.size, "identity"),),
                    seed=seed + 1 + k)
        for k, spec in enumerate(client_manifest)
    ]
    quality = init_params(
        (LayerSpec(embed_dim, quality_hidden, "relu"),
         LayerSpec(quality_hidden, 1, "identity")),
        seed=seed + 1 + len(heads))
    return QualityNet(encoder, heads, quality, tuple(client_manifest))


def encode(qnet: QualityNet, params: FlatParams) -> np.ndarray:
    """E-dim embedding of one client model."""
    if params.d != qnet.encoder.manifest[0].in_dim:
        raise ValueError(
            f"cannot encode d={params.d} into an encoder built for "
            f"{qnet.encoder.manifest[0].in_dim}"
        )
    return forward_array(qnet.encoder, params.values[None, :])[0]


def encode_batch(qnet: QualityNet, params_list) -> np.ndarray:
    stacked = np.stack([p.values for p in params_list])
    return forward_array(qnet.encoder, stacked)


def decode(qnet: QualityNet, embedding: np.ndarray) -> FlatParams:
    """Reconstructed client model; head k fills layer k's slice."""
    e = np.asarray(embedding, dtype=np.float64)[None, :]
    pieces = [forward_array(head, e)[0] for head in qnet.decoder_heads]
    return FlatParams(np.concatenate(pieces), qnet.client_manifest)


def quality_score(qnet: QualityNet, embedding: np.ndarray) -> float:
    e = np.asarray(embedding, dtype=np.float64)[None, :]
    return float(forward_array(qnet.quality_head, e)[0, 0])


def score_params(qnet: QualityNet, params_list) -> np.ndarray:
    """Quality scores for a batch of client models in one pass."""
    emb = encode_batch(qnet, params_list)
    return forward_array(qnet.quality_head, emb)[:, 0]


def _mark_values(marks) -> np.ndarray:
    return np.asarray(
        [m.value if isinstance(m, QualityMark) else float(m) for m in marks])


def joint_losses(qnet: QualityNet, params_list, marks) -> tuple[float, float]:
    """(reconstruction loss l1, mark-prediction loss l2).

    l1 averages each model's mean squared reconstruction error over the
    batch; l2 is the mean squared error of predicted vs true marks.
    """
    if len(params_list) != len(marks):
        raise ValueError(
            f"{len(params_list)} models vs {len(marks)} marks")
    if not params_list:
        raise ValueError("empty model batch")
    targets = np.stack([p.values for p in params_list])
    emb = encode_batch(qnet, params_list)
    recon = np.concatenate(
        [forward_array(head, emb) for head in qnet.decoder_heads], axis=1)
    l1 = float(((recon - targets) ** 2).mean(axis=1).mean())
    pred = forward_array(qnet.quality_head, emb)[:, 0]
    l2 = float(((pred - _mark_values(marks)) ** 2).mean())
    return l1, l2


def normalize_scores(scores) -> np.ndarray:
    """Min-max normalize a score batch into [0,1]; constant input -> 0.5."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("empty score batch")
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.full(scores.size, 0.5)
    return (scores - lo) / (hi - lo)


def _joint_grads(qnet: QualityNet, targets: np.ndarray, marks: np.ndarray,
                 lam1: float, lam2: float):
    """Loss value plus flat gradients for every sub-network."""
    b, d = targets.shape
    emb, enc_trace = forward_array(qnet.encoder, targets, want_trace=True)

    head_traces = []
    recon_cols = []
    for head in qnet.decoder_heads:
        out, trace = forward_array(head, emb, want_trace=True)
        head_traces.append(trace)
        recon_cols.append(out)
    recon = np.concatenate(recon_cols, axis=1)
    pred, q_trace = forward_array(qnet.quality_head, emb, want_trace=True)
    pred = pred[:, 0]

    l1 = float(((recon - targets) ** 2).mean(axis=1).mean())
    l2 = float(((pred - marks) ** 2).mean())
    loss = lam1 * l1 + lam2 * l2

    d_emb = np.zeros_like(emb)
    d_recon = lam1 * 2.0 * (recon - targets) / (d * b)
    head_grads = []
    col = 0
    for head, trace in zip(qnet.decoder_heads, head_traces):
        width = head.manifest[-1].out_dim
        g, d_in = backward(head, trace, d_recon[:, col:col + width])
        head_grads.append(g)
        d_emb += d_in
        col += width
    d_pred = (lam2 * 2.0 * (pred - marks) / b)[:, None]
    q_grad, d_in = backward(qnet.quality_head, q_trace, d_pred)
    d_emb += d_in
    enc_grad, _ = backward(qnet.encoder, enc_trace, d_emb)
    return loss, l1, l2, enc_grad, head_grads, q_grad


def train_quality_net(qnet: QualityNet, corpus, epochs: int, lr: float,
                      lam1: float = 0.5, lam2: float = 0.5,
                      batch_size: int = 32, seed: int = 0,
                      grad_clip: float = 5.0):
    """Joint gradient descent on lam1*l1 + lam2*l2 over a labelled corpus.

    corpus is either (params_list, marks) or a callable epoch -> that pair,
    letting callers refresh the corpus between epochs. Returns the trained
    net and a per-step history of (step, l1, l2, joint). Non-finite loss
    aborts with the offending step index. With lam2=0 the quality head
    receives an exactly-zero gradient and its parameters never move.
    """
    if lam1 < 0 or lam2 < 0:
        raise ValueError("loss weights must be >= 0")
    opt_enc = AdamState(qnet.encoder.d, lr=lr)
    opt_heads = [AdamState(h.d, lr=lr) for h in qnet.decoder_heads]
    opt_q = AdamState(qnet.quality_head.d, lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    step = 0
    for epoch in range(epochs):
        batch = corpus(epoch) if callable(corpus) else corpus
        params_list, marks = batch
        targets = np.stack([p.values for p in params_list])
        mark_vals = _mark_values(marks)
        order = rng.permutation(len(params_list))
        for start in range(0, len(order), batch_size):
            rows = order[start:start + batch_size]
            loss, l1, l2, g_enc, g_heads, g_q = _joint_grads(
                qnet, targets[rows], mark_vals[rows], lam1, lam2)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"joint loss became non-finite at step {step}")
            qnet.encoder = FlatParams(
                opt_enc.step(qnet.encoder.values,
                             clip_grad_norm(g_enc, grad_clip)),
                qnet.encoder.manifest)
            qnet.decoder_heads = [
                FlatParams(opt.step(h.values, clip_grad_norm(g, grad_clip)),
                           h.manifest)
                for h, opt, g in zip(qnet.decoder_heads, opt_heads, g_heads)
            ]
            qnet.quality_head = FlatParams(
                opt_q.step(qnet.quality_head.values,
                           clip_grad_norm(g_q, grad_clip)),
                qnet.quality_head.manifest)
            history.append((step, l1, l2, loss))
            step += 1
    return qnet, history


def save_quality_net(path, qnet: QualityNet, seed: int = 0) -> None:
    sections = {"encoder": qnet.encoder, "quality_head": qnet.quality_head}
    for k, head in enumerate(qnet.decoder_heads):
        sections[f"decoder_{k:02d}"] = head
    meta = {
        "kind": "quality_net",
        "client_manifest": [[s.in_dim, s.out_dim, s.activation]
                            for s in qnet.client_manifest],
    }
    save_sections(path, sections, meta=meta, seed=seed)


def load_quality_net(path) -> QualityNet:
    sections, meta = load_sections(path)
    if meta.get("kind") != "quality_net":
        raise ValueError(f"{path} is not a quality-net checkpoint")
    manifest = tuple(LayerSpec(int(i), int(o), str(a))
                     for i, o, a in meta["client_manifest"])
    heads = [sections[name] for name in sorted(sections)
             if name.startswith("decoder_")]
    return QualityNet(sections["encoder"], heads,
                      sections["quality_head"], manifest)
