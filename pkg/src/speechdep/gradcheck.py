"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], h: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|).

    ``f`` is called as ``f(*xs)`` and must return a scalar tensor.  With
    ``max_coords`` only a random subset of coordinates per tensor is probed.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    backward(f(*xs))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
    worst = 0.0
    for t, ga in zip(xs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        ga = ga.reshape(-1)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = f(*xs).item()
                flat[i] = orig - h
                down = f(*xs).item()
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            err = abs(ga[i] - num) / max(1.0, abs(ga[i]))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# the suite behind ``speechdep gradcheck``
# ---------------------------------------------------------------------------


def _cases(rng: np.random.Generator):
    from . import tensor as T
    from .losses import attention_ce, ctc_loss_batch, downstream_loss, hybrid_loss
    from .models import (DepressionModel, EncoderConfig, ModelConfig, PretrainModel,
                         TaskKind)

    def rand(*shape, scale=1.0):
        return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    a, b = rand(3, 4), rand(3, 4)
    yield "elementwise", (lambda a, b: (T.tanh(a) * T.sigmoid(b) + T.exp(a * 0.3)
                                         + T.softplus(b) - T.relu(a) * b).sum()), [a, b]
    p = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    yield "log/power/reciprocal", lambda p: (T.log(p) + p ** 1.5 + T.reciprocal(p)).sum(), [p]
    x, w, bias = rand(2, 3, 4), rand(4, 5), rand(5)
    yield "matmul/linear", lambda x, w, bias: T.tanh(T.linear(x, w, bias)).sum(), [x, w, bias]
    bx, by = rand(2, 3, 4), rand(2, 4, 2)
    yield "batched matmul", lambda u, v: (T.matmul(u, v) ** 2).sum(), [bx, by]
    s = rand(3, 5)
    mask = rng.uniform(size=(3, 5)) > 0.3
    mask[:, 0] = True
    wts = rng.normal(size=(3, 5))
    yield "softmax/log_softmax", (lambda s: (T.softmax(s, axis=1, mask=mask) * Tensor(wts)).sum()
                                  + (T.log_softmax(s, axis=0) * Tensor(wts)).sum()), [s]
    m = rand(3, 6, 2)
    mm = np.broadcast_to((np.arange(6) < np.array([6, 3, 1])[:, None])[..., None], m.shape)
    yield "reduce_max", lambda m: (T.reduce_max(m, axis=1, mask=mm) ** 2).sum(), [m]
    g = rand(4, 3)
    yield "index/concat/stack", (lambda g: (T.concat([g[[0, 2, 2]], g[1:3]], axis=0).sum()
                                            + (T.stack([g, g * 2.0], axis=0).transpose(1, 0, 2) ** 2).sum()
                                            + T.broadcast_to(g[0].reshape(1, 3), (5, 3)).mean())), [g]
    img, ker, kb = rand(2, 2, 7, 6), rand(3, 2, 3, 2), rand(3)
    yield "conv2d", lambda i, k, c: (T.conv2d(i, k, c, stride=(2, 1), padding=(1, 1)) ** 2).sum(), [img, ker, kb]
    H = 3
    xs, h0, c0 = rand(2, 4), rand(2, H, scale=0.5), rand(2, H, scale=0.5)
    wih, whh, lb = rand(4, 4 * H, scale=0.5), rand(H, 4 * H, scale=0.5), rand(4 * H, scale=0.1)
    yield "lstm_step", (lambda xs, h0, c0, wih, whh, lb: sum(
        (t ** 2).sum() for t in T.lstm_step(xs, (h0, c0), wih, whh, lb))), [xs, h0, c0, wih, whh, lb]
    pre, w2 = rand(3, 5, 4 * H), rand(H, 4 * H, scale=0.5)
    lens = np.array([5, 2, 4])
    yield "lstm_sequence", lambda pre, w2: (T.lstm_sequence(pre, w2, lens) ** 2).sum(), [pre, w2]
    lp = rand(2, 6, 4)
    yield "ctc", (lambda lp: ctc_loss_batch(T.log_softmax(lp, axis=-1), np.array([6, 5]),
                                             [[0, 1, 1], [2, 0]])), [lp]

    enc = EncoderConfig(n_mels=8, conv_channels=(2, 3), kernel=(3, 3), stride=(2, 2), lstm_layers=2, hidden=4)
    cfg = ModelConfig(encoder=enc, alphabet="abc", decoder_hidden=4, embed_dim=3, attention_dim=4,
                      rcnn_hidden=3, rcnn_proj=4, segment_embedding=3, fusion_hidden=3)
    feats = rng.normal(size=(2, 17, 8))
    flens = np.array([17, 13])
    labels = np.array([[0, 2, 1], [1, 0, 0]])
    asr = PretrainModel(cfg, seed=1)

    def asr_loss(*_):
        clp, olen, logits, _maps = asr.asr_forward(feats, flens, labels)
        return hybrid_loss(ctc_loss_batch(clp, olen, [[0, 2, 1], [1]]),
                           attention_ce(logits, labels, np.array([3, 1])), 0.5)
    yield "encoder+attention decoder+ctc", asr_loss, list(asr.parameters().values())

    for head in ("rcnn", "pool_mlp"):
        for task, target in ((TaskKind.CLASSIFICATION, np.array([1.0, 0.0])),
                             (TaskKind.REGRESSION, np.array([12.0, 3.0]))):
            dm = DepressionModel(ModelConfig(**{**cfg.to_dict(), "encoder": enc, "head_kind": head,
                                                "task": task}), seed=2)

            def micro(*_, dm=dm, target=target, task=task):
                pred, emb = dm.segment_forward(feats, flens)
                fused = dm.fusion_forward(emb.reshape(1, 2, -1))
                return downstream_loss(pred, target, task) + downstream_loss(fused, target[:1], task)
            yield f"encoder+{head}+fusion ({task.value})", micro, list(dm.parameters().values())


def run_suite(tol: float = 1e-4, max_coords: int = 8, seed: int = 0):
    """Run every finite-difference case; returns ``[(name, max_rel_error, passed)]``."""
    rng = np.random.default_rng(seed)
    results = []
    for name, f, xs in _cases(rng):
        err = grad_check(f, xs, max_coords=max_coords, rng=rng)
        results.append((name, err, bool(err < tol)))
    return results
