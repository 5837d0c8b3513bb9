"""Compact decoder-only autoregressive next-event model.

Pure numpy implementation with analytic backprop: pre-attention layer norm,
learned absolute positions, tied input/output embeddings, AdamW with linear
warmup then cosine decay to 10% of peak, global-norm gradient clipping, and
optional low-rank adapters on attention and feed-forward weights.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .events import PAD_ID
from .serial import load_bundle, save_bundle

_LN_EPS = 1e-5


class SpecialistError(Exception):
    pass


@dataclass
class SpecialistConfig:
    vocab_size: int
    layers: int = 2
    d_model: int = 64
    heads: int = 2
    mlp_mult: int = 4
    dropout: float = 0.1
    max_positions: int = 512

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise SpecialistError("d_model must be divisible by heads")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "layers": self.layers,
            "d_model": self.d_model,
            "heads": self.heads,
            "mlp_mult": self.mlp_mult,
            "dropout": self.dropout,
            "max_positions": self.max_positions,
        }


# Paper-scale configuration kept as a named preset; desk-scale is the default.
def paper_scale_config(vocab_size: int) -> SpecialistConfig:
    return SpecialistConfig(vocab_size=vocab_size, layers=6, d_model=256, heads=4)


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    lr_floor_frac: float = 0.1
    grad_clip: float = 1.0
    batch_size: int = 16
    epochs: int = 5
    seed: int = 0


def lr_schedule(step: int, total_steps: int, peak_lr: float,
                warmup_frac: float = 0.05, floor_frac: float = 0.1) -> float:
    """Linear warmup over warmup_frac of steps, cosine decay to floor_frac of
    the peak at the final step."""
    warmup = max(1, round(warmup_frac * total_steps))
    if step < warmup:
        return peak_lr * (step + 1) / warmup
    last = max(total_steps - 1, warmup)
    u = (step - warmup) / max(last - warmup, 1)
    u = min(u, 1.0)
    return peak_lr * (floor_frac + (1.0 - floor_frac) * 0.5 * (1.0 + math.cos(math.pi * u)))


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )
    return dx, dg, db


class SpecialistModel:
    """Causal next-event model; logits at position t depend only on ids <= t."""

    ADAPTABLE = ("wq", "wk", "wv", "wo", "w1", "w2")

    def __init__(self, config: SpecialistConfig, seed: int = 0, domain: str | None = None):
        self.config = config
        self.domain = domain
        self.temperature = 1.0
        self.adapters: dict[str, tuple] = {}
        self.lora_alpha = 1.0
        self.lora_rank = 0
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EC1]))
        c = config
        d, v, p = c.d_model, c.vocab_size, c.max_positions

        def w(*shape):
            return rng.normal(0.0, 0.02, size=shape)

        params = {"tok_emb": w(v, d), "pos_emb": w(p, d),
                  "lnf_g": np.ones(d), "lnf_b": np.zeros(d)}
        for i in range(c.layers):
            params[f"l{i}.ln1_g"] = np.ones(d)
            params[f"l{i}.ln1_b"] = np.zeros(d)
            for nm in ("wq", "wk", "wv", "wo"):
                params[f"l{i}.{nm}"] = w(d, d)
                params[f"l{i}.b{nm[1]}"] = np.zeros(d)
            params[f"l{i}.ln2_g"] = np.ones(d)
            params[f"l{i}.ln2_b"] = np.zeros(d)
            params[f"l{i}.w1"] = w(d, c.mlp_mult * d)
            params[f"l{i}.b1"] = np.zeros(c.mlp_mult * d)
            params[f"l{i}.w2"] = w(c.mlp_mult * d, d)
            params[f"l{i}.b2"] = np.zeros(d)
        self.params = params

    # --- LoRA -------------------------------------------------------------

    def _adapted(self, name):
        w = self.params[name]
        if name in self.adapters:
            a, b = self.adapters[name]
            return w + (self.lora_alpha / self.lora_rank) * (a @ b)
        return w

    def attach_lora(self, rank: int, alpha: float = 1.0, seed: int = 0) -> None:
        """Zero-initialized adapters on attention and feed-forward weights;
        outputs are unchanged at attach time (B starts at zero)."""
        if rank > self.config.d_model:
            raise SpecialistError(f"LoRA rank {rank} exceeds d_model {self.config.d_model}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x10AA]))
        self.lora_rank = rank
        self.lora_alpha = alpha
        self.adapters = {}
        for i in range(self.config.layers):
            for nm in self.ADAPTABLE:
                key = f"l{i}.{nm}"
                din, dout = self.params[key].shape
                self.adapters[key] = (rng.normal(0.0, 0.01, size=(din, rank)),
                                      np.zeros((rank, dout)))

    def merge_lora(self) -> None:
        if not self.adapters:
            raise SpecialistError("no adapters to merge")
        for key, (a, b) in self.adapters.items():
            self.params[key] = self.params[key] + (self.lora_alpha / self.lora_rank) * (a @ b)
        self.adapters = {}
        self.lora_rank = 0

    def lora_parameter_count(self) -> int:
        return sum(a.size + b.size for a, b in self.adapters.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    # --- forward / backward -----------------------------------------------

    def forward(self, ids, train: bool = False, rng=None):
        """Return (logits, cache). ids: (B, T) int array."""
        ids = np.atleast_2d(np.asarray(ids))
        bsz, t = ids.shape
        c = self.config
        if t > c.max_positions:
            raise SpecialistError(f"sequence length {t} exceeds {c.max_positions}")
        if ids.max() >= c.vocab_size or ids.min() < 0:
            raise SpecialistError("token id outside vocabulary")
        p = self.params
        drop_p = c.dropout if train else 0.0
        if drop_p > 0 and rng is None:
            rng = np.random.default_rng(0)

        def dropout(x):
            if drop_p <= 0:
                return x, None
            mask = (rng.random(x.shape) >= drop_p) / (1.0 - drop_p)
            return x * mask, mask

        x = p["tok_emb"][ids] + p["pos_emb"][:t]
        mask = np.triu(np.full((t, t), -1e9), k=1)
        h = c.heads
        dh = c.d_model // h
        scale = 1.0 / math.sqrt(dh)
        layer_caches = []
        for i in range(c.layers):
            pre = f"l{i}."
            hn, ln1c = _layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            wq, wk, wv, wo = (self._adapted(pre + nm) for nm in ("wq", "wk", "wv", "wo"))
            q = hn @ wq + p[pre + "bq"]
            k = hn @ wk + p[pre + "bk"]
            v = hn @ wv + p[pre + "bv"]

            def split(z):
                return z.reshape(bsz, t, h, dh).transpose(0, 2, 1, 3)

            qh, kh, vh = split(q), split(k), split(v)
            scores = qh @ kh.transpose(0, 1, 3, 2) * scale + mask
            scores -= scores.max(-1, keepdims=True)
            ex = np.exp(scores)
            attn = ex / ex.sum(-1, keepdims=True)
            attn_d, attn_mask = dropout(attn)
            ctx = (attn_d @ vh).transpose(0, 2, 1, 3).reshape(bsz, t, c.d_model)
            attn_out = ctx @ wo + p[pre + "bo"]
            attn_out_d, res1_mask = dropout(attn_out)
            x1 = x + attn_out_d

            h2, ln2c = _layer_norm(x1, p[pre + "ln2_g"], p[pre + "ln2_b"])
            w1, w2 = self._adapted(pre + "w1"), self._adapted(pre + "w2")
            pre_act = h2 @ w1 + p[pre + "b1"]
            act = _gelu(pre_act)
            mlp = act @ w2 + p[pre + "b2"]
            mlp_d, res2_mask = dropout(mlp)
            x = x1 + mlp_d

            layer_caches.append(
                dict(hn=hn, ln1c=ln1c, qh=qh, kh=kh, vh=vh, attn=attn, attn_d=attn_d,
                     attn_mask=attn_mask, ctx=ctx, res1_mask=res1_mask, x1=x1,
                     h2=h2, ln2c=ln2c, pre_act=pre_act, act=act, res2_mask=res2_mask)
            )
        xf, lnfc = _layer_norm(x, p["lnf_g"], p["lnf_b"])
        logits = xf @ p["tok_emb"].T
        cache = dict(ids=ids, xf=xf, lnfc=lnfc, layers=layer_caches, t=t, bsz=bsz)
        return logits, cache

    def backward(self, cache, dlogits):
        """Gradients of all parameters (and adapters, when attached)."""
        p = self.params
        c = self.config
        ids, xf = cache["ids"], cache["xf"]
        bsz, t = cache["bsz"], cache["t"]
        h, dh = c.heads, c.d_model // c.heads
        scale = 1.0 / math.sqrt(dh)
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        a_grads = {k: (np.zeros_like(a), np.zeros_like(b))
                   for k, (a, b) in self.adapters.items()}

        def add_weight_grad(name, dw):
            if name in self.adapters:
                a, b = self.adapters[name]
                s = self.lora_alpha / self.lora_rank
                da, db = a_grads[name]
                da += s * (dw @ b.T)
                db += s * (a.T @ dw)
                a_grads[name] = (da, db)
            grads[name] += dw

        grads["tok_emb"] += dlogits.reshape(-1, c.vocab_size).T @ xf.reshape(-1, c.d_model)
        dxf = dlogits @ p["tok_emb"]
        dx, dg, db = _layer_norm_backward(dxf, p["lnf_g"], cache["lnfc"])
        grads["lnf_g"] += dg
        grads["lnf_b"] += db

        for i in reversed(range(c.layers)):
            pre = f"l{i}."
            lc = cache["layers"][i]
            # MLP branch
            dmlp = dx if lc["res2_mask"] is None else dx * lc["res2_mask"]
            act2d = lc["act"].reshape(-1, c.mlp_mult * c.d_model)
            add_weight_grad(pre + "w2", act2d.T @ dmlp.reshape(-1, c.d_model))
            grads[pre + "b2"] += dmlp.sum((0, 1))
            dact = dmlp @ self._adapted(pre + "w2").T
            dpre = dact * _gelu_grad(lc["pre_act"])
            h22d = lc["h2"].reshape(-1, c.d_model)
            add_weight_grad(pre + "w1", h22d.T @ dpre.reshape(-1, c.mlp_mult * c.d_model))
            grads[pre + "b1"] += dpre.sum((0, 1))
            dh2 = dpre @ self._adapted(pre + "w1").T
            dx1, dg2, db2 = _layer_norm_backward(dh2, p[pre + "ln2_g"], lc["ln2c"])
            grads[pre + "ln2_g"] += dg2
            grads[pre + "ln2_b"] += db2
            dx1 = dx1 + dx  # residual

            # attention branch
            dattn_out = dx1 if lc["res1_mask"] is None else dx1 * lc["res1_mask"]
            ctx2d = lc["ctx"].reshape(-1, c.d_model)
            add_weight_grad(pre + "wo", ctx2d.T @ dattn_out.reshape(-1, c.d_model))
            grads[pre + "bo"] += dattn_out.sum((0, 1))
            dctx = (dattn_out @ self._adapted(pre + "wo").T)
            dctx = dctx.reshape(bsz, t, h, dh).transpose(0, 2, 1, 3)
            dattn_d = dctx @ lc["vh"].transpose(0, 1, 3, 2)
            dvh = lc["attn_d"].transpose(0, 1, 3, 2) @ dctx
            dattn = dattn_d if lc["attn_mask"] is None else dattn_d * lc["attn_mask"]
            a = lc["attn"]
            dscores = a * (dattn - (dattn * a).sum(-1, keepdims=True))
            dqh = dscores @ lc["kh"] * scale
            dkh = dscores.transpose(0, 1, 3, 2) @ lc["qh"] * scale

            def merge(z):
                return z.transpose(0, 2, 1, 3).reshape(bsz, t, c.d_model)

            dq, dk, dv = merge(dqh), merge(dkh), merge(dvh)
            hn2d = lc["hn"].reshape(-1, c.d_model)
            dhn = np.zeros_like(lc["hn"])
            for nm, dz in (("wq", dq), ("wk", dk), ("wv", dv)):
                add_weight_grad(pre + nm, hn2d.T @ dz.reshape(-1, c.d_model))
                grads[pre + "b" + nm[1]] += dz.sum((0, 1))
                dhn += dz @ self._adapted(pre + nm).T
            dxa, dg1, db1 = _layer_norm_backward(dhn, p[pre + "ln1_g"], lc["ln1c"])
            grads[pre + "ln1_g"] += dg1
            grads[pre + "ln1_b"] += db1
            dx = dx1 + dxa

        grads["pos_emb"][:t] += dx.sum(0)
        np.add.at(grads["tok_emb"], ids, dx)
        return grads, a_grads

    # --- loss ---------------------------------------------------------------

    def loss_and_grads(self, ids, targets, train: bool = False, rng=None):
        logits, cache = self.forward(ids, train=train, rng=rng)
        loss, dlogits = cross_entropy(logits, targets)
        grads, a_grads = self.backward(cache, dlogits)
        return loss, grads, a_grads

    def eval_loss(self, sequences, batch_size: int = 32):
        """Token-weighted mean cross-entropy over a set of sequences."""
        total, count = 0.0, 0
        for ids, targets in iter_batches(sequences, batch_size):
            logits, _ = self.forward(ids)
            valid = targets != PAD_ID
            n = int(valid.sum())
            loss, _ = cross_entropy(logits, targets)
            total += loss * n
            count += n
        if count == 0:
            raise SpecialistError("no non-pad targets to evaluate")
        return total / count

    def suggest(self, prefix_ids, k: int = 3):
        """Top-k next tokens with temperature-scaled probabilities."""
        if k < 1:
            raise SpecialistError("k must be >= 1")
        k = min(k, self.config.vocab_size)
        logits, _ = self.forward(np.asarray(prefix_ids)[None, :])
        z = logits[0, -1] / self.temperature
        z = z - z.max()
        probs = np.exp(z) / np.exp(z).sum()
        order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))[:k]
        return [(int(i), float(probs[i])) for i in order]

    # --- persistence ----------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "kind": "specialist",
            "config": self.config.to_dict(),
            "domain": self.domain,
            "temperature": self.temperature,
            "lora_rank": self.lora_rank,
            "lora_alpha": self.lora_alpha,
        }
        meta.update(extra_meta or {})
        arrays = dict(self.params)
        for key, (a, b) in self.adapters.items():
            arrays[f"lora.{key}.A"] = a
            arrays[f"lora.{key}.B"] = b
        save_bundle(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "SpecialistModel":
        meta, arrays = load_bundle(path)
        if meta.get("kind") != "specialist":
            raise SpecialistError(f"{path}: not a specialist checkpoint")
        model = cls(SpecialistConfig(**meta["config"]), domain=meta.get("domain"))
        model.temperature = meta.get("temperature", 1.0)
        model.params = {k: v for k, v in arrays.items() if not k.startswith("lora.")}
        model.lora_rank = meta.get("lora_rank", 0)
        model.lora_alpha = meta.get("lora_alpha", 1.0)
        adapters = {}
        for k in arrays:
            if k.startswith("lora.") and k.endswith(".A"):
                key = k[len("lora."):-2]
                adapters[key] = (arrays[f"lora.{key}.A"], arrays[f"lora.{key}.B"])
        model.adapters = adapters
        return model


def cross_entropy(logits, targets):
    """Mean CE over non-pad positions; returns (loss, dlogits)."""
    targets = np.atleast_2d(np.asarray(targets))
    valid = targets != PAD_ID
    n = int(valid.sum())
    if n == 0:
        raise SpecialistError("all-pad batch")
    z = logits - logits.max(-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(-1, keepdims=True))
    logprobs = z - logsumexp
    bsz, t = targets.shape
    rows = np.repeat(np.arange(bsz), t)
    cols = np.tile(np.arange(t), bsz)
    picked = logprobs[rows, cols, targets.ravel()].reshape(bsz, t)
    loss = float(-(picked * valid).sum() / n)
    dlogits = np.exp(logprobs)
    one_hot_idx = (rows, cols, targets.ravel())
    dlogits[one_hot_idx] -= 1.0
    dlogits *= (valid / n)[..., None]
    return loss, dlogits


def pad_batch(sequences):
    """(inputs, targets) padded with PAD_ID; targets are inputs shifted by one."""
    t = max(len(s) for s in sequences) - 1
    ids = np.full((len(sequences), t), PAD_ID, dtype=np.int64)
    targets = np.full((len(sequences), t), PAD_ID, dtype=np.int64)
    for i, s in enumerate(sequences):
        s = np.asarray(s, dtype=np.int64)
        ids[i, : len(s) - 1] = s[:-1]
        targets[i, : len(s) - 1] = s[1:]
    return ids, targets


def iter_batches(sequences, batch_size, order=None):
    order = list(order) if order is not None else list(range(len(sequences)))
    for start in range(0, len(order), batch_size):
        chunk = [sequences[i] for i in order[start:start + batch_size]]
        if chunk:
            yield pad_batch(chunk)


def unigram_entropy(sequences) -> float:
    """Entropy (nats) of the target-token distribution; the trivial baseline
    a trained model must beat."""
    counts: dict[int, int] = {}
    for s in sequences:
        for tok in s[1:]:
            if tok != PAD_ID:
                counts[tok] = counts.get(tok, 0) + 1
    total = sum(counts.values())
    probs = np.array([v / total for v in counts.values()])
    return float(-(probs * np.log(probs)).sum())


class AdamW:
    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float, decay_keys: set) -> None:
        self.t += 1
        b1, b2 = self.betas
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            self.m[key] = b1 * self.m[key] + (1 - b1) * g
            self.v[key] = b2 * self.v[key] + (1 - b2) * g * g
            mhat = self.m[key] / (1 - b1 ** self.t)
            vhat = self.v[key] / (1 - b2 ** self.t)
            update = mhat / (np.sqrt(vhat) + self.eps)
            if key in decay_keys:
                update = update + self.weight_decay * params[key]
            params[key] = params[key] - lr * update


def clip_global_norm(grad_arrays, max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grad_arrays))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grad_arrays:
            g *= scale
    return total


def train(model: SpecialistModel, train_sequences, dev_sequences, cfg: TrainConfig,
          adapters_only: bool = False):
    """Train with AdamW + warmup/cosine schedule; returns (curve, best_params).

    The model is left holding the best-dev-loss parameters. With
    `adapters_only`, base weights stay frozen and only LoRA tensors move.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7417]))
    n = len(train_sequences)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    opt = AdamW(weight_decay=cfg.weight_decay)
    decay_keys = {
        k for k, v in model.params.items()
        if v.ndim >= 2 and k not in ("tok_emb", "pos_emb")
    }
    if adapters_only and not model.adapters:
        raise SpecialistError("adapters_only training requires attached adapters")

    curve = []
    best = None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        epoch_loss, n_batches = 0.0, 0
        for ids, targets in iter_batches(train_sequences, cfg.batch_size, order):
            loss, grads, a_grads = model.loss_and_grads(ids, targets, train=True, rng=rng)
            if not math.isfinite(loss):
                raise SpecialistError(f"divergence: non-finite loss at step {step}")
            lr = lr_schedule(step, total_steps, cfg.peak_lr, cfg.warmup_frac, cfg.lr_floor_frac)
            if adapters_only:
                flat = {}
                for key, (da, db) in a_grads.items():
                    flat[f"{key}.A"] = da
                    flat[f"{key}.B"] = db
                clip_global_norm(list(flat.values()), cfg.grad_clip)
                tensors = {}
                for key, (a, b) in model.adapters.items():
                    tensors[f"{key}.A"] = a
                    tensors[f"{key}.B"] = b
                opt.step(tensors, flat, lr, decay_keys=set())
                model.adapters = {
                    key: (tensors[f"{key}.A"], tensors[f"{key}.B"]) for key in model.adapters
                }
            else:
                clip_global_norm(list(grads.values()), cfg.grad_clip)
                opt.step(model.params, grads, lr, decay_keys)
            epoch_loss += loss
            n_batches += 1
            step += 1
        dev_loss = model.eval_loss(dev_sequences)
        if not math.isfinite(dev_loss):
            raise SpecialistError(f"divergence: non-finite dev loss at epoch {epoch}")
        curve.append({
            "epoch": epoch,
            "train_loss": epoch_loss / max(n_batches, 1),
            "dev_loss": dev_loss,
            "ppl": perplexity_from_loss(dev_loss),
        })
        if best is None or dev_loss < best[0]:
            best = (dev_loss, {k: v.copy() for k, v in model.params.items()},
                    {k: (a.copy(), b.copy()) for k, (a, b) in model.adapters.items()})
    model.params = best[1]
    model.adapters = best[2]
    return curve


def perplexity_from_loss(loss: float) -> float:
    return float(np.exp(loss))


def perplexity(model: SpecialistModel, sequences) -> float:
    return perplexity_from_loss(model.eval_loss(sequences))


def write_curve_csv(path, curve) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,dev_loss,ppl\n")
        for row in curve:
            fh.write(f"{row['epoch']},{row['train_loss']!r},{row['dev_loss']!r},{row['ppl']!r}\n")
