"""Reference forward pass of the post-layernorm encoder, written with numpy.

Writes hand_forward.json: config, parameters in checkpoint order, a padded
batch and the expected hidden states, attention probabilities and logits.
"""
import json

import numpy as np

L, A, D, F, V, S = 2, 2, 4, 6, 7, 5
EPS = 1e-12
rng = np.random.default_rng(20240611)


def layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + EPS) * g + b


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


params = [
    ("embeddings.token", rng.normal(0, 0.5, (V, D))),
    ("embeddings.position", rng.normal(0, 0.5, (S, D))),
    ("embeddings.norm.gain", rng.uniform(0.5, 1.5, D)),
    ("embeddings.norm.bias", rng.normal(0, 0.1, D)),
]
for l in range(1, L + 1):
    for name, shape in [
        ("attn.query.weight", (D, D)), ("attn.query.bias", (D,)),
        ("attn.key.weight", (D, D)), ("attn.key.bias", (D,)),
        ("attn.value.weight", (D, D)), ("attn.value.bias", (D,)),
        ("attn.output.weight", (D, D)), ("attn.output.bias", (D,)),
        ("attn.norm.gain", (D,)), ("attn.norm.bias", (D,)),
        ("ffn.inner.weight", (D, F)), ("ffn.inner.bias", (F,)),
        ("ffn.outer.weight", (F, D)), ("ffn.outer.bias", (D,)),
        ("ffn.norm.gain", (D,)), ("ffn.norm.bias", (D,)),
    ]:
        params.append((f"layers.{l}.{name}", rng.normal(0, 0.5, shape)))
params.append(("head.weight", rng.normal(0, 0.5, (D, V))))
P = dict(params)

tokens = np.array([[2, 5, 6, 1, 3], [2, 4, 3, 0, 0]])
mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool)
B = tokens.shape[0]
key_bias = np.where(mask[:, None, :], 0.0, -1e9)

x = layer_norm(P["embeddings.token"][tokens] + P["embeddings.position"][None, :S],
               P["embeddings.norm.gain"], P["embeddings.norm.bias"])
hidden, attention = [x], []
dk = D // A
for l in range(1, L + 1):
    p = lambda n: P[f"layers.{l}.{n}"]
    q = x @ p("attn.query.weight") + p("attn.query.bias")
    k = x @ p("attn.key.weight") + p("attn.key.bias")
    v = x @ p("attn.value.weight") + p("attn.value.bias")
    heads, probs = [], []
    for a in range(A):
        sl = slice(a * dk, (a + 1) * dk)
        pr = softmax(q[..., sl] @ k[..., sl].transpose(0, 2, 1) / np.sqrt(dk) + key_bias)
        probs.append(pr)
        heads.append(pr @ v[..., sl])
    h1 = layer_norm(np.concatenate(heads, -1) @ p("attn.output.weight") + p("attn.output.bias") + x,
                    p("attn.norm.gain"), p("attn.norm.bias"))
    ff = gelu(h1 @ p("ffn.inner.weight") + p("ffn.inner.bias")) @ p("ffn.outer.weight") + p("ffn.outer.bias")
    x = layer_norm(ff + h1, p("ffn.norm.gain"), p("ffn.norm.bias"))
    hidden.append(x)
    attention.append(probs)
logits = x @ P["head.weight"]

out = {
    "config": {"num_layers": L, "num_heads": A, "hidden_size": D, "ff_size": F, "vocab_size": V,
               "max_seq_len": S, "layer_norm_eps": EPS},
    "parameters": [{"name": n, "shape": list(t.shape), "data": t.ravel().tolist()} for n, t in params],
    "tokens": tokens.ravel().tolist(),
    "batch": B,
    "seq_len": S,
    "mask": mask.ravel().tolist(),
    "hidden_states": [h.ravel().tolist() for h in hidden],
    "attention": [[pr.ravel().tolist() for pr in layer] for layer in attention],
    "logits": logits.ravel().tolist(),
}
with open("hand_forward.json", "w") as f:
    json.dump(out, f, indent=1)
