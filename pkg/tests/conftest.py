import json
import string
from pathlib import Path

import numpy as np
import pytest

from encbench.backends import get_backend
from encbench.checkpoint import write_safetensors
from encbench.models import EncoderConfig, EncoderWeights, LayerWeights
from encbench.tensor import Tensor
from encbench.tokenizers import METASPACE, byte_to_unicode_table

# tolerance used for optimized-vs-reference kernel parity: relative 1e-5
# with an absolute floor of 1e-6
REL_TOL = 1e-5
ABS_FLOOR = 1e-6


def assert_kernel_close(got, want, rel=REL_TOL, floor=ABS_FLOOR, label=""):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    assert got.shape == want.shape, f"{label}: shape {got.shape} != {want.shape}"
    err = np.abs(got - want)
    bound = np.maximum(floor, rel * np.abs(want))
    worst = float((err - bound).max())
    assert np.all(err <= bound), f"{label}: exceeds tolerance by {worst:.3e}"


@pytest.fixture(scope="session")
def reference():
    return get_backend("reference")


@pytest.fixture(scope="session")
def optimized():
    return get_backend("optimized")


@pytest.fixture(scope="session")
def both_backends(reference, optimized):
    return (reference, optimized)


def make_config(family="bert", hidden=32, layers=2, heads=4, inter=64, vocab=50,
                max_pos=64, type_vocab=2, eps=1e-12, pad=0):
    return EncoderConfig(
        family=family,
        hidden_size=hidden,
        num_hidden_layers=layers,
        num_attention_heads=heads,
        intermediate_size=inter,
        vocab_size=vocab,
        max_position_embeddings=max_pos,
        type_vocab_size=type_vocab,
        layer_norm_eps=eps,
        pad_token_id=pad,
    )


def make_random_weights(config, seed=0, scale=0.05, pooler=True):
    rng = np.random.default_rng(seed)

    def t(*shape):
        return Tensor.from_array(rng.standard_normal(shape).astype(np.float32) * scale)

    def ln(n):
        return (Tensor.from_array(np.ones(n, dtype=np.float32)),
                Tensor.from_array(np.zeros(n, dtype=np.float32)))

    h, i = config.hidden_size, config.intermediate_size
    emb_g, emb_b = ln(h)
    layers = []
    for _ in range(config.num_hidden_layers):
        a_g, a_b = ln(h)
        f_g, f_b = ln(h)
        layers.append(LayerWeights(
            q_w=t(h, h), q_b=t(h), k_w=t(h, h), k_b=t(h), v_w=t(h, h), v_b=t(h),
            attn_out_w=t(h, h), attn_out_b=t(h),
            attn_ln_gamma=a_g, attn_ln_beta=a_b,
            ffn_in_w=t(i, h), ffn_in_b=t(i),
            ffn_out_w=t(h, i), ffn_out_b=t(h),
            ffn_ln_gamma=f_g, ffn_ln_beta=f_b,
        ))
    return EncoderWeights(
        word_embeddings=t(config.vocab_size, h),
        position_embeddings=t(config.max_position_embeddings, h),
        token_type_embeddings=t(config.type_vocab_size, h),
        emb_ln_gamma=emb_g,
        emb_ln_beta=emb_b,
        layers=tuple(layers),
        pooler_w=t(h, h) if pooler else None,
        pooler_b=t(h) if pooler else None,
    )


def checkpoint_entries(config, prefix="bert.", ln_style="weight", pooler=False,
                       extra=(), seed=42, scale=0.05):
    """Safetensors entries under published weight names for a geometry."""
    rng = np.random.default_rng(seed)
    h, i = config.hidden_size, config.intermediate_size
    ln_w, ln_b = ("weight", "bias") if ln_style == "weight" else ("gamma", "beta")
    entries = {}

    def put(name, *shape, ones=False):
        if ones:
            arr = np.ones(shape, dtype=np.float32)
        else:
            arr = rng.standard_normal(shape).astype(np.float32) * scale
        entries[prefix + name] = ("F32", shape, arr.tobytes())

    put("embeddings.word_embeddings.weight", config.vocab_size, h)
    put("embeddings.position_embeddings.weight", config.max_position_embeddings, h)
    put("embeddings.token_type_embeddings.weight", config.type_vocab_size, h)
    put(f"embeddings.LayerNorm.{ln_w}", h, ones=True)
    put(f"embeddings.LayerNorm.{ln_b}", h)
    for n in range(config.num_hidden_layers):
        base = f"encoder.layer.{n}."
        for proj in ("query", "key", "value"):
            put(f"{base}attention.self.{proj}.weight", h, h)
            put(f"{base}attention.self.{proj}.bias", h)
        put(f"{base}attention.output.dense.weight", h, h)
        put(f"{base}attention.output.dense.bias", h)
        put(f"{base}attention.output.LayerNorm.{ln_w}", h, ones=True)
        put(f"{base}attention.output.LayerNorm.{ln_b}", h)
        put(f"{base}intermediate.dense.weight", i, h)
        put(f"{base}intermediate.dense.bias", i)
        put(f"{base}output.dense.weight", h, i)
        put(f"{base}output.dense.bias", h)
        put(f"{base}output.LayerNorm.{ln_w}", h, ones=True)
        put(f"{base}output.LayerNorm.{ln_b}", h)
    if pooler:
        put("pooler.dense.weight", h, h)
        put("pooler.dense.bias", h)
    for name, shape in extra:
        arr = rng.standard_normal(shape).astype(np.float32) * scale
        entries[name] = ("F32", tuple(shape), arr.tobytes())
    return entries


def _mini_wordpiece_vocab():
    tokens = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    chars = list(string.ascii_lowercase) + list(string.digits)
    tokens += chars
    tokens += [f"##{c}" for c in chars]
    tokens += list(".,!?;:'\"()-$%&/+=<>@_#*[]{}~^|\\`")
    return tokens


def _mini_bpe_vocab():
    table = byte_to_unicode_table()
    tokens = ["<s>", "<pad>", "</s>", "<unk>", "<mask>"]
    tokens += [table[b] for b in range(256)]
    return list(dict.fromkeys(tokens))


def _mini_unigram_doc():
    printable = list(string.ascii_letters) + list(string.digits) + list(
        ".,!?;:'\"()-$%&/+=<>@_#*[]{}~^|\\` ")
    vocab = [["<s>", 0.0], ["<pad>", 0.0], ["</s>", 0.0], ["<unk>", 0.0],
             [METASPACE, -2.5]]
    vocab += [[c, -3.5] for c in dict.fromkeys(printable) if c != " "]
    vocab += [[METASPACE + "the", -2.0], [METASPACE + "a", -2.2], ["<mask>", 0.0]]
    return {
        "added_tokens": [
            {"id": 0, "content": "<s>", "special": True},
            {"id": 1, "content": "<pad>", "special": True},
            {"id": 2, "content": "</s>", "special": True},
            {"id": 3, "content": "<unk>", "special": True},
            {"id": len(vocab) - 1, "content": "<mask>", "special": True},
        ],
        "model": {"type": "Unigram", "unk_id": 3, "vocab": vocab},
    }


MINI_GEOMETRY = dict(hidden=64, layers=2, heads=4, inter=128)

FIXTURES_DIR = Path(__file__).resolve().parent.parent / "fixtures"
FIXTURE_HUB = FIXTURES_DIR / "hub_cache"


def install_geometry_repo(cache_root, repo_id="local/bert-base-geometry", seed=99):
    """A checkpoint with bert-base geometry (hidden 768, 12 layers, 12 heads,
    intermediate 3072) and random weights, reusing the committed fixture
    vocabulary. Latency depends on the geometry, not the weight values, so
    this stands in for the full-size model in scaling measurements."""
    src = FIXTURE_HUB / "fixtures--bert-mini" / "main"
    repo_dir = Path(cache_root) / repo_id.replace("/", "--") / "main"
    repo_dir.mkdir(parents=True, exist_ok=True)
    for name in ("vocab.txt", "tokenizer_config.json"):
        repo_dir.joinpath(name).write_bytes((src / name).read_bytes())
    vocab_size = len((src / "vocab.txt").read_text("utf-8").splitlines())

    config = {
        "model_type": "bert",
        "hidden_size": 768,
        "num_hidden_layers": 12,
        "num_attention_heads": 12,
        "intermediate_size": 3072,
        "vocab_size": vocab_size,
        "max_position_embeddings": 512,
        "type_vocab_size": 2,
        "layer_norm_eps": 1e-12,
        "pad_token_id": 0,
        "hidden_act": "gelu",
    }
    (repo_dir / "config.json").write_text(json.dumps(config, indent=1), "utf-8")
    cfg = make_config(family="bert", hidden=768, layers=12, heads=12, inter=3072,
                      vocab=vocab_size, max_pos=512, type_vocab=2, eps=1e-12, pad=0)
    entries = checkpoint_entries(cfg, prefix="bert.", pooler=True, seed=seed, scale=0.02)
    (repo_dir / "model.safetensors").write_bytes(write_safetensors(entries))
    return repo_dir


def install_mini_repo(cache_root, repo_id, family="bert", seed=0, **geometry):
    """Materialize a complete synthetic checkpoint repo in cache layout so the
    fetch path works offline. Returns the repo directory."""
    geo = {**MINI_GEOMETRY, **geometry}
    repo_dir = Path(cache_root) / repo_id.replace("/", "--") / "main"
    repo_dir.mkdir(parents=True, exist_ok=True)

    if family == "bert":
        vocab_tokens = _mini_wordpiece_vocab()
        (repo_dir / "vocab.txt").write_text("\n".join(vocab_tokens) + "\n", "utf-8")
        (repo_dir / "tokenizer_config.json").write_text(
            json.dumps({"do_lower_case": True}), "utf-8")
        vocab_size, pad, max_pos, type_vocab, eps = len(vocab_tokens), 0, 512, 2, 1e-12
        prefix, pooler = "bert.", True
    elif family == "roberta":
        tokens = _mini_bpe_vocab()
        (repo_dir / "vocab.json").write_text(
            json.dumps({t: i for i, t in enumerate(tokens)}), "utf-8")
        (repo_dir / "merges.txt").write_text("#version: 0.2\n", "utf-8")
        vocab_size, pad, max_pos, type_vocab, eps = len(tokens), 1, 514, 1, 1e-5
        prefix, pooler = "roberta.", False
    elif family == "xlm-roberta":
        doc = _mini_unigram_doc()
        (repo_dir / "tokenizer.json").write_text(json.dumps(doc), "utf-8")
        vocab_size, pad, max_pos, type_vocab, eps = len(doc["model"]["vocab"]), 1, 514, 1, 1e-5
        prefix, pooler = "roberta.", False
    else:
        raise ValueError(family)

    config = {
        "model_type": family,
        "hidden_size": geo["hidden"],
        "num_hidden_layers": geo["layers"],
        "num_attention_heads": geo["heads"],
        "intermediate_size": geo["inter"],
        "vocab_size": vocab_size,
        "max_position_embeddings": max_pos,
        "type_vocab_size": type_vocab,
        "layer_norm_eps": eps,
        "pad_token_id": pad,
        "hidden_act": "gelu",
    }
    (repo_dir / "config.json").write_text(json.dumps(config, indent=1), "utf-8")

    cfg = make_config(family=family, hidden=geo["hidden"], layers=geo["layers"],
                      heads=geo["heads"], inter=geo["inter"], vocab=vocab_size,
                      max_pos=max_pos, type_vocab=type_vocab, eps=eps, pad=pad)
    entries = checkpoint_entries(cfg, prefix=prefix, pooler=pooler, seed=seed)
    (repo_dir / "model.safetensors").write_bytes(write_safetensors(entries))
    return repo_dir
