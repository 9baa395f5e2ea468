#!/usr/bin/env python3
"""Generate the committed test fixtures from independent oracle implementations.

Builds three small checkpoint repos (bert / roberta / xlm-roberta families)
laid out exactly like hub cache entries, plus golden activation files and
token-id oracle files:

  fixtures/hub_cache/fixtures--bert-mini/main/     vocab.txt + F32 weights
  fixtures/hub_cache/fixtures--roberta-mini/main/  vocab.json+merges + BF16 weights
  fixtures/hub_cache/fixtures--xlmr-mini/main/     tokenizer.json + F32 weights
  fixtures/goldens/fixtures--<name>.npz            oracle forward activations
  fixtures/token_oracle/<family>.jsonl             oracle token ids, 100 texts each

The oracles are torch + transformers (model forward), the HuggingFace
tokenizers trainers (vocabularies learned from the bundled corpus), and raw
sentencepiece (unigram segmentation). None of these are runtime dependencies
of the package; this script exists so the fixtures can be regenerated and
audited. Model weights are seeded random draws; the script asserts that the
engine reproduces every oracle id sequence exactly and every activation
within the verification tolerance before anything is considered final.

Usage:
    python3 scripts/make_fixtures.py [--out fixtures]

Requires: torch, transformers, tokenizers, sentencepiece.
"""

import argparse
import json
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

REPO_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO_ROOT / "src"))

from encbench.backends import get_backend                                # noqa: E402
from encbench.bench import load_corpus                                   # noqa: E402
from encbench.checkpoint import load_encoder                             # noqa: E402
from encbench.models import forward                                      # noqa: E402
from encbench.tokenizers import encode_batch, load_tokenizer             # noqa: E402

GOLDEN_TEXTS = [
    "The quick brown fox jumps over the lazy dog while the benchmark runs.",
    "Measure first, optimize second, and write both steps down.",
    "She said the café's Wi-Fi was faster than the office network.",
    "Latency numbers only mean something when the measurement method is written down.",
    "The rocket emoji 🚀 sneaks an astral codepoint into the test set.",
]

EXTRA_PARITY_TEXTS = [
    "Unknown glyphs like ☃ stress the fallback path.",
    "MixedCASE Text, numbers 123, and café accents!",
]

FAIRSEQ_SPECIALS = {"<s>": 0, "<pad>": 1, "</s>": 2, "<unk>": 3}
VERIFY_TOLERANCE = 5e-3
PARITY_SIZE = 100


def parity_corpus(corpus: list[str]) -> list[str]:
    """Exactly 100 texts: evenly spread corpus lines plus two crafted cases."""
    want = PARITY_SIZE - len(EXTRA_PARITY_TEXTS)
    picked: list[str] = []
    for i in range(want):
        j = round(i * (len(corpus) - 1) / (want - 1))
        while corpus[j] in picked:       # evenly spaced indices can collide
            j += 1
        picked.append(corpus[j])
    return picked + EXTRA_PARITY_TEXTS


# ---------------------------------------------------------------------------
# tokenizer training
# ---------------------------------------------------------------------------

def train_wordpiece(corpus_path: Path, repo_dir: Path) -> int:
    from tokenizers.implementations import BertWordPieceTokenizer

    trainer = BertWordPieceTokenizer(lowercase=True)
    trainer.train(files=[str(corpus_path)], vocab_size=800, min_frequency=1,
                  special_tokens=["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"])
    trainer.save_model(str(repo_dir))
    (repo_dir / "tokenizer_config.json").write_text(
        json.dumps({"do_lower_case": True, "model_max_length": 512}) + "\n")
    return len((repo_dir / "vocab.txt").read_text("utf-8").splitlines())


def train_bpe(corpus_path: Path, repo_dir: Path) -> int:
    from tokenizers.implementations import ByteLevelBPETokenizer

    trainer = ByteLevelBPETokenizer()
    trainer.train(files=[str(corpus_path)], vocab_size=600, min_frequency=2,
                  special_tokens=["<s>", "<pad>", "</s>", "<unk>", "<mask>"])
    trainer.save_model(str(repo_dir))
    return len(json.loads((repo_dir / "vocab.json").read_text("utf-8")))


def train_unigram(corpus_path: Path, repo_dir: Path):
    """Train a sentencepiece unigram model with identity normalization and
    publish it as tokenizer.json in the fairseq id layout: specials at 0..3,
    sentencepiece pieces shifted by one, mask appended at the end."""
    import sentencepiece as spm

    with tempfile.TemporaryDirectory() as tmp:
        prefix = str(Path(tmp) / "uni")
        spm.SentencePieceTrainer.train(
            input=str(corpus_path), model_prefix=prefix, vocab_size=500,
            model_type="unigram", character_coverage=0.9995,
            normalization_rule_name="identity",
            unk_id=0, bos_id=1, eos_id=2, pad_id=-1,
        )
        shutil.copy(prefix + ".model", repo_dir / "sentencepiece.bpe.model")

    sp = spm.SentencePieceProcessor()
    sp.load(str(repo_dir / "sentencepiece.bpe.model"))
    vocab = [["<s>", 0.0], ["<pad>", 0.0], ["</s>", 0.0], ["<unk>", 0.0]]
    for i in range(3, sp.get_piece_size()):
        vocab.append([sp.id_to_piece(i), float(sp.get_score(i))])
    vocab.append(["<mask>", 0.0])
    doc = {
        "version": "1.0",
        "added_tokens": [
            {"id": 0, "content": "<s>", "special": True},
            {"id": 1, "content": "<pad>", "special": True},
            {"id": 2, "content": "</s>", "special": True},
            {"id": 3, "content": "<unk>", "special": True},
            {"id": len(vocab) - 1, "content": "<mask>", "special": True},
        ],
        "normalizer": None,
        "pre_tokenizer": {"type": "Metaspace", "replacement": "▁",
                          "prepend_scheme": "always", "split": True},
        # sentencepiece reports one unk for a whole run of unknown characters
        "model": {"type": "Unigram", "unk_id": 3, "vocab": vocab,
                  "byte_fallback": False, "fuse_unk": True},
    }
    (repo_dir / "tokenizer.json").write_text(
        json.dumps(doc, ensure_ascii=False, indent=1) + "\n", "utf-8")
    return sp, len(vocab)


# ---------------------------------------------------------------------------
# oracle encoders (independent of the package implementation)
# ---------------------------------------------------------------------------

def bert_oracle(repo_dir: Path):
    from transformers import BertTokenizer

    tok = BertTokenizer(str(repo_dir / "vocab.txt"), do_lower_case=True)
    return tok.encode


def roberta_oracle(repo_dir: Path):
    from transformers import RobertaTokenizer

    tok = RobertaTokenizer(str(repo_dir / "vocab.json"), str(repo_dir / "merges.txt"))
    return tok.encode


def unigram_oracle(sp):
    def encode(text: str) -> list[int]:
        ids = [FAIRSEQ_SPECIALS["<s>"]]
        for piece in sp.encode(text, out_type=str):
            if piece in FAIRSEQ_SPECIALS:
                ids.append(FAIRSEQ_SPECIALS[piece])
                continue
            pid = sp.piece_to_id(piece)
            ids.append(pid + 1 if pid != 0 else FAIRSEQ_SPECIALS["<unk>"])
        ids.append(FAIRSEQ_SPECIALS["</s>"])
        return ids

    return encode


# ---------------------------------------------------------------------------
# model fixtures
# ---------------------------------------------------------------------------

def build_model(family: str, repo_dir: Path, vocab_size: int):
    import torch
    from transformers import (BertConfig, BertForPreTraining, RobertaConfig,
                              RobertaForMaskedLM, XLMRobertaConfig,
                              XLMRobertaForMaskedLM)

    if family == "bert":
        torch.manual_seed(20241)
        cfg = BertConfig(vocab_size=vocab_size, hidden_size=64, num_hidden_layers=3,
                         num_attention_heads=4, intermediate_size=256,
                         max_position_embeddings=512, type_vocab_size=2,
                         layer_norm_eps=1e-12, pad_token_id=0, hidden_act="gelu")
        model = BertForPreTraining(cfg).eval()
    elif family == "roberta":
        torch.manual_seed(20242)
        cfg = RobertaConfig(vocab_size=vocab_size, hidden_size=64, num_hidden_layers=2,
                            num_attention_heads=4, intermediate_size=256,
                            max_position_embeddings=514, type_vocab_size=1,
                            layer_norm_eps=1e-5, pad_token_id=1, bos_token_id=0,
                            eos_token_id=2, hidden_act="gelu")
        # stored in bf16 to exercise the widening path end to end
        model = RobertaForMaskedLM(cfg).eval().to(torch.bfloat16)
    elif family == "xlm-roberta":
        torch.manual_seed(20243)
        cfg = XLMRobertaConfig(vocab_size=vocab_size, hidden_size=64,
                               num_hidden_layers=2, num_attention_heads=4,
                               intermediate_size=192, max_position_embeddings=514,
                               type_vocab_size=1, layer_norm_eps=1e-5,
                               pad_token_id=1, bos_token_id=0, eos_token_id=2,
                               hidden_act="gelu")
        model = XLMRobertaForMaskedLM(cfg).eval()
    else:
        raise ValueError(family)
    model.save_pretrained(repo_dir, safe_serialization=True)


def oracle_forward(family: str, repo_dir: Path, input_ids, attention_mask,
                   token_type_ids):
    """Run the reference implementation on the saved files in float32."""
    import torch
    from transformers import (BertForPreTraining, RobertaForMaskedLM,
                              XLMRobertaForMaskedLM)

    loaders = {"bert": BertForPreTraining, "roberta": RobertaForMaskedLM,
               "xlm-roberta": XLMRobertaForMaskedLM}
    model = loaders[family].from_pretrained(repo_dir, dtype=torch.float32).eval()
    body = model.bert if family == "bert" else model.roberta
    kwargs = {"input_ids": torch.from_numpy(input_ids),
              "attention_mask": torch.from_numpy(attention_mask)}
    if family == "bert":
        kwargs["token_type_ids"] = torch.from_numpy(token_type_ids)
    with torch.no_grad():
        out = body(**kwargs)
    pooler = out.pooler_output.numpy() if getattr(out, "pooler_output", None) is not None else None
    return out.last_hidden_state.numpy(), pooler


# ---------------------------------------------------------------------------
# main
# ---------------------------------------------------------------------------

def check_parity(name: str, texts, oracle_encode, engine_encode):
    bad = 0
    for text in texts:
        want = oracle_encode(text)
        got = engine_encode(text)
        if want != got:
            bad += 1
            if bad <= 3:
                print(f"  PARITY MISMATCH [{name}] {text!r}\n"
                      f"    oracle: {want}\n    engine: {got}")
    if bad:
        raise SystemExit(f"{name}: {bad}/{len(texts)} parity mismatches; not freezing")
    print(f"  {name}: {len(texts)} texts match the oracle exactly")


def engine_encode_fn(tokenizer):
    sp = tokenizer.specials

    def encode(text: str) -> list[int]:
        return [sp.cls_id] + tokenizer.encode_text(text)[:510] + [sp.sep_id]

    return encode


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(REPO_ROOT / "fixtures"))
    args = ap.parse_args()

    try:
        import transformers
        transformers.utils.logging.set_verbosity_error()
        transformers.utils.logging.disable_progress_bar()
    except Exception:
        pass

    out = Path(args.out)
    hub = out / "hub_cache"
    goldens_dir = out / "goldens"
    oracle_dir = out / "token_oracle"
    for d in (hub, goldens_dir, oracle_dir):
        d.mkdir(parents=True, exist_ok=True)

    corpus_path = REPO_ROOT / "src" / "encbench" / "data" / "corpus.txt"
    corpus = load_corpus(corpus_path)
    parity = parity_corpus(corpus)

    repos = {
        "bert": "fixtures/bert-mini",
        "roberta": "fixtures/roberta-mini",
        "xlm-roberta": "fixtures/xlmr-mini",
    }
    oracles = {}
    for family, repo_id in repos.items():
        repo_dir = hub / repo_id.replace("/", "--") / "main"
        repo_dir.mkdir(parents=True, exist_ok=True)
        print(f"building {repo_id} ({family})")
        if family == "bert":
            vocab_size = train_wordpiece(corpus_path, repo_dir)
            oracles[family] = bert_oracle(repo_dir)
        elif family == "roberta":
            vocab_size = train_bpe(corpus_path, repo_dir)
            oracles[family] = roberta_oracle(repo_dir)
        else:
            sp, vocab_size = train_unigram(corpus_path, repo_dir)
            oracles[family] = unigram_oracle(sp)
        print(f"  vocab size {vocab_size}")
        build_model(family, repo_dir, vocab_size)

        # tokenizer parity gate, then freeze the oracle ids
        loaded = load_encoder(repo_id, cache_dir=hub, offline=True)
        tokenizer = load_tokenizer(loaded.config.family, loaded.files)
        check_parity(family, parity, oracles[family], engine_encode_fn(tokenizer))
        with open(oracle_dir / f"{family}.jsonl", "w", encoding="utf-8") as fh:
            for text in parity:
                fh.write(json.dumps({"text": text, "ids": oracles[family](text)},
                                    ensure_ascii=False) + "\n")

        # golden activations from the oracle forward on the saved files
        encoding = encode_batch(GOLDEN_TEXTS, tokenizer)
        ids = encoding.input_ids.data
        mask = encoding.attention_mask.data
        types = encoding.token_type_ids.data
        for i, text in enumerate(GOLDEN_TEXTS):
            row = [v for v, m in zip(ids[i], mask[i]) if m == 1]
            if list(row) != oracles[family](text):
                raise SystemExit(f"{family}: batch encoding disagrees with oracle "
                                 f"for {text!r}")
        hidden, pooler = oracle_forward(family, repo_dir, ids, mask, types)
        arrays = {"texts": np.array(GOLDEN_TEXTS), "input_ids": ids,
                  "attention_mask": mask, "last_hidden_state": hidden}
        if pooler is not None:
            arrays["pooler_output"] = pooler
        golden_path = goldens_dir / f"{repo_id.replace('/', '--')}.npz"
        np.savez(golden_path, **arrays)

        # engine sanity: both backends must already sit inside the tolerance
        for backend_name in ("reference", "optimized"):
            backend = get_backend(backend_name)
            mine = forward(encoding.to_encoder_input(), loaded.weights,
                           loaded.config, backend)
            backend.synchronize()
            diff = float(np.max(np.abs(mine.last_hidden_state.data - hidden)))
            print(f"  {backend_name} forward vs oracle: max abs diff {diff:.2e}")
            if diff > VERIFY_TOLERANCE:
                raise SystemExit(f"{repo_id}: {backend_name} diverges from the "
                                 f"oracle by {diff}")
        print(f"  wrote {golden_path.name}")

    print("fixtures complete")
    return 0


if __name__ == "__main__":
    sys.exit(main())
