"""Thread-safety contracts: tensors shared across threads, reentrant
forwards, deterministic tokenization under concurrency."""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from conftest import make_config, make_random_weights
from encbench.backends import get_backend
from encbench.models import EncoderInput, forward
from encbench.tensor import Tensor, tensor
from encbench.tokenizers import BpeVocab, bpe_encode, byte_to_unicode_table


def test_concurrent_forwards_agree_with_serial():
    cfg = make_config(hidden=32, layers=2, heads=4)
    weights = make_random_weights(cfg, seed=21)
    backend = get_backend("optimized")
    rng = np.random.default_rng(22)

    inputs = []
    for _ in range(6):
        ids = rng.integers(1, cfg.vocab_size, size=(2, 8), dtype=np.int64)
        inputs.append(EncoderInput(tensor(ids), tensor(np.ones_like(ids)),
                                   tensor(np.zeros_like(ids))))

    serial = []
    for inp in inputs:
        out = forward(inp, weights, cfg, backend)
        backend.synchronize()
        serial.append(out.last_hidden_state.data.copy())

    def run(inp):
        out = forward(inp, weights, cfg, backend)
        return out.last_hidden_state.data  # .data blocks until materialized

    with ThreadPoolExecutor(max_workers=4) as pool:
        concurrent = list(pool.map(run, inputs))
    backend.synchronize()
    for got, want in zip(concurrent, serial):
        assert np.max(np.abs(got - want)) <= 1e-5


def test_bpe_identical_ids_across_thread_counts():
    table = byte_to_unicode_table()
    tokens = ["<s>", "<pad>", "</s>", "<unk>", "<mask>"] + [table[b] for b in range(256)]
    merges = {("t", "h"): 0, ("th", "e"): 1, ("Ġ", "th"): 2}
    tokens += ["th", "the", "Ġth"]
    vocab = BpeVocab({t: i for i, t in enumerate(dict.fromkeys(tokens))}, merges)
    texts = [f"the theme {i} thaws the thing" for i in range(24)]

    want = [bpe_encode(t, vocab) for t in texts]
    for workers in (2, 8):
        with ThreadPoolExecutor(max_workers=workers) as pool:
            got = list(pool.map(lambda t: bpe_encode(t, vocab), texts))
        assert got == want


def test_tensors_shared_across_threads_read_consistently():
    data = np.arange(64, dtype=np.float32).reshape(8, 8)
    t = Tensor.from_array(data)

    def reader(_):
        return float(t.data.sum())

    with ThreadPoolExecutor(max_workers=8) as pool:
        sums = list(pool.map(reader, range(32)))
    assert all(s == sums[0] for s in sums)
