import itertools
import json
import math

import pytest

import selmask

RESERVED = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]


def make_vocab(words):
    return selmask.Vocab.from_tokens(RESERVED + list(words))


def tiny_config(vocab_size=10):
    c = selmask.ModelConfig()
    c.vocab_size = vocab_size
    c.dim = 4
    c.layers = 1
    c.heads = 2
    c.hidden = 8
    c.max_positions = 8
    c.dropout = 0.0
    c.init_std = 0.5
    c.seed = 3
    return c


def test_tokenize_round_trip():
    v = make_vocab(["aw", "##sum", "egg", "##less", "pan", "##ini", "art", "##ist"])
    for word, pieces in [("awsum", ["aw", "##sum"]), ("eggless", ["egg", "##less"]),
                         ("panini", ["pan", "##ini"]), ("artist", ["art", "##ist"])]:
        tokens, ids = selmask.tokenize(word, v)
        assert tokens == pieces
        assert ids == [v.find(t) for t in pieces]
        assert selmask.detokenize(tokens) == word
    assert selmask.tokenize("qzx", v)[0] == ["[UNK]"]
    with pytest.raises(selmask.MalformedSequenceError):
        selmask.detokenize(["##sum"])


def test_vocab_errors():
    with pytest.raises(selmask.ConfigError):
        selmask.Vocab.from_tokens(["a", "b"])
    assert issubclass(selmask.ConfigError, selmask.Error)


def presence(ids):
    p = 0.9 if 8 in ids else 0.5
    return [1.0 - p, p]


def simulate(clf, ids, label, delta=0.05):
    full = clf(ids)[label]
    kept, important = [], []
    for w in ids:
        s = full - clf(kept + [w])[label]
        if s < delta:
            important.append(1)
        else:
            important.append(0)
            kept.append(w)
    return important


def test_importance_with_python_classifier():
    rec = selmask.find_important_tokens(presence, [5, 6, 7, 8], 1)
    assert rec["important"] == [0, 0, 0, 1]
    assert rec["scores"][0] == pytest.approx(0.4, abs=1e-9)
    for n in range(4):
        for ids in itertools.product([5, 6, 7, 8], repeat=n):
            ids = list(ids)
            assert selmask.find_important_tokens(presence, ids, 1)["important"] == simulate(presence, ids, 1)


def test_masking():
    assert selmask.masked_count(0.15, 100) == 15
    assert selmask.masked_count(0.15, 3) == 1
    ids = list(range(5, 25))
    ex = selmask.apply_random_masking(ids, vocab_size=30, seed=1)
    assert len(ex["positions"]) == 3
    restored = list(ex["input_ids"])
    for p, t in zip(ex["positions"], ex["targets"]):
        restored[p] = t
    assert restored == ids
    sel = [0] * 20
    sel[2] = sel[7] = 1
    ex = selmask.apply_selective_masking(ids, sel, vocab_size=30, seed=1)
    assert ex["positions"] == [2, 7]
    fb = selmask.apply_selective_masking(ids, [0] * 20, vocab_size=30, seed=1)
    assert fb["policy"] == "fallback"


def test_model_and_checkpoint(tmp_path):
    p = selmask.init_parameters(tiny_config())
    assert p.parameter_count() > 0
    probs = selmask.seq_classify(p, [5, 6])
    assert math.isclose(sum(probs), 1.0, abs_tol=1e-9)
    assert len(selmask.token_classify(p, [5, 6, 7])) == 3
    assert len(selmask.mlm_predict(p, [5, 4, 7], [1])[0]) == 10
    err, name, ok = selmask.grad_check_sequence(p, [[5, 6, 7], [8]], [1, 0])
    assert ok, (err, name)
    path = tmp_path / "p.ckpt"
    selmask.save_checkpoint(p, str(path))
    assert selmask.load_checkpoint(str(path)) == p
    with pytest.raises(ValueError):
        selmask.seq_classify(p, [5] * 7)


def test_generate_synth():
    spec = json.dumps({"domain_size": 20, "general_size": 20, "task_train": 10, "task_dev": 5, "task_test": 5})
    s = selmask.generate_synth(spec)
    assert len(s["task"]) == 20
    assert len(s["domain_truth"]) == 20
    with pytest.raises(selmask.ConfigError):
        selmask.generate_synth(json.dumps({"no_such_field": 1}))


def test_run_experiment(tmp_path):
    cfg = {
        "synth": {"vocab_size": 120, "lexicon_words_per_class": 10, "cue_words_per_class": 5, "task_train": 60,
                  "task_dev": 20, "task_test": 40, "domain_size": 80, "general_size": 80},
        "model": {"dim": 16, "layers": 1, "heads": 2, "hidden": 32, "max_positions": 24},
        "genept_steps": 20, "checkpoint_fractions": [0.5, 1.0], "taskpt_steps": 6, "pretrain_batch": 4,
        "finetune_epochs": 4, "selector_epochs": 1, "scoring_subsample_copies": 4, "seeds": [3, 4],
        "output_dir": str(tmp_path / "out"),
    }
    result = json.loads(selmask.run_experiment(json.dumps(cfg)))
    assert {a["arm"] for a in result["arms"]} == {"general", "random", "selective"}
