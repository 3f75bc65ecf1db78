import numpy as np
import pytest

from streetnav.bpe import (
    BpeModel,
    MaskLexicon,
    SPECIALS,
    WORD_END,
    mask_text,
    mask_tokens,
    pretokenize,
    rank_by_frequency,
    train_bpe,
)
from streetnav.errors import ConfigError, VocabError


def test_first_merge_by_pair_frequency():
    # specials + alphabet {a, b</w>} + room for exactly one merge
    model = train_bpe(["aaab aaab"], vocab_size=len(SPECIALS) + 2 + 1)
    assert model.merges == [("a", "a")]


def test_default_vocab_target_is_2000():
    import inspect

    assert inspect.signature(train_bpe).parameters["vocab_size"].default == 2000


def test_empty_corpus_rejected():
    with pytest.raises(ConfigError):
        train_bpe([])
    with pytest.raises(ConfigError):
        train_bpe(["   "])


def test_vocab_size_too_small_rejected():
    with pytest.raises(ConfigError):
        train_bpe(["abc"], vocab_size=3)


def test_vocab_never_exceeds_target_and_ids_dense():
    corpus = ["turn left at the bakery", "turn right at the old hotel", "go straight"]
    model = train_bpe(corpus, vocab_size=64)
    assert model.vocab_size <= 64
    assert sorted(model.vocab.values()) == list(range(model.vocab_size))


def test_encode_known_word_after_saturation():
    model = train_bpe(["aaab aaab"], vocab_size=100)
    ids = model.encode("aaab")
    assert len(ids) == 1  # fully merged
    assert model.decode(ids) == "aaab"


def test_partial_merge_segmentation():
    # one merge (a, a): "aaab" -> ["aa", "a", "b</w>"]
    model = train_bpe(["aaab aaab"], vocab_size=len(SPECIALS) + 2 + 1)
    ids = model.encode("aaab")
    tokens = [model.id_to_token[i] for i in ids]
    assert tokens == ["aa", "a", "b" + WORD_END]


def test_encode_deterministic_without_dropout():
    corpus = ["turn left then go right and stop at the bakery"]
    model = train_bpe(corpus, vocab_size=200)
    a = model.encode(corpus[0])
    b = model.encode(corpus[0])
    assert a == b


def test_dropout_fragments_towards_characters():
    model = train_bpe(["abcdefgh abcdefgh"], vocab_size=200)
    rng = np.random.default_rng(0)
    base = len(model.encode("abcdefgh"))
    heavy = [len(model.encode("abcdefgh", 0.95, rng)) for _ in range(50)]
    assert base == 1
    assert np.mean(heavy) > 6  # nearly character-level


def test_dropout_produces_distinct_segmentations():
    model = train_bpe(["abcdefghijklmnopqrst"], vocab_size=200)
    rng = np.random.default_rng(1)
    segmentations = {tuple(model.encode("abcdefghijklmnopqrst", 0.3, rng)) for _ in range(100)}
    assert len(segmentations) >= 2


def test_dropout_requires_rng_and_valid_rate():
    model = train_bpe(["ab"], vocab_size=100)
    with pytest.raises(ConfigError):
        model.encode("ab", 0.5, None)
    with pytest.raises(ConfigError):
        model.encode("ab", 1.0, np.random.default_rng(0))


def test_roundtrip_on_corpus_lines(small_instances):
    corpus = [inst.instruction for inst in small_instances]
    model = train_bpe(corpus, vocab_size=2000)
    for line in corpus:
        assert model.decode(model.encode(line)) == line.lower()


def test_decode_empty_and_specials():
    model = train_bpe(["ab"], vocab_size=100)
    assert model.decode([]) == ""
    assert model.decode([model.pad_id, model.mask_id]) == ""
    with pytest.raises(VocabError):
        model.decode([model.vocab_size + 3])


def test_unknown_characters_map_to_unk():
    model = train_bpe(["ab"], vocab_size=100)
    ids = model.encode("zq")
    assert all(i == model.unk_id for i in ids)


def test_model_json_round_trip(tmp_path):
    model = train_bpe(["turn left at the bakery then stop"], vocab_size=120)
    path = str(tmp_path / "bpe.json")
    model.save(path)
    loaded = BpeModel.load(path)
    assert loaded.vocab == model.vocab
    assert loaded.merges == model.merges
    text = "turn left at the bakery then stop"
    assert loaded.encode(text) == model.encode(text)


def test_pretokenize_splits_punctuation():
    assert pretokenize("Stop, now!") == ["stop", ",", "now", "!"]
    assert pretokenize("x <mask> y") == ["x", "<mask>", "y"]


# --- masking -------------------------------------------------------------


def _direction_lexicon():
    return MaskLexicon("direction", ("left", "right", "straight", "turn"))


def test_mask_k0_is_identity():
    words = "turn left then right".split()
    assert mask_tokens(words, _direction_lexicon(), 0) == words


def test_mask_top_k_words():
    out = mask_tokens("turn left then right".split(), _direction_lexicon(), 2)
    assert out == ["turn", SPECIALS["mask"], "then", SPECIALS["mask"]]


def test_mask_clamps_to_lexicon_size():
    out = mask_tokens("turn left".split(), _direction_lexicon(), 99)
    assert out == [SPECIALS["mask"], SPECIALS["mask"]]


def test_mask_idempotent():
    lex = _direction_lexicon()
    words = "go straight then turn left".split()
    once = mask_tokens(words, lex, 3)
    assert mask_tokens(once, lex, 3) == once


def test_masked_word_encodes_to_single_mask_token():
    model = train_bpe(["turn left at the bakery"], vocab_size=200)
    lex = _direction_lexicon()
    masked = mask_text("turn left at the bakery", lex, 2)
    ids = model.encode(masked)
    assert ids.count(model.mask_id) == 1
    assert model.decode(ids) == "turn at the bakery"


def test_rank_by_frequency():
    corpus = ["left left right", "left straight"]
    ranked = rank_by_frequency(["right", "left", "straight", "absent"], corpus)
    assert ranked == ("left", "right", "straight")


def test_empty_lexicon_rejected():
    with pytest.raises(ConfigError):
        MaskLexicon("direction", ())
