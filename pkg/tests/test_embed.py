import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from llmser.embed import TrigramEmbedder, cosine, make_embedder, trigrams

# cos between the trigram multisets of "red cotton shirt" (14 distinct) and
# "red cotton shirts" (same 14 plus "rts"): 14 / sqrt(14 * 15)
SHIRTS_COSINE = 0.9660917830792959


def test_same_string_same_vector():
    e = TrigramEmbedder()
    np.testing.assert_array_equal(e.embed("wool socks"), e.embed("wool socks"))


def test_single_trigram_is_one_hot():
    v = TrigramEmbedder().embed("abc")
    assert np.count_nonzero(v) == 1
    assert np.linalg.norm(v) == pytest.approx(1.0)


def test_abcd_bcde_share_half():
    e = TrigramEmbedder()
    assert cosine(e.embed("abcd"), e.embed("bcde")) == pytest.approx(0.5, abs=1e-12)


def test_shirt_plural_matches_hand_count():
    e = TrigramEmbedder()
    a, b = "red cotton shirt", "red cotton shirts"
    grams = set(trigrams(a)) | set(trigrams(b))
    assert len({e.bin(g) for g in grams}) == len(grams)  # no bin collisions
    assert cosine(e.embed(a), e.embed(b)) == pytest.approx(SHIRTS_COSINE, abs=1e-12)
    assert SHIRTS_COSINE == pytest.approx(math.sqrt(14 / 15), abs=1e-15)


def test_case_insensitive():
    e = TrigramEmbedder()
    np.testing.assert_array_equal(e.embed("Wool Socks"), e.embed("wool socks"))


def test_short_text_is_zero_and_empty_is_error():
    e = TrigramEmbedder()
    assert not e.embed("ab").any()
    with pytest.raises(ValueError):
        e.embed("  ")



def test_cosine_basics():
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    assert cosine(np.array([1.0, 0.0]), np.array([-2.0, 0.0])) == -1.0
    assert cosine(np.zeros(3), np.ones(3)) == 0.0


@given(st.text(min_size=1, max_size=30).filter(str.strip), st.text(min_size=1, max_size=30).filter(str.strip))
def test_trigram_cosine_is_bounded(a, b):
    e = TrigramEmbedder(dim=64)
    c = cosine(e.embed(a), e.embed(b))
    assert 0.0 <= c <= 1.0 + 1e-12


def test_make_embedder():
    assert isinstance(make_embedder("trigram", dim=32), TrigramEmbedder)
    with pytest.raises(ValueError):
        make_embedder("word2vec")


def test_bins_are_stable_across_instances():
    assert TrigramEmbedder().bin("abc") == TrigramEmbedder().bin("abc")
    assert [TrigramEmbedder().bin(g) for g in ("abc", "xyz", "rts")] == [TrigramEmbedder().bin(g) for g in ("abc", "xyz", "rts")]
