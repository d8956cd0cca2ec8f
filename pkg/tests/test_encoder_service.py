import numpy as np
import pytest

from services.encoder_service import (
    BackendConfig,
    HashedNgramBackend,
    PrecomputedBackend,
    build_backend,
    cosine_similarity,
    cosine_to_reference,
    load_precomputed,
    write_precomputed,
)
from utils.exceptions import DomainError, EmbeddingLookupError, ParseError


class TestCosine:
    def test_self_similarity(self):
        v = np.array([0.3, -1.2, 4.0])
        assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_exact_rational_value(self):
        """32 / sqrt(14 * 77)."""
        value = cosine_similarity(np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0]))
        assert value == pytest.approx(0.974631846197, abs=1e-12)

    def test_zero_vector(self):
        with pytest.raises(DomainError):
            cosine_similarity(np.zeros(3), np.ones(3))

    def test_dimension_mismatch(self):
        with pytest.raises(DomainError):
            cosine_similarity(np.ones(2), np.ones(3))

    def test_rowwise_matches_pairwise(self):
        rng = np.random.default_rng(3)
        matrix = rng.normal(size=(5, 8))
        reference = rng.normal(size=8)
        expected = [cosine_similarity(row, reference) for row in matrix]
        assert cosine_to_reference(matrix, reference) == pytest.approx(expected, abs=1e-13)


class TestHashedBackend:
    def test_deterministic(self):
        backend = HashedNgramBackend(dim=64, seed=5)
        a = backend.encode("sanctions on energy prices")
        b = HashedNgramBackend(dim=64, seed=5).encode("sanctions on energy prices")
        assert np.array_equal(a, b)
        assert np.linalg.norm(a) == pytest.approx(1.0)

    def test_one_token_changes_vector(self):
        backend = HashedNgramBackend(dim=256)
        assert not np.array_equal(backend.encode("peace talks today"), backend.encode("peace talks tomorrow"))

    def test_bag_of_words_permutation(self):
        backend = HashedNgramBackend(dim=128)
        assert np.allclose(backend.encode("war peace talks"), backend.encode("talks war peace"))

    def test_empty_text_has_no_embedding(self):
        with pytest.raises(DomainError):
            HashedNgramBackend().encode("")

    def test_preprocess_strips_urls(self):
        backend = HashedNgramBackend(dim=64, preprocess=True)
        assert np.array_equal(backend.encode("border news https://t.co/xyz"), backend.encode("border news"))

    def test_encode_document_uses_text(self):
        backend = build_backend(BackendConfig(dim=32))
        assert np.array_equal(backend.encode_document("id-1", "energy"), backend.encode("energy"))
        assert backend.encode_many(["energy", "army"]).shape == (2, 32)


class TestPrecomputed:
    def test_lookup(self, tmp_path):
        path = tmp_path / "emb.csv"
        path.write_text("id,v0,v1\nid1,1,0\n", encoding="utf-8")
        backend = load_precomputed(path)
        assert isinstance(backend, PrecomputedBackend)
        assert np.array_equal(backend.encode("id1"), np.array([1.0, 0.0]))
        assert backend.encode_document("id1", "ignored text")[0] == 1.0

    def test_missing_id_names_it(self, tmp_path):
        path = tmp_path / "emb.csv"
        path.write_text("id,v0,v1\nid1,1,0\n", encoding="utf-8")
        with pytest.raises(EmbeddingLookupError) as excinfo:
            load_precomputed(path).encode("id404")
        assert "id404" in str(excinfo.value)

    def test_three_rows(self, tmp_path):
        path = tmp_path / "emb.csv"
        path.write_text("id,v0,v1,v2\na,1,2,3\nb,4,5,6\nc,7,8,9\n", encoding="utf-8")
        backend = load_precomputed(path)
        assert len(backend) == 3
        assert backend.dim == 3

    def test_nan_row_reports_line(self, tmp_path):
        path = tmp_path / "emb.csv"
        path.write_text("id,v0,v1\na,1,0\nb,nan,1\n", encoding="utf-8")
        with pytest.raises(ParseError) as excinfo:
            load_precomputed(path)
        assert excinfo.value.line_no == 3

    def test_ragged_row_reports_line(self, tmp_path):
        path = tmp_path / "emb.csv"
        path.write_text("id,v0,v1\na,1,0\nb,1\n", encoding="utf-8")
        with pytest.raises(ParseError) as excinfo:
            load_precomputed(path)
        assert excinfo.value.line_no == 3

    def test_csv_rewrite_is_lossless(self, tmp_path):
        rng = np.random.default_rng(0)
        table = {f"doc{i}": rng.normal(size=4) for i in range(50)}
        first = write_precomputed(table, tmp_path / "a.csv")
        backend = load_precomputed(first)
        second = write_precomputed({k: backend.encode(k) for k in backend.ids}, tmp_path / "b.csv")
        assert first.read_bytes() == second.read_bytes()
        for key, vector in table.items():
            assert np.allclose(backend.encode(key), vector, atol=1e-12, rtol=0)

    def test_binary_lookup_by_hash(self, tmp_path):
        table = {"t0000001": np.array([0.5, -0.25, 1.0]), "t0000002": np.array([1.0, 0.0, 0.0])}
        path = write_precomputed(table, tmp_path / "emb.bin", fmt="binary")
        backend = load_precomputed(path)
        assert backend.dim == 3
        assert np.allclose(backend.encode("t0000001"), table["t0000001"], atol=1e-7)

    def test_precomputed_kind_needs_path(self):
        with pytest.raises(DomainError):
            build_backend(BackendConfig(kind="precomputed-file"))
