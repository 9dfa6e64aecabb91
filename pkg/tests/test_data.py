import numpy as np
import pytest

from tpsda.data import (
    EmbeddingSet,
    Preprocessor,
    apply_preprocessor,
    fit_preprocessor,
    lda,
    load_any,
    load_embeddings,
    load_text_embeddings,
    save_embeddings,
    save_text_embeddings,
    synth_generate,
)
from tpsda.model import ModelStructure, random_model
from tpsda.vmf import vmf_fit_ml


def random_set(rng, n, d, labels=True):
    X = rng.normal(size=(n, d)).astype(np.float32).astype(float)
    lab = [f"s{i % 3}" for i in range(n)] if labels else None
    return EmbeddingSet(X, [f"utt{i}" for i in range(n)], lab)


class TestEmbeddingSet:
    def test_duplicate_ids(self):
        with pytest.raises(ValueError, match="duplicate"):
            EmbeddingSet(np.zeros((2, 3)), ["a", "a"])

    def test_id_count(self):
        with pytest.raises(ValueError):
            EmbeddingSet(np.zeros((2, 3)), ["a"])

    def test_rows_and_subset(self):
        es = random_set(np.random.default_rng(0), 6, 4)
        np.testing.assert_array_equal(es.rows(["utt4", "utt1"]), es.X[[4, 1]])
        with pytest.raises(KeyError):
            es.rows(["nope"])
        sub = es.subset(np.array([True, False] * 3))
        assert sub.ids == ("utt0", "utt2", "utt4") and sub.labels == ("s0", "s2", "s1")


class TestFiles:
    @pytest.mark.parametrize("labels", [True, False])
    def test_round_trip(self, tmp_path, labels):
        es = random_set(np.random.default_rng(1), 20, 7, labels)
        save_embeddings(es, tmp_path / "e.bin")
        back = load_embeddings(tmp_path / "e.bin")
        assert back.X.tobytes() == es.X.tobytes()
        assert back.ids == es.ids and back.labels == es.labels
        save_embeddings(back, tmp_path / "f.bin")
        assert (tmp_path / "e.bin").read_bytes() == (tmp_path / "f.bin").read_bytes()

    def test_unicode_ids(self, tmp_path):
        es = EmbeddingSet(np.ones((1, 2)), ["spké/一"], ["ß"])
        save_embeddings(es, tmp_path / "e.bin")
        assert load_embeddings(tmp_path / "e.bin").ids == es.ids

    @pytest.mark.parametrize("cut", [4, 12, 30, -3])
    def test_truncated(self, tmp_path, cut):
        save_embeddings(random_set(np.random.default_rng(2), 3, 4), tmp_path / "e.bin")
        data = (tmp_path / "e.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(data[:cut])
        with pytest.raises(ValueError):
            load_embeddings(tmp_path / "t.bin")

    def test_trailing_bytes(self, tmp_path):
        save_embeddings(random_set(np.random.default_rng(2), 3, 4), tmp_path / "e.bin")
        (tmp_path / "t.bin").write_bytes((tmp_path / "e.bin").read_bytes() + b"\x00")
        with pytest.raises(ValueError):
            load_embeddings(tmp_path / "t.bin")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "e.bin").write_bytes(b"NOTMAGIC" + bytes(40))
        with pytest.raises(ValueError):
            load_embeddings(tmp_path / "e.bin")

    def test_empty_set(self, tmp_path):
        es = EmbeddingSet(np.zeros((0, 5)), [])
        save_embeddings(es, tmp_path / "e.bin")
        back = load_embeddings(tmp_path / "e.bin")
        assert len(back) == 0 and back.X.shape == (0, 5)

    def test_text_round_trip(self, tmp_path):
        es = random_set(np.random.default_rng(3), 5, 3, labels=False)
        save_text_embeddings(es, tmp_path / "e.txt")
        back = load_text_embeddings(tmp_path / "e.txt")
        assert back.X.tobytes() == es.X.tobytes() and back.ids == es.ids

    def test_load_any_with_labels(self, tmp_path):
        es = random_set(np.random.default_rng(4), 4, 3, labels=False)
        save_text_embeddings(es, tmp_path / "e.txt")
        save_embeddings(es, tmp_path / "e.bin")
        (tmp_path / "lab").write_text("".join(f"{i}\tspk{k % 2}\n" for k, i in enumerate(es.ids)))
        for name in ("e.txt", "e.bin"):
            back = load_any(tmp_path / name, tmp_path / "lab")
            assert back.labels == ("spk0", "spk1", "spk0", "spk1")

    def test_text_errors(self, tmp_path):
        (tmp_path / "a.txt").write_text("x 1 2\ny 1\n")
        with pytest.raises(ValueError):
            load_text_embeddings(tmp_path / "a.txt")
        (tmp_path / "b.txt").write_text("x 1 q\n")
        with pytest.raises(ValueError):
            load_text_embeddings(tmp_path / "b.txt")


class TestLda:
    def test_two_classes_on_axis(self):
        # exact points: within-class scatter is zero, only the regularizer remains
        X = np.array([[1.0, 0, 0], [-1.0, 0, 0]] * 3)
        V = lda(X, ["a", "b"] * 3, 1)
        direction = V[:, 0] / np.linalg.norm(V[:, 0])
        np.testing.assert_allclose(direction, [1.0, 0, 0], atol=1e-12)

    def test_two_noisy_classes_on_axis(self):
        rng = np.random.default_rng(5)
        X = np.array([[1.0, 0, 0], [-1.0, 0, 0]] * 500) + 0.1 * rng.normal(size=(1000, 3))
        V = lda(X - X.mean(axis=0), ["a", "b"] * 500, 1)
        direction = V[:, 0] / np.linalg.norm(V[:, 0])
        assert direction[0] > 0.99

    def test_rank_bound(self):
        X = np.random.default_rng(6).normal(size=(30, 5))
        with pytest.raises(ValueError):
            lda(X, [i % 3 for i in range(30)], 3)
        with pytest.raises(ValueError):
            lda(X, [i % 10 for i in range(30)], 6)

    def test_whitens_within_class(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(400, 6)) @ rng.normal(size=(6, 6))
        labels = np.repeat(np.arange(20), 20)
        V = lda(X, labels, 4)
        Y = X @ V
        means = np.array([Y[labels == k].mean(axis=0) for k in range(20)])
        W = sum((Y[labels == k] - means[k]).T @ (Y[labels == k] - means[k]) for k in range(20))
        # generalized eigenvectors are orthonormal under the regularized within-class scatter
        Xc = X - np.array([X[labels == k].mean(axis=0) for k in range(20)])[labels]
        Sw = Xc.T @ Xc
        Sw += 1e-6 * np.trace(Sw) / 6 * np.eye(6)
        np.testing.assert_allclose(V.T @ Sw @ V, np.eye(4), atol=1e-10)
        # and with the regularizer removed the within-class scatter is still nearly diagonal
        off = W - np.diag(np.diag(W))
        assert np.max(np.abs(off)) < 1e-3 * np.max(np.diag(W))


class TestPreprocessor:
    def test_centering_only(self):
        es = random_set(np.random.default_rng(8), 10, 4)
        prep = fit_preprocessor(es)
        assert prep.projection is None and prep.out_dim == 4
        np.testing.assert_allclose(prep.mean, es.X.mean(axis=0))

    def test_centered_input(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(10, 4))
        X -= X.mean(axis=0)
        np.testing.assert_allclose(fit_preprocessor(EmbeddingSet(X, list("abcdefghij"))).mean, 0.0, atol=1e-15)

    def test_unit_output(self):
        es = random_set(np.random.default_rng(10), 50, 6)
        out = apply_preprocessor(fit_preprocessor(es), es)
        np.testing.assert_allclose(np.linalg.norm(out.X, axis=1), 1.0, atol=1e-12)
        assert out.ids == es.ids and out.labels == es.labels

    def test_not_idempotent(self):
        rng = np.random.default_rng(11)
        es = EmbeddingSet(rng.normal(size=(40, 5)) + 3.0, [str(i) for i in range(40)])
        prep = fit_preprocessor(es)
        once = apply_preprocessor(prep, es)
        twice = apply_preprocessor(prep, once)
        assert not np.allclose(once.X, twice.X)

    def test_lda_256_to_100(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(150, 256)) + np.repeat(rng.normal(size=(120, 256)), [2] * 30 + [1] * 90, axis=0)
        es = EmbeddingSet(X, [str(i) for i in range(150)], [str(k) for k in np.repeat(np.arange(120), [2] * 30 + [1] * 90)])
        prep = fit_preprocessor(es, lda_dim=100)
        out = apply_preprocessor(prep, es)
        assert out.dim == 100
        np.testing.assert_allclose(np.linalg.norm(out.X, axis=1), 1.0, atol=1e-12)

    def test_lda_needs_labels(self):
        with pytest.raises(ValueError):
            fit_preprocessor(random_set(np.random.default_rng(13), 10, 4, labels=False), lda_dim=1)

    def test_zero_row_reported(self):
        X = np.array([[1.0, 2.0], [3.0, 4.0], [2.0, 3.0]])
        es = EmbeddingSet(X, ["a", "b", "mid"])
        with pytest.raises(ValueError, match="mid"):
            apply_preprocessor(fit_preprocessor(es), es)

    def test_dimension_mismatch(self):
        prep = Preprocessor(np.zeros(3))
        with pytest.raises(ValueError):
            apply_preprocessor(prep, random_set(np.random.default_rng(14), 4, 5))

    @pytest.mark.parametrize("lda_dim", [None, 2])
    def test_save_load_bit_exact(self, tmp_path, lda_dim):
        es = random_set(np.random.default_rng(15), 30, 5)
        prep = fit_preprocessor(es, lda_dim)
        prep.save(tmp_path / "p")
        back = Preprocessor.load(tmp_path / "p")
        assert back.mean.tobytes() == prep.mean.tobytes()
        if lda_dim:
            assert back.projection.tobytes() == prep.projection.tobytes()
        else:
            assert back.projection is None


class TestSynth:
    def test_deterministic(self):
        model = random_model(ModelStructure(8, [3, 2], 1), 20.0, seed=0)
        a = synth_generate(model, 5, 3, seed=1)
        b = synth_generate(model, 5, 3, seed=1)
        assert a.X.tobytes() == b.X.tobytes() and a.ids == b.ids and a.labels == b.labels
        assert a.ids[4] == "spk1-1" and a.labels[4] == "spk1"
        np.testing.assert_allclose(np.linalg.norm(a.X, axis=1), 1.0, atol=1e-12)

    def test_concentrated_speakers(self):
        model = random_model(ModelStructure(8, [3, 2], 2), 1e6, seed=2)
        data = synth_generate(model, 10, 4, seed=3)
        for k in range(10):
            X = data.X[4 * k: 4 * k + 4]
            assert np.min(X @ X.T) > 1 - 1e-4

    def test_within_speaker_concentration(self):
        # single full factor: observations are VMF(z, kappa) around the speaker point
        model = random_model(ModelStructure(6, [6], 1), 40.0, seed=4)
        data = synth_generate(model, 1, 20_000, seed=5)
        fitted = vmf_fit_ml(data.X)
        assert fitted.kappa == pytest.approx(40.0, rel=0.05)
