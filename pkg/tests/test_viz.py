"""Projection, alignment, and geometry-report oracles."""
from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from marginlm.corpus import build_vocab
from marginlm.viz import (NormReport, align, angle_report, dispersion,
                          norm_report, pca, project, write_angle_tsv,
                          write_norms_tsv, write_polar_svg,
                          write_projection_tsv)

rng = np.random.default_rng(42)


def fake_vocab(n):
    line = " ".join(f"w{i} " * (n - i) for i in range(n))
    return build_vocab([line], max_size=n - 2)


class TestPca:
    def test_rank_two_matrix_recovered_exactly(self):
        basis = rng.normal(size=(2, 7))
        weights = rng.normal(size=(30, 2))
        x = weights @ basis
        coords, comps, mean = pca(x, dims=2)
        rebuilt = coords @ comps + mean
        assert_allclose(rebuilt, x, atol=1e-9)

    def test_sign_convention_deterministic(self):
        x = rng.normal(size=(20, 5))
        a = pca(x, 3)
        b = pca(x.copy(), 3)
        assert_array_equal(a[0], b[0])
        assert_array_equal(a[1], b[1])

    def test_components_orthonormal(self):
        x = rng.normal(size=(40, 6))
        _, comps, _ = pca(x, 4)
        assert_allclose(comps @ comps.T, np.eye(4), atol=1e-12)


class TestProject:
    def test_same_seed_identical(self):
        vocab = fake_vocab(24)
        w = rng.normal(size=(vocab.size, 8))
        a = project(w, vocab, top_k=20, seed=5, tsne_iters=260)
        b = project(w, vocab, top_k=20, seed=5, tsne_iters=260)
        assert_array_equal(a.xy, b.xy)
        assert a.words == b.words

    def test_identical_rows_coincide(self):
        vocab = fake_vocab(24)
        w = np.tile(rng.normal(size=8), (vocab.size, 1))
        result = project(w, vocab, top_k=20, seed=0, tsne_iters=260)
        spread = np.linalg.norm(result.xy - result.xy[0], axis=1)
        assert np.all(spread < 1e-6)

    def test_top_k_words_are_most_frequent(self):
        vocab = fake_vocab(24)
        w = rng.normal(size=(vocab.size, 8))
        result = project(w, vocab, top_k=5, seed=0, tsne_iters=260)
        assert result.words == vocab.words[:5]

    def test_angles_wrapped(self):
        vocab = fake_vocab(24)
        w = rng.normal(size=(vocab.size, 8))
        result = project(w, vocab, top_k=20, seed=1, tsne_iters=260)
        assert np.all(result.angle > -np.pi)
        assert np.all(result.angle <= np.pi)
        assert_allclose(result.radius,
                        np.linalg.norm(result.xy, axis=1), rtol=1e-12)

    def test_tiny_top_k_rejected(self):
        vocab = fake_vocab(24)
        w = rng.normal(size=(vocab.size, 8))
        with pytest.raises(ValueError, match="at least 3"):
            project(w, vocab, top_k=2)
        with pytest.raises(ValueError, match="exceeds"):
            project(w, vocab, top_k=vocab.size + 1)


class TestAlign:
    @pytest.fixture
    def projection(self):
        vocab = fake_vocab(24)
        w = rng.normal(size=(vocab.size, 8))
        return project(w, vocab, top_k=20, seed=2, tsne_iters=260)

    def test_reference_lands_at_unit_angle_zero(self, projection):
        ref = projection.words[3]
        aligned = align(projection, ref)
        assert aligned.angle[3] == 0.0
        assert aligned.radius[3] == 1.0
        assert aligned.reference == ref

    def test_relative_geometry_preserved(self, projection):
        aligned = align(projection, projection.words[0])

        def pairwise_circular(a):
            d = a[:, None] - a[None, :]
            return np.mod(d + np.pi, 2 * np.pi) - np.pi

        assert_allclose(pairwise_circular(aligned.angle),
                        pairwise_circular(projection.angle), atol=1e-12)
        ratio = aligned.radius / projection.radius
        assert_allclose(ratio, ratio[0], rtol=1e-12)

    def test_idempotent(self, projection):
        once = align(projection, projection.words[1])
        twice = align(once, projection.words[1])
        assert_array_equal(once.xy, twice.xy)
        assert_array_equal(once.angle, twice.angle)
        assert_array_equal(once.radius, twice.radius)

    def test_missing_reference_rejected(self, projection):
        with pytest.raises(ValueError, match="not in projection"):
            align(projection, "nonexistent")

    def test_origin_reference_rejected(self, projection):
        r = projection.radius.copy()
        r[5] = 0.0
        broken = type(projection)(words=projection.words, xy=projection.xy,
                                  radius=r, angle=projection.angle,
                                  seed=projection.seed)
        with pytest.raises(ValueError, match="origin"):
            align(broken, projection.words[5])


class TestAngleReport:
    def test_self_pair_is_zero(self):
        vocab = fake_vocab(10)
        w = rng.normal(size=(vocab.size, 6))
        got = angle_report(w, vocab, [("w0", "w0")])
        assert got[0] == 0.0

    def test_opposite_pair_is_pi(self):
        vocab = fake_vocab(10)
        w = rng.normal(size=(vocab.size, 6))
        w[vocab.id_of("w1")] = -2.0 * w[vocab.id_of("w0")]
        got = angle_report(w, vocab, [("w0", "w1")])
        assert got[0] == pytest.approx(np.pi, abs=1e-12)

    def test_matches_brute_force(self):
        vocab = fake_vocab(10)
        w = rng.normal(size=(vocab.size, 6))
        a, b = w[vocab.id_of("w2")], w[vocab.id_of("w5")]
        expect = np.arccos(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
        got = angle_report(w, vocab, [("w2", "w5")])
        assert_allclose(got[0], expect, rtol=1e-9)

    def test_oov_named_in_error(self):
        vocab = fake_vocab(10)
        w = rng.normal(size=(vocab.size, 6))
        with pytest.raises(ValueError, match="'zzz'"):
            angle_report(w, vocab, [("w0", "zzz")])

    def test_orthogonal_invariance(self):
        vocab = fake_vocab(10)
        w = rng.normal(size=(vocab.size, 6))
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        pairs = [("w0", "w3"), ("w1", "w4"), ("w2", "w2")]
        assert_allclose(angle_report(w @ q, vocab, pairs),
                        angle_report(w, vocab, pairs), atol=1e-9)


class TestDispersion:
    def test_identical_vectors_zero(self):
        w = np.tile([1.0, 2.0, 3.0], (6, 1))
        assert dispersion(w, 6) == 0.0

    def test_orthonormal_pair(self):
        assert dispersion(np.eye(2), 2) == pytest.approx(np.pi / 2)

    def test_gaussian_high_dim_near_right_angle(self):
        w = np.random.default_rng(0).normal(size=(50, 200))
        assert abs(dispersion(w, 50) - np.pi / 2) < 0.1

    def test_orthogonal_invariance(self):
        w = rng.normal(size=(12, 7))
        q, _ = np.linalg.qr(rng.normal(size=(7, 7)))
        assert_allclose(dispersion(w @ q, 12), dispersion(w, 12), atol=1e-9)

    def test_needs_two_vectors(self):
        with pytest.raises(ValueError, match="at least 2"):
            dispersion(np.eye(3), 1)


class TestNormReport:
    def test_perfect_linear_relation(self):
        vocab = fake_vocab(12)
        dirs = rng.normal(size=(vocab.size, 5))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        w = dirs * np.log(np.maximum(vocab.counts, 1))[:, None]
        report = norm_report(w, vocab)
        assert report.correlation == pytest.approx(1.0, abs=1e-12)
        assert not report.degenerate

    def test_constant_norms_degenerate(self):
        vocab = fake_vocab(12)
        report = norm_report(np.eye(vocab.size), vocab)
        assert report.correlation == 0.0
        assert report.degenerate

    def test_random_norms_uncorrelated(self):
        line = " ".join(f"w{i} " * (1000 - i) for i in range(1000))
        vocab = build_vocab([line])
        w = np.random.default_rng(3).normal(size=(vocab.size, 4))
        report = norm_report(w, vocab)
        assert abs(report.correlation) < 0.2


class TestFileOutputs:
    @pytest.fixture
    def projection(self):
        vocab = fake_vocab(24)
        w = np.random.default_rng(1).normal(size=(vocab.size, 8))
        return align(project(w, vocab, top_k=12, seed=3, tsne_iters=260),
                     vocab.words[0])

    def test_projection_tsv_format(self, projection, tmp_path):
        p = tmp_path / "proj.tsv"
        write_projection_tsv(projection, p)
        lines = p.read_text().splitlines()
        assert len(lines) == 12
        fields = lines[0].split("\t")
        assert fields[0] == projection.words[0]
        assert len(fields) == 5
        float(fields[1]), float(fields[4])

    def test_angle_tsv_format(self, tmp_path):
        p = tmp_path / "angles.tsv"
        write_angle_tsv([("a", "b")], np.array([1.0471975]), p)
        assert p.read_text() == "a\tb\t1.047198\n"

    def test_norms_tsv_has_correlation_footer(self, tmp_path):
        vocab = fake_vocab(12)
        report = norm_report(rng.normal(size=(vocab.size, 5)), vocab)
        p = tmp_path / "norms.tsv"
        write_norms_tsv(report, p)
        lines = p.read_text().splitlines()
        assert len(lines) == vocab.size + 1
        assert lines[-1].startswith("# pearson_norm_logcount\t")

    def test_svg_byte_identical_across_runs(self, projection, tmp_path):
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        write_polar_svg(projection, a, title="run")
        write_polar_svg(projection, b, title="run")
        assert a.read_bytes() == b.read_bytes()
        text = a.read_text()
        assert text.startswith("<svg ")
        assert 'width="800"' in text
        assert text.count("<circle") >= 16  # gridlines + points

    def test_svg_escapes_markup_words(self, projection, tmp_path):
        words = list(projection.words)
        words[0] = "<&>"
        spiked = type(projection)(words=words, xy=projection.xy,
                                  radius=projection.radius,
                                  angle=projection.angle,
                                  seed=projection.seed)
        p = tmp_path / "esc.svg"
        write_polar_svg(spiked, p)
        assert "&lt;&amp;&gt;" in p.read_text()
