import dataclasses

import numpy as np
import pytest

from domainmix.errors import ConfigError
from domainmix.synthgen import (
    BenchmarkSpec,
    Domain,
    SampleSet,
    domain_gap_score,
    dump_csv,
    generate,
    generate_holdout,
    load_csv,
)


def small(**kw):
    base = dict(seed=3, n_ids=(2, 3, 4), k_per_id=(3, 4, 4))
    base.update(kw)
    return BenchmarkSpec(**base)


class TestGenerate:
    def test_counts_and_labels(self):
        b = generate(small())
        assert len(b.train_A) == 6
        assert b.train_A.identities.tolist() == [0, 0, 0, 1, 1, 1]
        assert len(b.train_B) == 12
        assert len(b.query_C) + len(b.gallery_C) == 16

    def test_default_sizes(self):
        b = generate(BenchmarkSpec())
        assert (len(b.train_A), len(b.train_B)) == (256, 192)
        assert len(b.query_C) == 16 * 2 and len(b.gallery_C) == 16 * 6

    def test_deterministic(self):
        a, b = generate(small()), generate(small())
        for s, t in zip((a.train_A, a.train_B, a.query_C, a.gallery_C), (b.train_A, b.train_B, b.query_C, b.gallery_C)):
            assert s.X.tobytes() == t.X.tobytes()
        assert a.digest() == b.digest()
        assert generate(small(seed=4)).digest() != a.digest()

    def test_zero_noise_collapses_identities(self):
        b = generate(small(sigma=0.0))
        X, y = b.train_A.X, b.train_A.identities
        for i in np.unique(y):
            rows = X[y == i]
            assert np.all(rows == rows[0])

    def test_identity_ranges_disjoint(self):
        b = generate(small())
        ya = set(b.train_A.identities.tolist())
        yb = set(b.reveal_B_identities().tolist())
        yc = set(b.query_C.identities.tolist()) | set(b.gallery_C.identities.tolist())
        assert not (ya & yb or ya & yc or yb & yc)

    def test_every_query_has_gallery_match(self):
        b = generate(BenchmarkSpec(seed=11))
        assert set(b.query_C.identities.tolist()) <= set(b.gallery_C.identities.tolist())

    def test_b_identities_hidden(self):
        b = generate(small())
        assert b.train_B.identities is None
        assert all(s.identity is None for s in b.train_B)
        assert all(s.identity is not None for s in b.train_A)
        assert "identities" not in {f.name for f in dataclasses.fields(b)} - {"_truth_B"}
        assert b.reveal_B_identities().shape == (12,)

    def test_samples_carry_domain(self):
        b = generate(small())
        assert {s.domain for s in b.query_C} == {Domain.TargetC}
        assert len({s.id for s in b.train_A} | {s.id for s in b.train_B}) == 18

    def test_too_few_target_samples(self):
        with pytest.raises(ConfigError):
            BenchmarkSpec(k_per_id=(8, 8, 1))

    def test_bad_spec_values(self):
        with pytest.raises(ConfigError):
            BenchmarkSpec(sigma=-0.1)
        with pytest.raises(ConfigError):
            BenchmarkSpec(query_fraction=1.0)

    def test_holdout_is_fresh(self):
        spec = small()
        b, h = generate(spec), generate_holdout(spec, per_identity=2)
        assert h["A"][0].shape == (4, 16)
        assert not np.isin(h["A"][0], b.train_A.X).any()
        assert sorted(set(h["B"][1].tolist())) == sorted(set(b.reveal_B_identities().tolist()))


class TestGapScore:
    def test_same_set(self):
        b = generate(small())
        assert domain_gap_score(b.train_A, b.train_A) == 0.0

    def test_hand_means(self):
        assert domain_gap_score([[0.0, 0.0], [0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(5.0)

    def test_translation_invariance(self, rng):
        a, c = rng.normal(size=(10, 3)), rng.normal(size=(7, 3)) + 1
        v = rng.normal(size=3)
        assert domain_gap_score(a + v, c + v) == pytest.approx(domain_gap_score(a, c), abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            domain_gap_score([], [[1.0]])

    def test_grows_with_offset(self):
        gaps = [domain_gap_score(generate(small(offset_norm=r)).train_A, generate(small(offset_norm=r)).train_B)
                for r in (10.0, 20.0, 40.0)]
        # linear for large offsets: doubling the offset roughly doubles the gap
        assert gaps[0] < gaps[1] < gaps[2]
        assert gaps[2] / gaps[1] == pytest.approx(2.0, rel=0.1)


class TestCsv:
    def test_round_trip_is_lossless(self, tmp_path):
        b = generate(small())
        dump_csv(b, tmp_path / "b.csv")
        c = load_csv(tmp_path / "b.csv", spec=b.spec)
        for s, t in zip((b.train_A, b.train_B, b.query_C, b.gallery_C), (c.train_A, c.train_B, c.query_C, c.gallery_C)):
            assert s.X.tobytes() == t.X.tobytes()
            np.testing.assert_array_equal(s.ids, t.ids)
        np.testing.assert_array_equal(b.query_C.identities, c.query_C.identities)

    def test_hidden_identities_written_empty(self, tmp_path):
        b = generate(small())
        dump_csv(b, tmp_path / "b.csv")
        lines = (tmp_path / "b.csv").read_text().splitlines()
        assert lines[0].split(",")[:4] == ["id", "domain", "identity", "feat_0"]
        real = [ln.split(",") for ln in lines[1:] if ln.split(",")[1] == "RealB"]
        assert len(real) == 12 and all(r[2] == "" for r in real)
        c = load_csv(tmp_path / "b.csv")
        assert c.train_B.identities is None

    def test_reveal_hidden(self, tmp_path):
        b = generate(small())
        dump_csv(b, tmp_path / "b.csv", reveal_hidden=True)
        np.testing.assert_array_equal(load_csv(tmp_path / "b.csv").reveal_B_identities(), b.reveal_B_identities())

    def test_unknown_tag(self, tmp_path):
        (tmp_path / "x.csv").write_text("id,domain,identity,feat_0\n0,Mars,,1.0\n")
        with pytest.raises(ConfigError):
            load_csv(tmp_path / "x.csv")


def test_sample_set_iteration():
    s = SampleSet(np.array([5, 6]), np.zeros((2, 3)), Domain.SynthA, np.array([1, 2]))
    got = [(x.id, x.identity) for x in s]
    assert got == [(5, 1), (6, 2)]
