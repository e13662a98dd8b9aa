import filecmp
from pathlib import Path

import numpy as np
import pytest

from sdst.features import (Annotation, FeatureDataset, FrozenPooler,
                           RawLevelFeatures, SynthConfig, pool_level,
                           read_annotations, read_features, synth_generate,
                           write_annotations, write_features)


def small_cfg(**kw):
    base = dict(num_samples=4, t=16, l_v=3, f_v=8, f_t=6, l_text=4, k=2,
                max_moments=2, min_len_frames=3, noise_sigma=0.2)
    base.update(kw)
    return SynthConfig(**base)


class TestPoolLevel:
    def test_single_token_all_strategies_identical(self):
        raw = np.random.default_rng(0).normal(size=(5, 1, 4)).astype(
            np.float32)
        pooler = FrozenPooler(np.ones(1, dtype=np.float32))
        cls = pool_level(raw, "cls")
        avg = pool_level(raw, "avg")
        ada = pool_level(raw, "adaptive", pooler)
        assert np.allclose(cls, avg) and np.allclose(avg, ada)

    def test_uniform_pooler_equals_avg(self):
        raw = np.random.default_rng(1).normal(size=(5, 4, 6)).astype(
            np.float32)
        pooler = FrozenPooler(np.full(4, 0.25, dtype=np.float32))
        assert np.allclose(pool_level(raw, "adaptive", pooler),
                           pool_level(raw, "avg"), atol=1e-6)

    def test_adaptive_matches_weighted_sum_loop(self):
        rng = np.random.default_rng(2)
        raw = rng.normal(size=(4, 3, 5)).astype(np.float32)
        w = rng.dirichlet(np.ones(3)).astype(np.float32)
        pooler = FrozenPooler(w)
        out = pool_level(raw, "adaptive", pooler)
        for t in range(4):
            ref = sum(w[j] * raw[t, j] for j in range(3))
            assert np.allclose(out[t], ref, atol=1e-6)

    def test_cls_takes_token_zero(self):
        raw = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        assert np.array_equal(pool_level(raw, "cls"), raw[:, 0])

    def test_unknown_strategy(self):
        with pytest.raises(ValueError, match="unknown pooling strategy"):
            pool_level(np.zeros((2, 2, 2), np.float32), "max")

    def test_adaptive_requires_pooler(self):
        with pytest.raises(ValueError, match="requires a FrozenPooler"):
            pool_level(np.zeros((2, 2, 2), np.float32), "adaptive")

    def test_permutation_equivariant_over_frames(self):
        rng = np.random.default_rng(3)
        raw = rng.normal(size=(6, 3, 4)).astype(np.float32)
        pooler = FrozenPooler(rng.dirichlet(np.ones(3)).astype(np.float32))
        perm = [4, 0, 5, 2, 1, 3]
        for strategy in ("cls", "avg", "adaptive"):
            a = pool_level(raw[perm], strategy, pooler)
            b = pool_level(raw, strategy, pooler)[perm]
            assert np.allclose(a, b)


class TestFrozenPooler:
    def test_weights_immutable(self):
        pooler = FrozenPooler(np.array([0.4, 0.6], np.float32))
        with pytest.raises(ValueError):
            pooler.weights[0] = 1.0

    def test_digest_stable(self):
        a = FrozenPooler(np.array([0.3, 0.7], np.float32))
        b = FrozenPooler(np.array([0.3, 0.7], np.float32))
        assert a.digest() == b.digest()

    def test_from_seed_deterministic_and_tilted(self):
        a = FrozenPooler.from_seed(5, 4, favored_token=1)
        b = FrozenPooler.from_seed(5, 4, favored_token=1)
        assert a.digest() == b.digest()
        assert a.weights.argmax() == 1
        assert a.weights.sum() == pytest.approx(1.0, abs=1e-6)


class TestFeatureFiles:
    def _features(self, seed=0):
        rng = np.random.default_rng(seed)
        return RawLevelFeatures(
            video=rng.normal(size=(2, 4, 3, 5)).astype(np.float32),
            text=rng.normal(size=(2, 3, 6)).astype(np.float32))

    def test_bit_exact_roundtrip(self, tmp_path):
        feats = self._features()
        path = tmp_path / "x.feat"
        write_features(path, feats)
        back = read_features(path)
        assert np.array_equal(back.video, feats.video)
        assert np.array_equal(back.text, feats.text)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.feat"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 40)
        with pytest.raises(ValueError, match="bad-magic"):
            read_features(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "v.feat"
        write_features(path, self._features())
        raw = bytearray(path.read_bytes())
        raw[8] += 1
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="unsupported-version"):
            read_features(path)

    def test_truncation(self, tmp_path):
        path = tmp_path / "t.feat"
        write_features(path, self._features())
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 8])
        with pytest.raises(ValueError, match="truncated"):
            read_features(path)


class TestAnnotations:
    def test_roundtrip(self, tmp_path):
        anns = [Annotation(sample_id="s0", duration=16.0,
                           moments=[[0.1, 0.4]], saliency=[0, 1, 1, 0],
                           query_id=0)]
        path = tmp_path / "a.jsonl"
        write_annotations(path, anns)
        back = read_annotations(path)
        assert back == anns


class TestSynthGenerate:
    def test_deterministic_bytes(self, tmp_path):
        cfg = small_cfg()
        a, b = tmp_path / "a", tmp_path / "b"
        synth_generate(cfg, 11, a)
        synth_generate(cfg, 11, b)
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert files
        for rel in files:
            assert filecmp.cmp(a / rel, b / rel, shallow=False), rel

    def test_different_seed_differs(self, tmp_path):
        cfg = small_cfg()
        a, b = tmp_path / "a", tmp_path / "b"
        synth_generate(cfg, 11, a)
        synth_generate(cfg, 12, b)
        same = filecmp.cmp(a / "features" / "s00000.feat",
                           b / "features" / "s00000.feat", shallow=False)
        assert not same

    def test_zero_noise_constructive_signal(self, tmp_path):
        cfg = small_cfg(noise_sigma=0.0)
        out = tmp_path / "clean"
        synth_generate(cfg, 3, out)
        ds = FeatureDataset(out)
        feat = ds.features[0]
        ann = ds.annotations[0]
        inside = [t for t, p in enumerate(ann.saliency) if p]
        outside = [t for t, p in enumerate(ann.saliency) if not p]
        carrier = feat.video[0, :, cfg.signal_token, :]
        # all inside frames carry one exact unit direction, outside another
        for t in inside[1:]:
            cos = carrier[t] @ carrier[inside[0]] / (
                np.linalg.norm(carrier[t])
                * np.linalg.norm(carrier[inside[0]]))
            assert cos == pytest.approx(1.0, abs=1e-6)
        if outside:
            cos = carrier[outside[0]] @ carrier[inside[0]] / (
                np.linalg.norm(carrier[outside[0]])
                * np.linalg.norm(carrier[inside[0]]))
            assert abs(cos) < 0.99

    def test_saliency_mask_matches_rasterized_moments(self, tmp_path):
        out = tmp_path / "d"
        synth_generate(small_cfg(num_samples=8), 4, out)
        for ann in read_annotations(out / "annotations.jsonl"):
            t = len(ann.saliency)
            for frame in range(t):
                pos = frame / (t - 1)
                expected = int(any(m[0] <= pos <= m[1]
                                   for m in ann.moments))
                assert ann.saliency[frame] == expected

    def test_moments_valid_and_disjoint(self, tmp_path):
        out = tmp_path / "d"
        synth_generate(small_cfg(num_samples=16, max_moments=3), 9, out)
        for ann in read_annotations(out / "annotations.jsonl"):
            ms = sorted(ann.moments)
            assert 1 <= len(ms) <= 3
            for s, e in ms:
                assert 0.0 <= s < e <= 1.0
            for (s1, e1), (s2, e2) in zip(ms, ms[1:]):
                assert e1 < s2

    def test_cls_token_uninformative_about_query_position(self, tmp_path):
        # the CLS token is constant across frames per (sample, level)
        out = tmp_path / "d"
        synth_generate(small_cfg(noise_sigma=0.0), 5, out)
        ds = FeatureDataset(out)
        cls_rows = ds.features[0].video[0, :, 0, :]
        assert np.allclose(cls_rows, cls_rows[0], atol=1e-6)

    def test_packing_failure_raises(self, tmp_path):
        cfg = small_cfg(t=8, max_moments=3, min_len_frames=8)
        with pytest.raises(RuntimeError, match="moment-packing-failed"):
            synth_generate(cfg, 0, tmp_path / "x")


class TestFeatureDataset:
    def test_loads_and_pools(self, tmp_path):
        cfg = small_cfg()
        synth_generate(cfg, 2, tmp_path / "d")
        ds = FeatureDataset(tmp_path / "d")
        assert len(ds) == 4
        assert ds.shape == {"k": 2, "t": 16, "l_v": 3, "f_v": 8,
                            "l": 4, "f_t": 6}
        video, text = ds.pooled("adaptive")
        assert video.shape == (4, 2, 16, 8)
        assert text.shape == (4, 2, 4, 6)

    def test_empty_dataset_errors(self, tmp_path):
        root = tmp_path / "d"
        (root / "features").mkdir(parents=True)
        (root / "meta.yaml").write_text("pooler_weights: [1.0]\n")
        (root / "annotations.jsonl").write_text("")
        with pytest.raises(ValueError, match="empty-dataset"):
            FeatureDataset(root)
