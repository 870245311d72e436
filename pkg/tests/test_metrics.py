import numpy as np
import pytest

from defectsynth.errors import (
    ContractError,
    DivisionGuardError,
    MetricUndefinedError,
    ProtocolError,
)
from defectsynth.metrics import (
    MetricReport,
    auroc,
    concentration_ratio,
    diversity_proxy,
    localization_ratio,
)
from defectsynth.protocol import LabeledImage, crop_paste_pairs, downstream_protocol
from defectsynth.segmenter import Segmenter, SegmenterConfig, train_segmenter
from defectsynth.textures import gen_normal
from defectsynth.defects import inject_defect, random_spec


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_equal_scores_tie_convention(self):
        assert auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_pair_enumeration_oracle(self):
        scores = [0.1, 0.4, 0.35, 0.8]
        labels = [0, 0, 1, 1]
        # oracle: count positive > negative pairs explicitly
        pos = [s for s, l in zip(scores, labels) if l]
        neg = [s for s, l in zip(scores, labels) if not l]
        wins = sum(
            1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg
        )
        oracle = wins / (len(pos) * len(neg))
        assert oracle == 0.75
        assert auroc(scores, labels) == oracle

    def test_random_inputs_match_pair_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            scores = rng.integers(0, 6, size=30).astype(float)  # many ties
            labels = rng.integers(0, 2, size=30)
            if labels.min() == labels.max():
                continue
            pos = scores[labels > 0]
            neg = scores[labels == 0]
            wins = sum(1.0 if p > n else 0.5 if p == n else 0.0
                       for p in pos for n in neg)
            oracle = wins / (len(pos) * len(neg))
            assert abs(auroc(scores, labels) - oracle) < 1e-12

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        scores = rng.standard_normal(50)
        labels = rng.integers(0, 2, size=50)
        base = auroc(scores, labels)
        assert auroc(3 * scores + 7, labels) == base
        assert auroc(np.exp(scores), labels) == base

    def test_single_class_rejected(self):
        with pytest.raises(MetricUndefinedError):
            auroc([0.1, 0.2], [1, 1])


class TestConcentrationRatio:
    def test_all_mass_inside(self):
        assert concentration_ratio([0.4, 0.6, 0.0], [1, 1, 0]) == 1.0

    def test_uniform_quarter_mask(self):
        att = np.full(16, 1 / 16)
        mask = np.zeros(16)
        mask[:4] = 1
        assert abs(concentration_ratio(att, mask) - 0.25) < 1e-12

    def test_energy_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            att = rng.random(32)
            att /= att.sum()
            mask = (rng.random(32) > 0.7).astype(int)
            r = concentration_ratio(att, mask)
            from defectsynth.guidance import energy
            from defectsynth.tensor import Tensor
            e = energy(Tensor(att), mask).item()
            assert abs((1.0 - r) ** 2 - e) < 1e-10

    def test_zero_mass_guarded(self):
        with pytest.raises(DivisionGuardError):
            concentration_ratio(np.zeros(4), [1, 0, 0, 0])


class TestDiversityProxy:
    def test_identical_images_zero(self):
        img = gen_normal("noise", 1, 32)
        fn = lambda im: im.reshape(-1)
        assert diversity_proxy([img, img.copy(), img.copy()], fn) == 0.0

    def test_pair_counting(self):
        x = gen_normal("stripes", 1, 32)
        y = gen_normal("checker", 2, 32)
        fn = lambda im: im.reshape(-1)
        d2 = diversity_proxy([x, y], fn)
        d4 = diversity_proxy([x, x.copy(), y, y.copy()], fn)
        # {x,x,y,y}: 4 of 6 pairs are (x,y): mean = (4/6) d(x,y)
        assert abs(d4 - (4 / 6) * d2) < 1e-12

    def test_permutation_invariance(self):
        imgs = [gen_normal(k, s, 32) for s, k in enumerate(["stripes", "checker", "noise"])]
        fn = lambda im: im.reshape(-1)
        a = diversity_proxy(imgs, fn)
        b = diversity_proxy(imgs[::-1], fn)
        assert a == b

    def test_needs_two(self):
        with pytest.raises(ContractError):
            diversity_proxy([gen_normal("noise", 1, 32)], lambda im: im.reshape(-1))


class TestLocalizationRatio:
    def test_change_only_inside_mask(self):
        base = gen_normal("stripes", 3, 32)
        gen, mask = inject_defect(base, random_spec("spot", 32, np.random.default_rng(0)))
        res = localization_ratio(gen, base, mask)
        assert res.ratio == 1.0 and not res.no_change

    def test_no_change_flag(self):
        base = gen_normal("stripes", 4, 32)
        res = localization_ratio(base, base.copy(), np.ones((32, 32)))
        assert res.ratio == 0.0 and res.no_change

    def test_uniform_change_mask_fraction(self):
        base = np.full((32, 32, 3), 0.4)
        gen = base + 0.1
        mask = np.zeros((32, 32))
        mask[:8, :16] = 1  # 12.5% of pixels
        res = localization_ratio(gen, base, mask)
        assert abs(res.ratio - 0.125) < 1e-12


def _labeled_set(seed, n, size=32):
    out = []
    rng = np.random.default_rng(seed)
    kinds = ["scratch", "spot", "crack", "contamination"]
    texs = ["stripes", "checker", "noise", "cellular"]
    for i in range(n):
        base = gen_normal(texs[i % 4], seed * 997 + i, size)
        if i % 2 == 0:
            img, mask = inject_defect(base, random_spec(kinds[i % 4], size, rng))
        else:
            img, mask = base, np.zeros((size, size), dtype=np.uint8)
        out.append(LabeledImage(image=img, mask=mask, source_id=1000 * seed + i))
    return out


class TestDownstreamProtocol:
    def test_overlap_rejected(self):
        test_set = _labeled_set(1, 8)
        with pytest.raises(ProtocolError):
            downstream_protocol(test_set, [gen_normal("noise", 5, 32)], test_set,
                                seed=0, steps=1)

    def test_overfit_detector_on_test_set(self):
        # sanity-violation mode: training on the test set must overfit
        test_set = [p for p in _labeled_set(2, 24)]
        normals = [p.image for p in test_set if not p.mask.any()]
        rep = downstream_protocol(test_set, normals, test_set, seed=0,
                                  steps=500, allow_overlap=True)
        assert rep.metrics["pixel_auroc"] > 0.99

    def test_untrained_segmenter_near_chance(self):
        test_set = _labeled_set(3, 16)
        vals = []
        for seed in range(10):
            seg = Segmenter(SegmenterConfig(seed=seed))
            scores = seg.predict(np.stack([p.image for p in test_set]))
            labels = np.stack([p.mask for p in test_set]).reshape(-1)
            vals.append(auroc(scores.reshape(-1), labels))
        assert 0.4 <= float(np.mean(vals)) <= 0.6

    def test_report_records_counts_and_seeds(self):
        train = _labeled_set(4, 8)
        test_set = _labeled_set(5, 8)
        normals = [gen_normal("noise", 77, 32)]
        rep = downstream_protocol(train, normals, test_set, seed=11, steps=5)
        assert rep.counts["pixel_auroc"] == len(test_set)
        assert rep.seeds["pixel_auroc"] == 11
        assert "image_auroc" in rep.metrics


class TestCropPaste:
    def test_pairs_have_defect_labels(self):
        anoms = [p for p in _labeled_set(6, 8) if p.mask.any()]
        normals = [gen_normal("stripes", 31, 32), gen_normal("checker", 32, 32)]
        pairs = crop_paste_pairs(anoms, normals, count=5, seed=0)
        assert len(pairs) == 5
        for p in pairs:
            assert p.mask.any()
            assert p.source_id == -1


class TestMetricReport:
    def test_write_and_format(self, tmp_path):
        rep = MetricReport(config_hash="abc123")
        rep.add("pixel_auroc", 0.91, count=10, seed=3)
        txt, tsv = rep.write(tmp_path / "report")
        assert "pixel_auroc" in txt.read_text()
        lines = tsv.read_text().strip().split("\n")
        assert lines[0].startswith("metric\tvalue")
        assert "abc123" in lines[1]
