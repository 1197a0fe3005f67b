from fractions import Fraction

import pytest

from spx.config import RunConfig
from spx.cost import ROWS, benchmark, flops_count
from spx.model import Model

TINY = ["image_h=32", "image_w=32", "channels=8", "backbone_channels=4,4,8,8,8", "grid_h=2", "grid_w=2",
        "tok_layers=1", "tok_heads=2", "cls_layers=1", "cls_heads=2", "n_classes=3"]
CITYSCAPES = ["image_h=1024", "image_w=2048", "grid_h=32", "grid_w=64", "n_classes=19"]


class TestFlops:
    def test_cityscapes_spatial_ratio(self):
        rep = flops_count(RunConfig.parse("", CITYSCAPES))
        assert rep.spatial_ratio == Fraction(1, 1024)
        assert rep.quadratic_ratio == Fraction(1, 1024 ** 2)
        assert float(rep.quadratic_ratio) == pytest.approx(9.54e-7, rel=1e-3)

    @pytest.mark.parametrize("g,h", [(2, 32), (4, 64), (3, 96)])
    def test_quadratic_ratio_exact(self, g, h):
        rep = flops_count(RunConfig.parse("", [f"image_h={h}", f"image_w={h}", f"grid_h={g}", f"grid_w={g}"]))
        assert rep.quadratic_ratio == Fraction(g * g, h * h) ** 2

    def test_rows_and_totals(self):
        rep = flops_count(RunConfig.parse("", TINY))
        assert tuple(r.name for r in rep.rows) == ROWS
        assert rep.total_flops == sum(r.flops for r in rep.rows)
        assert rep.total_params == sum(r.params for r in rep.rows)

    def test_param_counts_match_model(self):
        cfg = RunConfig.parse("", TINY)
        assert flops_count(cfg).total_params == Model.create(cfg.model_config()).n_params()

    def test_zero_layer_classifier(self):
        cfg = RunConfig.parse("", TINY + ["cls_layers=0"])
        row = flops_count(cfg).row("Superpixel Self-Attention")
        assert row.flops == 2 * 4 * 8 * 3  # only the linear class head remains

    def test_hand_count_self_attention(self):
        cfg = RunConfig.parse("", TINY)
        T, C = 4, 8
        expected = 4 * 2 * T * C * C + 4 * T * T * C + 2 * T * C * 3
        assert flops_count(cfg).row("Superpixel Self-Attention").flops == expected

    def test_backbone_conv_formula(self):
        cfg = RunConfig.parse("", TINY)
        dims = [(16, 3, 4), (8, 4, 4), (4, 4, 8), (2, 8, 8), (1, 8, 8)]
        expected = sum(2 * s * s * ci * co * 9 for s, ci, co in dims)
        assert flops_count(cfg).row("Backbone").flops == expected

    def test_json_and_table_agree(self):
        rep = flops_count(RunConfig.parse("", TINY))
        d = rep.to_dict()
        table = rep.table()
        for r in d["rows"]:
            assert str(r["flops"]) in table and str(r["params"]) in table
        assert str(d["total"]["flops"]) in table


class TestBenchmark:
    def test_schema_stable_across_repeats(self):
        cfg = RunConfig.parse("", TINY)
        a, b = benchmark(cfg, repeats=1), benchmark(cfg, repeats=9)
        assert [r.name for r in a.rows] == [r.name for r in b.rows] == list(ROWS)
        assert set(a.to_dict()) == set(b.to_dict())

    def test_total_is_component_sum(self):
        rep = benchmark(RunConfig.parse("", TINY), repeats=3)
        assert rep.total_ms == pytest.approx(sum(r.ms for r in rep.rows), abs=1e-3)
        assert all(r.ms > 0 for r in rep.rows)
        assert rep.overhead_ms is not None

    def test_more_tokenizer_layers_slower(self):
        base = ["image_h=64", "image_w=64", "channels=32", "grid_h=4", "grid_w=4"]
        t1 = benchmark(RunConfig.parse("", base + ["tok_layers=1"]), repeats=7).row("Superpixel Tokenization").ms
        t2 = benchmark(RunConfig.parse("", base + ["tok_layers=4"]), repeats=7).row("Superpixel Tokenization").ms
        assert t2 > t1

    def test_rejects_zero_repeats(self):
        with pytest.raises(ValueError):
            benchmark(RunConfig.parse("", TINY), repeats=0)
