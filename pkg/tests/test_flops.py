import pytest

from ltmerge.flops import merge_flops_efficient, merge_flops_regular, model_flops
from ltmerge.transformer import ModelSpec


def test_merge_overhead_formulas():
    assert merge_flops_regular(8, 4, 2, 8) == 600
    assert merge_flops_efficient(8, 4, 2, 8) - merge_flops_regular(8, 4, 2, 8) == 8 * 4 * 2


def test_plain_toy_model_hand_count():
    # N=16, D=32, hidden=64, one head, patch 4x4, 3 classes
    embed = 2 * 16 * 16 * 32 + 16 * 32 + 16 * 32
    attn = 8 * 16 * 32 + 2 * 4 * 16 * 32 * 32 + 2 * 2 * 16 * 16 * 32 + 5 * 16 * 16 + 16 * 32
    mlp = 8 * 16 * 32 + (2 * 16 * 32 * 64 + 16 * 64) + 16 * 64 + (2 * 16 * 64 * 32 + 16 * 32) + 16 * 32
    head = 16 * 32 + 2 * 32 * 3 + 3
    expected = embed + 2 * (attn + mlp) + head
    assert expected == 634051
    spec = ModelSpec.build(2, 1.0, "regular")
    assert model_flops(spec).total == expected
    assert model_flops(ModelSpec.build(2, 0.5, "regular"), merge=False).total == expected


@pytest.mark.parametrize("depth", [2, 4])
def test_monotone_in_ratio(depth):
    totals = [model_flops(ModelSpec.build(depth, r, "regular")).total for r in (1.0, 0.75, 0.5, 0.25)]
    assert all(a >= b for a, b in zip(totals, totals[1:]))
    assert totals[2] < totals[0]


def test_efficient_grid_floor_breaks_monotonicity():
    # a 4x4 grid at sqrt(0.75) rounds back up to 4x4: mask overhead with no token saving
    full = model_flops(ModelSpec.build(4, 1.0, "efficient")).total
    assert model_flops(ModelSpec.build(4, 0.75, "efficient")).total > full
    assert model_flops(ModelSpec.build(4, 0.25, "efficient")).total < full


def test_report_totals_and_csv():
    rep = model_flops(ModelSpec.build(2, 0.5, "regular"))
    assert rep.total == sum(b.total for b in rep.blocks)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "name,n_in,n_out,attention,mlp,merge_overhead,total"
    assert lines[-1].endswith(str(rep.total))
    assert rep.to_text().splitlines()[-2].split()[-1] == str(rep.total)
