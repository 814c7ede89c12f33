import pytest

from cisguard.cis import cfi_stats, parse_assembly
from cisguard.corpus import generate_listing, listing_with_cfi_count


class TestGenerateListing:
    def test_parser_agrees_with_tally(self):
        text, tally = generate_listing(5000, seed=2)
        stats = cfi_stats(parse_assembly(text, "gen"))
        assert stats.total_instructions == tally.total_instructions == 5000
        assert stats.jump_count == tally.jump_count
        assert stats.call_count == tally.call_count
        assert stats.return_count == tally.return_count

    def test_seed_reproducible(self):
        assert generate_listing(500, seed=9) == generate_listing(500, seed=9)
        assert generate_listing(500, seed=9)[0] != generate_listing(500, seed=10)[0]

    def test_exact_mode_counts(self):
        _, tally = generate_listing(10_000, seed=4, exact=True)
        assert tally.jump_count == round(10_000 * 0.1545)
        assert tally.call_count == round(10_000 * 0.0481)
        assert tally.return_count == round(10_000 * 0.0057)

    def test_mix_recovered_at_scale(self):
        text, _ = generate_listing(50_000, seed=7)
        stats = cfi_stats(parse_assembly(text, "gen"))
        assert stats.jump_fraction == pytest.approx(0.1545, abs=0.005)
        assert stats.call_fraction == pytest.approx(0.0481, abs=0.005)
        assert stats.return_fraction == pytest.approx(0.0057, abs=0.005)
        assert stats.cfi_fraction == pytest.approx(0.2083, abs=0.005)

    def test_zero_instructions(self):
        text, tally = generate_listing(0, seed=1)
        assert tally.total_instructions == 0
        assert cfi_stats(parse_assembly(text, "gen")).total_instructions == 0

    def test_rejects_bad_mix(self):
        with pytest.raises(ValueError):
            generate_listing(10, jump_fraction=0.9, call_fraction=0.2)


class TestListingWithCfiCount:
    @pytest.mark.parametrize("target", [100, 1000, 4000])
    def test_exact_cfi_count(self, target):
        text, tally = listing_with_cfi_count(target, seed=3)
        stats = cfi_stats(parse_assembly(text, "gen"))
        assert stats.cfi_count == target
        assert tally.cfi_count == target
        assert stats.cfi_fraction == pytest.approx(0.2083, abs=0.01)
