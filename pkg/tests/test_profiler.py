import pytest

from biome import archive, profiler
from biome.encoder import BioMEEncoder, EncoderConfig, build_config
from biome.profiler import count_macs, count_params, estimate_peak_memory


def toy():
    return EncoderConfig(n_layers=1, d_model=2, n_heads=1, n_kv_heads=1, mlp_hidden=1, msab_dim=1)


def test_toy_hand_count():
    # embedding 256*2 + 2; q,k,v,o 4 each; SwiGLU 3*2*1; FiLM 2*(1*2 + 2); norms 2*2 + 2
    expected = (256 * 2 + 2) + 4 * 4 + 6 + 8 + 6
    assert expected == 550
    assert count_params(toy()) == expected
    assert sum(p.numel() for p in BioMEEncoder(toy()).parameters()) == expected


@pytest.mark.parametrize("tag,lo,hi", [("Edge", 5.4e6, 6.6e6), ("Small", 23.4e6, 28.6e6), ("Base", 68.4e6, 83.6e6)])
def test_param_bands(tag, lo, hi):
    assert lo <= count_params(build_config(tag)) <= hi


@pytest.mark.parametrize("tag,ref", [("Edge", 227), ("Base", 3427)])
def test_mac_bands(tag, ref):
    assert 0.8 * ref <= count_macs(build_config(tag), 1.0) <= 1.2 * ref


def test_checkpoint_scalar_count_matches(tmp_path):
    cfg = build_config("Edge")
    path = tmp_path / "w.tarc"
    archive.save(path, BioMEEncoder(cfg).state_dict())
    assert sum(t.size for t in archive.load(path).values()) == count_params(cfg)


def test_breakdown_reconciles():
    for cfg in (build_config("Edge"), build_config("Base"), toy()):
        rep = profiler.profile(cfg, 3.0)
        assert sum(rep.breakdown.values()) == rep.param_count
        assert sum(rep.mac_breakdown.values()) == pytest.approx(rep.mmacs_per_s * 3.0 * 1e6, rel=1e-12)
        assert all(v >= 0 for v in rep.breakdown.values())


def test_token_count_one_second():
    # 98 mel frames -> 6 time blocks x 8 mel blocks
    assert profiler.n_tokens(build_config("Edge"), 1.0) == 48


def test_attention_term_superlinear():
    cfg = build_config("Edge")
    assert count_macs(cfg, 2.0) * 2.0 >= 2 * count_macs(cfg, 1.0) * 1.0


def test_macs_monotone():
    base = EncoderConfig(n_layers=4, d_model=64, n_heads=4, n_kv_heads=2, mlp_hidden=128)
    wider = EncoderConfig(n_layers=4, d_model=128, n_heads=4, n_kv_heads=2, mlp_hidden=128)
    deeper = EncoderConfig(n_layers=8, d_model=64, n_heads=4, n_kv_heads=2, mlp_hidden=128)
    assert count_macs(wider) >= count_macs(base)
    assert count_macs(deeper) >= count_macs(base)
    totals = [count_macs(base, s) * s for s in (0.5, 1.0, 2.0, 5.0)]
    assert totals == sorted(totals)


def test_macs_rejects_nonpositive_duration():
    with pytest.raises(ValueError):
        count_macs(build_config("Edge"), 0.0)


def test_memory_weights_only():
    cfg = build_config("Base")
    assert estimate_peak_memory(cfg, 0.0) == count_params(cfg) * 4
    # about 76M x 4 bytes; our Base has ~71M params
    assert 270e6 <= estimate_peak_memory(cfg, 0.0) <= 335e6


def test_memory_monotone_in_width():
    sizes = [estimate_peak_memory(build_config(t), 300.0) for t in ("Edge", "Small", "Base")]
    assert sizes == sorted(sizes)
    assert estimate_peak_memory(build_config("Edge"), 300.0) > estimate_peak_memory(build_config("Edge"), 0.0)
