import io
import logging
import struct
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elsa import lsbpack
from elsa.core import ElsaConfig, extract_level, multi_level
from elsa.errors import (
    BadMagicError,
    ChecksumError,
    ContractError,
    CorruptionError,
    FormatError,
    NumericError,
    UnsupportedVersionError,
)
from elsa.lsbpack import (
    PackedCheckpoint,
    bits,
    extract_level_packed,
    extract_streaming,
    finalize,
    read_lsb,
    stamp,
    stamp_level,
    tau_for,
)
from elsa.nn import BatchNormStats, Network, ParamSet, TrainConfig, compute_bn_stats, train
from elsa.sparsify import SparsitySpec

words32 = st.integers(0, 2**32 - 1)


def from_bits(words):
    return np.asarray(words, dtype=np.uint32).view(np.float32)


def flat_params(values, extra=True):
    entries = [("w", np.asarray(values, np.float32), True)]
    if extra:
        entries.append(("b", np.array([0.25, -3.0], np.float32), False))
    return ParamSet(entries)


# --------------------------------------------------------------------------- #
# bit helpers
# --------------------------------------------------------------------------- #
@pytest.mark.parametrize("T,tau", [(1, 1), (2, 2), (3, 2), (4, 3), (7, 3), (8, 4), (50, 6), (255, 8)])
def test_tau_for(T, tau):
    assert tau_for(T) == tau


@pytest.mark.parametrize("T", [0, 256, -1])
def test_tau_for_range(T):
    with pytest.raises(ValueError):
        tau_for(T)


def test_stamp_example():
    assert stamp(0x3F800000, 3, 2) == 0x3F800003
    assert read_lsb(0x3F800003, 2) == 3
    assert read_lsb(0, 7) == 0


def test_stamp_rejects_level_that_does_not_fit():
    with pytest.raises(ValueError):
        stamp(0x3F800000, 4, 2)


@settings(max_examples=300)
@given(words32, st.integers(1, 8), st.data())
def test_stamp_roundtrip_and_overwrite(word, tau, data):
    a = data.draw(st.integers(0, 2**tau - 1))
    b = data.draw(st.integers(0, 2**tau - 1))
    s = stamp(word, a, tau)
    assert read_lsb(s, tau) == a
    assert s >> tau == word >> tau
    assert stamp(s, b, tau) == stamp(word, b, tau)
    assert read_lsb(stamp(word, 0, tau), tau) == 0


@pytest.mark.parametrize("tau", range(1, 9))
def test_roundtrip_exhaustive_over_levels(tau, rng):
    words = rng.integers(0, 2**32, 1000, dtype=np.uint64).astype(np.uint32)
    for t in range(2**tau):
        np.testing.assert_array_equal(read_lsb(stamp(words, t, tau), tau), t)


@settings(max_examples=500)
@given(st.floats(width=32, allow_nan=False, allow_infinity=False, allow_subnormal=False)
       .filter(lambda v: v != 0), st.integers(1, 8), st.data())
def test_stamp_perturbation_bound(value, tau, data):
    t = data.draw(st.integers(0, 2**tau - 1))
    w = int(bits(value))
    after = float(from_bits(stamp(w, t, tau)))
    assert abs(after - value) / abs(value) <= 2.0 ** (tau - 23)


# --------------------------------------------------------------------------- #
# stamp_level / finalize
# --------------------------------------------------------------------------- #
def test_stamp_level_touches_exactly_the_targets(rng):
    p = flat_params(rng.normal(size=20))
    out = stamp_level(p, [3, 7], 2, 2)
    changed = np.flatnonzero(bits(out.flat) != bits(p.flat))
    assert set(changed.tolist()) <= {3, 7}
    assert read_lsb(bits(out.flat)[[3, 7]], 2).tolist() == [2, 2]
    assert out["b"].tobytes() == p["b"].tobytes()
    assert stamp_level(p, [], 1, 2).bit_equal(p)


def test_stamp_level_rejects_zero_targets():
    with pytest.raises(ContractError):
        stamp_level(flat_params([1.0, 0.0]), [1], 1, 1)
    with pytest.raises(ContractError):
        stamp_level(flat_params([1.0, -0.0]), [1], 1, 1)


def test_stamp_level_rejects_ledger_overlap():
    ledger = np.zeros(3, bool)
    p = stamp_level(flat_params([1.0, 2.0, 3.0]), [0], 1, 2, ledger)
    with pytest.raises(ContractError):
        stamp_level(p, [0, 1], 2, 2, ledger)


def test_stamp_level_rejects_non_finite():
    with pytest.raises(NumericError):
        stamp_level(flat_params([1.0, np.inf]), [1], 1, 1)


def test_stamp_level_warns_on_tiny_values(caplog):
    with caplog.at_level(logging.WARNING, logger="elsa.lsbpack"):
        stamp_level(flat_params([1e-35, 1.0]), [0], 1, 1)
    assert "2^-100" in caplog.text


def test_finalize_clears_free_weights_and_checks_stamps():
    w = bits(np.array([1.1, -2.3, 0.7, 0.0], np.float32)).copy()
    w[0] = stamp(w[0], 1, 2)
    w[1] = stamp(w[1], 2, 2)
    w[2] |= 3  # a free weight whose trained value has nonzero low bits
    p = flat_params(from_bits(w))
    out = finalize(p, np.array([1, 2, 3, 3]), 2, 2)
    ow = bits(out.flat)
    assert ow[0] == w[0] and ow[1] == w[1]
    assert ow[2] == w[2] & ~np.uint32(3)
    assert ow[3] == 0
    with pytest.raises(CorruptionError):
        finalize(p, np.array([2, 2, 3, 3]), 2, 2)


def test_finalize_all_frozen_is_noop():
    w = [stamp(int(x), 1, 1) for x in bits(np.array([0.5, -1.5], np.float32))]
    p = flat_params(from_bits(w))
    assert finalize(p, np.array([1, 1]), 1, 1).bit_equal(p)


# --------------------------------------------------------------------------- #
# embedded runs
# --------------------------------------------------------------------------- #
@pytest.fixture(scope="module")
def embedded(blobs):
    net = Network.mlp([2, 32, 32, 2], batchnorm="all")
    params = train(net, net.init_params(0), None, blobs, TrainConfig(epochs=3))
    cfgs = ElsaConfig(densify_cfg=TrainConfig(learning_rate=1e-2, epochs=2), sparsifier="topk")
    schedule = [SparsitySpec.global_(a) for a in (0.8, 0.6, 0.4, 0.2)]
    result = multi_level(net, params, schedule, blobs, cfgs, stamper=lsbpack.LsbStamper(4))
    stats = {lsbpack.DENSE_TAG: result.stats["dense"], **{t: result.stats[t] for t in range(1, 5)}}
    ckpt = PackedCheckpoint(4, tau_for(4), result.params, net.bn_dims(), stats)
    return net, result, ckpt


def test_stamps_match_counter(embedded):
    _, result, ckpt = embedded
    lsb = read_lsb(bits(ckpt.params.flat), ckpt.tau)
    expected = np.where(result.counter <= 4, result.counter, 0)
    np.testing.assert_array_equal(lsb, expected)
    assert sorted(lsb[lsb > 0].tolist()) == sorted(result.counter[result.counter <= 4].tolist())


def test_equations_one_and_two_agree(embedded):
    _, result, ckpt = embedded
    previous = set()
    for t in range(1, 5):
        by_counter = extract_level(result.params, result.counter, t, 4)
        by_stamps, stats = extract_level_packed(ckpt, t)
        assert by_stamps.bit_equal(by_counter)
        assert by_stamps.digest() == result.digests[t - 1]
        assert stats is ckpt.stats[t]
        nz = set(np.flatnonzero(by_stamps.flat).tolist())
        assert previous <= nz
        previous = nz


def test_stored_stats_equal_recomputed(embedded, blobs):
    net, _, ckpt = embedded
    for t in range(1, 5):
        params, stats = extract_level_packed(ckpt, t)
        assert stats.equal(compute_bn_stats(net, params, blobs.x))


def test_extract_at_T_keeps_exactly_the_stamped():
    w = bits(np.array([1.5, -2.5, 3.5, 0.0], np.float32)).copy()
    a, b = stamp(w[0], 1, 2), stamp(w[1], 2, 2)
    c = stamp(w[2], 0, 2)
    p = flat_params(from_bits([a, b, c, 0]), extra=False)
    ckpt = PackedCheckpoint(2, 2, p, [], {})
    one, _ = extract_level_packed(ckpt, 1)
    assert bits(one.flat).tolist() == [a, 0, 0, 0]
    two, _ = extract_level_packed(ckpt, 2)
    assert bits(two.flat).tolist() == [a, b, 0, 0]
    with pytest.raises(IndexError):
        extract_level_packed(ckpt, 3)


# --------------------------------------------------------------------------- #
# file format
# --------------------------------------------------------------------------- #
def test_roundtrip_is_bit_identical(embedded, tmp_path):
    _, _, ckpt = embedded
    path = tmp_path / "m.elsa"
    size = lsbpack.write(path, ckpt.params, ckpt.T, ckpt.tau, ckpt.bn_dims, ckpt.stats)
    back = lsbpack.read(path)
    assert back.params.bit_equal(ckpt.params)
    assert (back.T, back.tau, back.bn_dims) == (4, 3, ckpt.bn_dims)
    assert sorted(back.stats) == [0, 1, 2, 3, 4]
    assert all(back.stats[k].equal(ckpt.stats[k]) for k in ckpt.stats)
    assert size == path.stat().st_size == lsbpack.layout(ckpt).total


def test_size_formula_has_no_per_weight_overhead(embedded):
    _, _, ckpt = embedded
    lay = lsbpack.layout(ckpt)
    n_weights = sum(e.size for e in ckpt.params.entries)
    header = 4 + 2 + 2 + 1 + 4 + sum(2 + len(e.name.encode()) + 2 + 4 * len(e.shape)
                                     for e in ckpt.params.entries)
    bn = 4 + 4 * len(ckpt.bn_dims) + len(ckpt.stats) * (2 + 8 * sum(ckpt.bn_dims))
    assert lay.header == header
    assert lay.payload == 4 * n_weights
    assert lay.bn == bn
    assert len(lsbpack.encode_checkpoint(ckpt)) == header + 4 * n_weights + bn + 8


def test_header_layout_is_little_endian():
    p = ParamSet([("w", np.ones((2, 3), np.float32), True)])
    data = lsbpack.encode(p, 3, 2, [], {})
    assert data[:4] == b"ELSA"
    assert struct.unpack("<HHBI", data[4:13]) == (1, 3, 2, 1)
    assert struct.unpack("<H", data[13:15]) == (1,)
    assert data[15:16] == b"w"
    assert struct.unpack("<BB2I", data[16:26]) == (1, 2, 2, 3)
    assert data[26:30] == struct.pack("<f", 1.0)


def _encoded(embedded):
    return bytearray(lsbpack.encode_checkpoint(embedded[2]))


def test_truncated_file_fails_checksum(embedded, tmp_path):
    data = _encoded(embedded)
    for cut in (len(data) - 1, len(data) // 2, 10, 3):
        path = tmp_path / "cut.elsa"
        path.write_bytes(data[:cut])
        with pytest.raises(ChecksumError):
            lsbpack.read(path)


def test_bad_magic(embedded, tmp_path):
    data = _encoded(embedded)
    data[0:4] = b"ELSB"
    (tmp_path / "m").write_bytes(data)
    with pytest.raises(BadMagicError) as err:
        lsbpack.read(tmp_path / "m")
    assert err.value.offset == 0


def _reseal(data):
    import hashlib
    body = bytes(data[:-8])
    return body + hashlib.blake2b(body, digest_size=8).digest()


def test_bad_version(embedded, tmp_path):
    data = _encoded(embedded)
    data[4:6] = struct.pack("<H", 2)
    (tmp_path / "m").write_bytes(_reseal(data))
    with pytest.raises(UnsupportedVersionError):
        lsbpack.read(tmp_path / "m")


def test_bit_flip_fails_checksum(embedded, tmp_path):
    data = _encoded(embedded)
    data[200] ^= 0x01
    (tmp_path / "m").write_bytes(data)
    with pytest.raises(ChecksumError):
        lsbpack.read(tmp_path / "m")


def test_inconsistent_tau_is_a_format_error(embedded, tmp_path):
    data = _encoded(embedded)
    data[8] = 1  # tau=1 cannot hold T=4
    (tmp_path / "m").write_bytes(_reseal(data))
    with pytest.raises(FormatError):
        lsbpack.read(tmp_path / "m")


def test_error_kinds_are_distinct():
    kinds = {BadMagicError, UnsupportedVersionError, ChecksumError}
    for k in kinds:
        assert not any(issubclass(k, o) for o in kinds - {k})


# --------------------------------------------------------------------------- #
# streaming extraction
# --------------------------------------------------------------------------- #
@pytest.mark.parametrize("t", [1, 2, 3, 4])
@pytest.mark.parametrize("chunk", [1, 7, lsbpack.CHUNK_WORDS])
def test_streaming_equals_offline(embedded, t, chunk):
    _, _, ckpt = embedded
    offline = lsbpack.encode_checkpoint(lsbpack.extracted_checkpoint(ckpt, t))
    out = io.BytesIO()
    n = extract_streaming(io.BytesIO(lsbpack.encode_checkpoint(ckpt)), t, out, chunk)
    assert out.getvalue() == offline and n == len(offline)
    back = lsbpack.read_stream(io.BytesIO(offline))
    assert (back.T, back.tau, sorted(back.stats)) == (t, ckpt.tau, [t])


def test_extracted_files_support_further_extraction(embedded):
    _, _, ckpt = embedded
    three = lsbpack.read_stream(io.BytesIO(lsbpack.encode_checkpoint(lsbpack.extracted_checkpoint(ckpt, 3))))
    for t in (1, 2):
        assert extract_level_packed(three, t)[0].bit_equal(extract_level_packed(ckpt, t)[0])


def _random_model(n, rng, T=6):
    tau = tau_for(T)
    w = bits(rng.normal(size=n).astype(np.float32)).copy()
    w = stamp(w, 0, tau)
    levels = rng.integers(0, T + 1, n).astype(np.uint32)
    w = (w | levels).astype(np.uint32)
    w[rng.random(n) < 0.05] = 0
    p = ParamSet([("a", from_bits(w).reshape(-1, 8), True), ("bias", rng.normal(size=8), False)])
    return PackedCheckpoint(T, tau, p, [], {})


@pytest.mark.parametrize("n", [8, 80_000, 1_000_000])
def test_streaming_equals_offline_on_random_models(n, rng):
    ckpt = _random_model(n, rng)
    src = lsbpack.encode_checkpoint(ckpt)
    for t in (1, 6):
        out = io.BytesIO()
        extract_streaming(io.BytesIO(src), t, out)
        assert out.getvalue() == lsbpack.encode_checkpoint(lsbpack.extracted_checkpoint(ckpt, t))


def test_streaming_memory_does_not_grow_with_model(tmp_path, rng):
    def peak(n):
        src, dst = tmp_path / f"in{n}", tmp_path / f"out{n}"
        src.write_bytes(lsbpack.encode_checkpoint(_random_model(n, rng)))
        with open(src, "rb") as r, open(dst, "wb") as w:
            tracemalloc.start()
            extract_streaming(r, 3, w)
            _, top = tracemalloc.get_traced_memory()
            tracemalloc.stop()
        return top

    small, large = peak(200_000), peak(2_000_000)
    assert large < 1.5 * small + 64_000
    assert large < 2_000_000  # an 8 MB payload never lives in memory


def test_empty_prunable_model_passes_through():
    p = ParamSet([("bias", np.array([1.0, -2.0], np.float32), False)])
    ckpt = PackedCheckpoint(2, 2, p, [], {})
    out = io.BytesIO()
    extract_streaming(io.BytesIO(lsbpack.encode_checkpoint(ckpt)), 1, out)
    back = lsbpack.read_stream(io.BytesIO(out.getvalue()))
    assert back.params["bias"].tolist() == [1.0, -2.0]


def test_streaming_reports_offset_of_corruption(embedded):
    data = _encoded(embedded)
    data[200] ^= 0x01
    with pytest.raises(ChecksumError) as err:
        extract_streaming(io.BytesIO(bytes(data)), 1, io.BytesIO())
    assert err.value.offset == len(data) - 8
    with pytest.raises(ChecksumError) as err:
        extract_streaming(io.BytesIO(bytes(data[:150])), 1, io.BytesIO())
    assert err.value.offset == 150


def test_streaming_rejects_out_of_range_level(embedded):
    with pytest.raises(IndexError):
        extract_streaming(io.BytesIO(bytes(_encoded(embedded))), 5, io.BytesIO())


def test_dense_file_stats_lookup():
    stats = BatchNormStats([np.zeros(2, np.float32)], [np.ones(2, np.float32)])
    dense = PackedCheckpoint(0, 0, flat_params([1.0]), [2], {lsbpack.DENSE_TAG: stats})
    assert dense.stats_for(None) is stats
    extracted = PackedCheckpoint(2, 2, flat_params([1.0]), [2], {2: stats})
    assert extracted.stats_for(None) is stats
    with pytest.raises(KeyError):
        extracted.stats_for(1)
