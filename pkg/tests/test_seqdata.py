import numpy as np
import pytest
from hypothesis import given, strategies as st

from vbprnn.seqdata import (Dataset, DatasetFormatError, DomainError, EncodedSequence, GridCodec,
                            Trajectory2D, decode_frame, decode_frames, dumps_dataset, encode_point,
                            encode_points, encode_trajectory, load_dataset, loads_dataset,
                            save_dataset)

CODEC = GridCodec()
unit = st.floats(0.0, 1.0, allow_nan=False)


def naive_encode(p, codec):
    # independent oracle: explicit loops and log-sum-exp
    logits = []
    for r in range(codec.rows):
        for c in range(codec.cols):
            cx, cy = c / (codec.cols - 1), r / (codec.rows - 1)
            logits.append(-codec.sharpness * ((p[0] - cx) ** 2 + (p[1] - cy) ** 2))
    logits = np.array(logits)
    e = np.exp(logits - logits.max())
    return e / e.sum()


def test_default_grid_is_121_way():
    assert CODEC.size == 121
    assert CODEC.centers.shape == (121, 2)


def test_center_point_argmax_and_symmetry():
    f = encode_point((0.5, 0.5), CODEC).reshape(11, 11)
    assert np.unravel_index(np.argmax(f), f.shape) == (5, 5)
    assert np.allclose(f, f[::-1, :], atol=1e-15)
    assert np.allclose(f, f[:, ::-1], atol=1e-15)
    assert np.allclose(f, f.T, atol=1e-15)


def test_corner_center_argmax():
    f = encode_point((0.0, 0.0), CODEC)
    assert np.argmax(f) == CODEC.cell_index(0, 0) == 0


@given(st.tuples(unit, unit))
def test_encode_matches_loop_oracle(p):
    assert np.allclose(encode_point(p, CODEC), naive_encode(p, CODEC), atol=1e-12)


@given(st.tuples(unit, unit))
def test_frames_are_distributions(p):
    f = encode_point(p, CODEC)
    assert abs(f.sum() - 1.0) <= 1e-9
    assert (f >= 0).all()


def test_round_trip_within_half_pitch_over_workspace():
    pts = np.random.default_rng(1).uniform(0.05, 0.95, size=(1000, 2))
    back = decode_frames(encode_points(pts, CODEC), CODEC)
    assert np.abs(back - pts).max() <= 1 / (2 * (CODEC.rows - 1))


def test_round_trip_100_random_points_coarse_grid():
    codec = GridCodec(9, 9, 150.0)
    pts = np.random.default_rng(2).uniform(0.05, 0.95, size=(100, 2))
    back = np.array([decode_frame(encode_point(p, codec), codec) for p in pts])
    assert np.abs(back - pts).max() <= 0.5 * codec.pitch[0]


def test_decode_uniform_and_one_hot():
    assert np.allclose(decode_frame(np.full(121, 1 / 121), CODEC), (0.5, 0.5))
    one = np.zeros(121)
    one[CODEC.cell_index(10, 10)] = 1.0
    assert np.allclose(decode_frame(one, CODEC), (1.0, 1.0))
    one = np.zeros(121)
    one[CODEC.cell_index(0, 10)] = 1.0
    assert np.allclose(decode_frame(one, CODEC), (1.0, 0.0))


def test_encode_rejects_out_of_range():
    with pytest.raises(DomainError):
        encode_point((1.01, 0.5), CODEC)
    with pytest.raises(DomainError):
        encode_point((0.5, -1e-9), CODEC)
    with pytest.raises(DomainError):
        encode_point((np.nan, 0.5), CODEC)


def test_decode_rejects_unnormalised():
    with pytest.raises(DomainError):
        decode_frame(np.full(121, 1 / 100), CODEC)


def test_codec_deterministic():
    pts = np.random.default_rng(3).random((50, 2))
    assert np.array_equal(encode_points(pts, CODEC), encode_points(pts, CODEC))


def test_encode_trajectory_lengths():
    traj = Trajectory2D(np.random.default_rng(4).random((400, 2)))
    enc = encode_trajectory(traj, CODEC)
    assert enc.frames.shape == (400, 121)
    assert enc.step_count == 400
    assert np.allclose(enc.frames.sum(axis=1), 1.0, atol=1e-9)


def test_empty_trajectory_rejected():
    with pytest.raises(DomainError):
        encode_trajectory(Trajectory2D(np.zeros((0, 2))), CODEC)


def test_trajectory_invariants():
    with pytest.raises(DomainError):
        Trajectory2D(np.array([[0.2, 1.5]]))
    t = Trajectory2D([[0.1, 0.2], [0.3, 0.4]])
    assert t.step_count == len(t.points) == 2


def test_encoded_sequence_validation():
    with pytest.raises(DomainError):
        EncodedSequence(np.array([[0.5, 0.6]]))
    with pytest.raises(DomainError):
        EncodedSequence(np.array([[1.5, -0.5]]))


def _dataset(n=3, length=20, seed=0, codec=GridCodec(9, 9, 150.0)):
    rng = np.random.default_rng(seed)
    raw = [Trajectory2D(rng.random((length, 2))) for _ in range(n)]
    return Dataset(raw, codec, seed=seed, metadata={"generator": "test", "note": "a b=c"})


def test_dataset_round_trip_bit_identical(tmp_path):
    ds = _dataset()
    path = save_dataset(ds, tmp_path / "d.txt")
    back = load_dataset(path)
    for a, b in zip(ds.raw, back.raw):
        assert np.array_equal(a.points, b.points)
    assert back.codec == ds.codec
    assert back.metadata == ds.metadata
    assert back.seed == ds.seed
    assert dumps_dataset(back) == path.read_text()


def test_dataset_128_sequences_round_trip():
    ds = _dataset(n=128, length=12, seed=7)
    back = loads_dataset(dumps_dataset(ds))
    assert len(back) == 128 and back.metadata == ds.metadata
    assert np.array_equal(back.frames_array(), ds.frames_array())


def test_large_seed_survives():
    ds = _dataset()
    ds.seed = 2**64 - 1
    assert loads_dataset(dumps_dataset(ds)).seed == 2**64 - 1


def test_truncated_file_names_record():
    text = dumps_dataset(_dataset(n=3, length=5))
    lines = text.splitlines()
    with pytest.raises(DatasetFormatError, match="record 2"):
        loads_dataset("\n".join(lines[:-2]) + "\n")


def test_bad_header_and_version():
    text = dumps_dataset(_dataset())
    with pytest.raises(DatasetFormatError, match="line 1"):
        loads_dataset("garbage\n" + text)
    with pytest.raises(DatasetFormatError, match="version"):
        loads_dataset(text.replace("VBPDATA v1", "VBPDATA v9", 1))


def test_bad_coordinate_reported(tmp_path):
    lines = dumps_dataset(_dataset(n=2, length=4)).splitlines()
    i = next(k for k, ln in enumerate(lines) if ln.startswith("SEQ 1"))
    lines[i + 2] = "0.1 nope"
    p = tmp_path / "bad.txt"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="record 1") as exc:
        load_dataset(p)
    assert str(p) in str(exc.value)


def test_frames_array_requires_equal_lengths():
    codec = GridCodec(3, 3, 10.0)
    ds = Dataset([Trajectory2D(np.full((3, 2), 0.5)), Trajectory2D(np.full((4, 2), 0.5))], codec)
    with pytest.raises(DomainError):
        ds.frames_array()
