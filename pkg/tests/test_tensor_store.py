import json
import struct

import numpy as np
import pytest

from fusemerge import constants
from fusemerge.tensor_store import Checkpoint, serialize_checkpoint, deserialize_checkpoint, load_checkpoint, \
                                   save_checkpoint, validate_compatible, partition_units
from fusemerge.exceptions import CheckpointFormatError, MalformedHeaderError, TruncatedPayloadError, \
                                 NonFiniteValuesError, DuplicateTensorNameError

def container(header, payload=b""):
    header_bytes = header if isinstance(header, bytes) else json.dumps(header, separators=(",", ":")).encode("utf-8")

    return struct.pack("<Q", len(header_bytes)) + header_bytes + payload

def test_empty_checkpoint_is_minimal_container():
    data = serialize_checkpoint(Checkpoint())

    assert data == struct.pack("<Q", 2) + b"{}"

    ckpt = deserialize_checkpoint(data)

    assert len(ckpt) == 0
    assert ckpt.metadata == {}

def test_file_size_of_one_2x2_f32_tensor(tmp_path):
    ckpt = Checkpoint({"w": np.arange(4, dtype=np.float32).reshape(2, 2)})
    path = tmp_path / "w.st"

    save_checkpoint(ckpt, path)

    data = path.read_bytes()
    header_nbytes = struct.unpack("<Q", data[:8])[0]

    assert len(data) == 8 + header_nbytes + 16

def test_save_is_deterministic(tmp_path, rng, checkpoint_factory):
    ckpt = checkpoint_factory(rng, metadata={"b": "2", "a": "1"})

    save_checkpoint(ckpt, tmp_path / "1.st")
    save_checkpoint(ckpt, tmp_path / "2.st")

    assert (tmp_path / "1.st").read_bytes() == (tmp_path / "2.st").read_bytes()

def test_canonical_header_layout():
    ckpt = Checkpoint({"b": np.zeros(2, dtype=np.float64), "a": np.ones(1, dtype=np.float32)}, {"note": "x"})
    data = serialize_checkpoint(ckpt)
    header_nbytes = struct.unpack("<Q", data[:8])[0]
    header = data[8:8 + header_nbytes].decode("utf-8")

    assert header == ('{"__metadata__":{"note":"x"},'
                      '"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},'
                      '"b":{"dtype":"F64","shape":[2],"data_offsets":[4,20]}}')
    assert len(data) == 8 + header_nbytes + 20

def test_round_trip_random_checkpoints(rng, checkpoint_factory):
    for idx in range(200):
        dtype = np.float32 if idx % 2 else np.float64
        metadata = {"idx": str(idx), "vocab": json.dumps(["<unk>", "ä"])} if idx % 3 == 0 else None
        ckpt = checkpoint_factory(rng, notensors=int(rng.integers(0, 8)), max_tensor_size=12, dtype=dtype,
                                  metadata=metadata)
        first = serialize_checkpoint(ckpt)
        loaded = deserialize_checkpoint(first)

        assert loaded == ckpt
        assert serialize_checkpoint(loaded) == first

def test_round_trip_keeps_dtypes_and_scalars(tmp_path):
    ckpt = Checkpoint({"scalar": np.float64(3.5) * np.ones(()), "f32": np.array([1.5, -2.0], dtype=np.float32),
                       "empty": np.zeros((0, 3))})
    path = tmp_path / "x.st"

    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)

    assert loaded["f32"].dtype == np.float32
    assert loaded["scalar"].shape == ()
    assert loaded["empty"].shape == (0, 3)
    assert loaded == ckpt

def test_checkpoint_orders_names_and_is_read_only():
    ckpt = Checkpoint({"z": [1.0], "a": [2.0], "m.1.w": [3.0]})

    assert ckpt.names() == ["a", "m.1.w", "z"]
    assert ckpt["a"].dtype == np.float64

    with pytest.raises(ValueError):
        ckpt["a"][0] = 5.0

def test_checkpoint_rejects_unsupported_dtype():
    with pytest.raises(ValueError):
        Checkpoint({"i": np.arange(3, dtype=np.int32)})

def test_checkpoint_rejects_metadata_key_as_tensor_name():
    with pytest.raises(ValueError, match="reserved"):
        Checkpoint({constants.METADATA_KEY: np.zeros(1)}, {"k": "v"})

    # Any other dunder-like name round-trips with its metadata
    ckpt = Checkpoint({"__meta__": np.zeros(1)}, {"k": "v"})

    assert deserialize_checkpoint(serialize_checkpoint(ckpt)) == ckpt

def test_overlapping_offsets_are_malformed():
    header = {"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
              "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]}}

    with pytest.raises(MalformedHeaderError):
        deserialize_checkpoint(container(header, b"\x00" * 12))

def test_gap_between_payloads_is_malformed():
    header = {"a": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}}

    with pytest.raises(MalformedHeaderError):
        deserialize_checkpoint(container(header, b"\x00" * 8))

def test_offsets_not_matching_shape_are_malformed():
    header = {"a": {"dtype": "F64", "shape": [2], "data_offsets": [0, 8]}}

    with pytest.raises(MalformedHeaderError):
        deserialize_checkpoint(container(header, b"\x00" * 8))

def test_truncated_payload():
    header = {"a": {"dtype": "F64", "shape": [2], "data_offsets": [0, 16]}}

    with pytest.raises(TruncatedPayloadError):
        deserialize_checkpoint(container(header, b"\x00" * 10))

def test_trailing_bytes_are_malformed():
    header = {"a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}}

    with pytest.raises(MalformedHeaderError):
        deserialize_checkpoint(container(header, b"\x00" * 6))

def test_non_finite_values_are_rejected():
    for value in (np.nan, np.inf, -np.inf):
        data = serialize_checkpoint(Checkpoint({"a": np.array([1.0, value])}))

        with pytest.raises(NonFiniteValuesError):
            deserialize_checkpoint(data)

def test_duplicate_names_are_rejected():
    header = (b'{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},'
              b'"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}')

    with pytest.raises(DuplicateTensorNameError):
        deserialize_checkpoint(container(header, b"\x00" * 8))

def test_malformed_headers():
    # Header length beyond the end of the buffer
    with pytest.raises(MalformedHeaderError):
        deserialize_checkpoint(struct.pack("<Q", 100) + b"{}")
    # Not even the header length
    with pytest.raises(MalformedHeaderError):
        deserialize_checkpoint(b"\x01\x00")
    # Not JSON
    with pytest.raises(MalformedHeaderError):
        deserialize_checkpoint(container(b"{not json"))
    # Unsupported dtype
    with pytest.raises(MalformedHeaderError):
        deserialize_checkpoint(container({"a": {"dtype": "I32", "shape": [1], "data_offsets": [0, 4]}}, b"\x00" * 4))
    # Metadata values must be strings
    with pytest.raises(MalformedHeaderError):
        deserialize_checkpoint(container({constants.METADATA_KEY: {"a": 1}}))

def test_format_errors_share_a_base_class():
    for error in (MalformedHeaderError, TruncatedPayloadError, NonFiniteValuesError, DuplicateTensorNameError):
        assert issubclass(error, CheckpointFormatError)

def test_validate_compatible():
    a = Checkpoint({"w": np.zeros((2, 3)), "b": np.zeros(3)})
    removed = Checkpoint({"w": np.zeros((2, 3))})
    transposed = Checkpoint({"w": np.zeros((3, 2)), "b": np.zeros(3)})
    single = Checkpoint({"w": np.zeros((2, 3), dtype=np.float32), "b": np.zeros(3)})

    assert validate_compatible([a, a]).compatible
    assert validate_compatible([a, removed]).mismatches == [("b", "missing")]
    assert validate_compatible([a, transposed]).mismatches == [("w", "shape")]
    assert validate_compatible([a, single]).kinds() == ["dtype"]

    with pytest.raises(ValueError):
        validate_compatible([])

def test_partition_model_and_matrix():
    ckpt = Checkpoint({"a": np.zeros(3), "b": np.zeros((2, 2))})

    model = partition_units(ckpt, "model")
    matrix = partition_units(ckpt, "matrix")

    assert model.unit_ids == [constants.MODEL_UNIT_ID]
    assert model.members() == {constants.MODEL_UNIT_ID: ["a", "b"]}
    assert matrix.unit_ids == ["a", "b"]
    assert matrix.members() == {"a": ["a"], "b": ["b"]}
    assert matrix.unit_of("b") == "b"

def test_partition_layer():
    ckpt = Checkpoint({"blk.0.w": np.zeros(2), "blk.0.b": np.zeros(1), "blk.1.w": np.zeros(2), "blk.10.w": [1.0],
                       "embed": np.zeros(2)})
    partition = partition_units(ckpt, "layer")

    assert partition.unit_ids == ["layer0", "layer1", "layer10", constants.UNASSIGNED_UNIT_ID]
    assert partition.members()["layer0"] == ["blk.0.b", "blk.0.w"]
    assert partition.members()["layer1"] == ["blk.1.w"]
    assert partition.unit_of("embed") == constants.UNASSIGNED_UNIT_ID
    assert partition.warnings == []

def test_partition_layer_pattern_matching_nothing_warns():
    ckpt = Checkpoint({"embed": np.zeros(2), "out": np.zeros(2)})
    partition = partition_units(ckpt, "layer", layer_pattern=r"layers\.(\d+)\.")

    assert partition.unit_ids == [constants.UNASSIGNED_UNIT_ID]
    assert len(partition.warnings) == 1

def test_partition_parameter():
    ckpt = Checkpoint({"a": np.zeros((2, 2)), "b": np.zeros(1)})
    partition = partition_units(ckpt, "parameter")

    assert len(partition) == 5
    assert partition.unit_of("a", 3) == "a[3]"
    assert list(partition.positions("b")) == [4]

    with pytest.raises(KeyError):
        partition.unit_of("a")

def test_partition_covers_every_scalar_once(rng, checkpoint_factory):
    for _ in range(20):
        ckpt = checkpoint_factory(rng)

        for granularity in constants.GRANULARITIES:
            partition = partition_units(ckpt, granularity)
            covered = {}

            for name, tensor in ckpt:
                for idx in range(tensor.size):
                    unit = partition.unit_of(name, idx if granularity == "parameter" else None)
                    covered[(name, idx)] = unit

                    assert unit in partition.unit_index

            assert len(covered) == ckpt.noscalars()

            if granularity == "parameter":
                assert len(partition) == ckpt.noscalars()
