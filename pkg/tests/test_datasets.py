import numpy as np
import pytest

from privtrack.datasets import (DatasetError, decode_dataset, encode_dataset, generate, load_dataset,
                                save_dataset)
from privtrack.geometry import Label
from privtrack.world import Task


@pytest.fixture(scope="module")
def ds():
    return generate(["drawer", "pick_place"], 4, 16, seed=3)


def test_generate_round_robins_tasks_and_counts_points(ds):
    assert [ep.task for ep in ds.episodes] == [Task.DRAWER, Task.PICK_PLACE] * 2
    assert ds.n_points == 16 and ds.tasks == [Task.DRAWER, Task.PICK_PLACE]
    for ep in ds.episodes:
        assert ep.tracks.shape == (ep.length, 16, 3)
        assert (ep.labels == Label.ROBOT).sum() == 8


def test_prefix_reproducibility(ds):
    small = generate(["drawer", "pick_place"], 2, 16, seed=3)
    for a, b in zip(small.episodes, ds.episodes):
        assert a.tracks.tobytes() == b.tracks.tobytes()


def test_encode_decode_round_trip(tmp_path, ds):
    blob = encode_dataset(ds)
    assert blob[:4] == b"P4RD"
    back = decode_dataset(blob)
    assert encode_dataset(back) == blob
    save_dataset(ds, tmp_path / "d.p4rd")
    assert load_dataset(tmp_path / "d.p4rd").meta == ds.meta


def test_decode_errors(ds):
    blob = encode_dataset(ds)
    with pytest.raises(DatasetError, match="magic"):
        decode_dataset(b"XXXX" + blob[4:])
    with pytest.raises(DatasetError, match="truncated"):
        decode_dataset(blob[:-5])
    with pytest.raises(DatasetError, match="trailing"):
        decode_dataset(blob + b"\0")


def test_split_keeps_last_episodes_for_validation(ds):
    train, val = ds.split(0.25)
    assert len(train) == 3 and val == ds.episodes[3:]
    one = generate("door", 1, 8, seed=0)
    assert one.split() == (one.episodes, [])


def test_same_seed_same_bytes():
    a = encode_dataset(generate("door", 2, 8, seed=11))
    b = encode_dataset(generate("door", 2, 8, seed=11))
    assert a == b
    assert a != encode_dataset(generate("door", 2, 8, seed=12))
