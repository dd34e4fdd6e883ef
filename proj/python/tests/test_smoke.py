import math

import numpy as np
import pytest

import ramm


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d)).astype(np.float32)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_tensor_round_trip(tmp_path):
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    ramm.save_tensor(tmp_path / "a.ten", a)
    b = ramm.load_tensor(tmp_path / "a.ten")
    assert b.dtype == np.float32
    assert np.array_equal(a, b)

    d = np.linspace(0, 1, 5)
    ramm.save_tensor(tmp_path / "d.ten", d)
    assert ramm.load_tensor(tmp_path / "d.ten").dtype == np.float64
    assert np.array_equal(ramm.load_tensor(tmp_path / "d.ten"), d)


def test_corrupt_tensor_reports_code(tmp_path):
    path = tmp_path / "bad.ten"
    path.write_bytes(b"NOTATENSOR")
    with pytest.raises(ramm.FormatError) as err:
        ramm.load_tensor(path)
    assert err.value.code == 1


def test_index_round_trip_and_retrieval(tmp_path):
    rng = np.random.default_rng(0)
    n, d = 40, 8
    text, image = unit_rows(rng, n, d), unit_rows(rng, n, d)
    ids = list(range(100, 100 + n))
    idx = ramm.make_index(7, ids, text, image, [f"cap {i}" for i in ids])
    idx.save(tmp_path / "x.idx")
    back = ramm.load_index(tmp_path / "x.idx", expected_fingerprint=7)
    assert back == idx
    assert np.array_equal(back.text_vectors(), text)

    with pytest.raises(ramm.FormatError) as err:
        ramm.load_index(tmp_path / "x.idx", expected_fingerprint=8)
    assert err.value.code == 4

    q = image[3]
    res = ramm.retrieve(back, q, r=4)
    assert len(res["selected"]) == 4
    assert 4 <= res["pool_size"] <= 8
    assert res["selected"][0]["pair_id"] == 103
    scores = [max(float(text[i] @ q), float(image[i] @ q)) for i in range(n)]
    top = sorted(range(n), key=lambda i: (-scores[i], ids[i]))[:4]
    assert [s["pair_id"] for s in res["selected"]] == [ids[i] for i in top]
    assert ramm.retrieve(back, q, r=4, exclude=103)["selected"][0]["pair_id"] != 103


def test_selection():
    scores = [0.9, 0.1, 0.5, 0.7]
    assert ramm.select_inference(scores, 2) == [0, 3]
    picks = ramm.select_training(scores, 2, seed=5)
    assert len(set(picks)) == 2
    assert ramm.select_training(scores, 2, seed=5) == picks


def test_itc_uniform_is_log_batch():
    same = np.zeros((5, 3))
    same[:, 0] = 1.0
    assert math.isclose(ramm.itc_loss(same, same), math.log(5), abs_tol=1e-9)


def test_helpers():
    assert ramm.SWEEP_R == [0, 1, 2, 4, 8]
    assert ramm.valid_r(4) and not ramm.valid_r(3)
    assert ramm.contains_answer("left lung mass", "lung mass")
    assert not ramm.contains_answer("massive", "mass")


def test_gen_synthetic(tmp_path):
    s = ramm.gen_synthetic(tmp_path / "w", {"n_clusters": "8", "test_items": "16", "seed": "1"})
    assert s["test_items"] == 16
    assert (tmp_path / "w" / "corpus" / "corpus.jsonl").exists()
    with pytest.raises(ramm.ConfigError):
        ramm.gen_synthetic(tmp_path / "bad", {"n_clusters": "0"})
