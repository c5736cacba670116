import json

import numpy as np
import pytest

import qf


def random_problem(rng, d_out=5, d_in=7, t=3):
    return (rng.standard_normal((d_out, d_in)), rng.standard_normal((d_in, t)),
            rng.standard_normal((d_out, t)), rng.standard_normal((d_in, t)),
            rng.standard_normal((d_out, t)))


def test_hand_example():
    w = np.zeros((2, 3))
    u = np.zeros((3, 1))
    v = np.array([[1.0], [-1.0]])
    u_prime = np.array([[2.0], [0.0], [0.0]])
    v_prime = np.zeros((2, 1))
    r = qf.qf_update(w, u, v, u_prime, v_prime)
    np.testing.assert_array_equal(r["w_prime"], [[0.5, 0, 0], [-0.5, 0, 0]])
    assert r["effective_rank"] == 1


def test_constraint_and_oracle_agree_with_numpy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        w, u, v, up, vp = random_problem(rng)
        r = qf.qf_update(w, u, v, up, vp)
        lhs = r["w_prime"] @ up + vp
        np.testing.assert_allclose(lhs, w @ u + v, atol=1e-9)
        np.testing.assert_allclose(r["w_prime"], qf.oracle_update(w, u, v, up, vp), atol=1e-9)
        expected = w + (w @ u + v - vp - w @ up) @ np.linalg.pinv(up)
        np.testing.assert_allclose(r["w_prime"], expected, atol=1e-9)
        assert qf.constraint_residual(r["w_prime"], w, u, v, up, vp) < 1e-9


def test_mask_and_errors():
    rng = np.random.default_rng(1)
    w, u, v, up, vp = random_problem(rng, t=4)
    masked = qf.apply_significance(w, u, v, up, vp, [0, 1, 1, 0])
    assert masked[1].shape == (7, 2)
    with pytest.raises(qf.QfError) as err:
        qf.apply_significance(w, u, v, up, vp, [0, 1, 2, 0])
    assert err.value.kind == int(qf.ErrorKind.Contract)
    with pytest.raises(qf.QfError):
        qf.qf_update(w, u[:3], v, up, vp)


def test_tokenizer_round_trip():
    ids = qf.tokenize("<USER>Who started Oxino?<ASST>by Qi<END>")
    assert ids[0] == 1 and ids[-1] == 3
    assert qf.detokenize(ids) == "<USER>Who started Oxino?<ASST>by Qi<END>"
    assert qf.VOCAB_SIZE == 99


def test_consolidation_touches_one_layer(tmp_path):
    c = qf.ModelConfig()
    c.n_layers, c.d_model, c.n_heads, c.d_ff, c.max_seq = 2, 8, 2, 12, 128
    model = qf.Model.random(c, seed=3, stddev=0.3)
    before = model.copy()
    session = qf.Session("Qi started Oxino.", "Who started Oxino?", "by Qi", [0, 1, 1, 1, 1], 1)

    dry = qf.consolidate(model, session, dry_run=True)
    assert model == before and not dry["committed"]
    r = qf.consolidate(model, session)
    assert r["committed"] and r["tokens_used"] == 4
    np.testing.assert_array_equal(model.down_proj(1), r["w_prime"])
    for name in model.tensor_names():
        same = np.array_equal(model.tensor(name), before.tensor(name))
        assert same == (name != "layers.1.ffn.down")

    path = tmp_path / "m.qfw"
    model.save(path)
    assert qf.Model.load(path) == model
    probe = qf.forgetting_probe(before, model, ["<USER>Where is Aliba?<ASST>in Hzhou."])
    assert 0.0 <= probe["median_tv"] <= probe["max_tv"] <= 1.0
    assert qf.qf_infer(model, "Who started Oxino?") == qf.qf_infer(model, "Who started Oxino?")


def test_default_scenario_is_valid_json():
    spec = json.loads(qf.default_scenario_json())
    assert [s["significance"] for s in spec["sessions"]] == [[0, 1, 1, 1, 1], [1] * 9]
    assert len(spec["probes"]) == 50
