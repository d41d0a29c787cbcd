import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointlm import tensor as T
from pointlm.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from pointlm.gradcheck import NonFiniteError, grad_check
from pointlm.optim import AdamW, MissingGroupError, OptimizerState, adamw_step
from pointlm.rng import Rng


def test_matmul_ones():
    out = T.Tensor(np.ones((2, 3))) @ T.Tensor(np.ones((3, 2)))
    assert np.array_equal(out.data, np.full((2, 2), 3.0))


def test_softmax_symmetric():
    assert np.allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_reduce_mean_grad():
    x = T.Tensor(np.arange(4.0), requires_grad=True)
    x.mean().backward()
    assert np.array_equal(x.grad, np.full(4, 0.25))


def test_shape_error_names_op_and_shapes():
    with pytest.raises(T.ShapeError) as e:
        T.Tensor(np.ones((2, 3))) @ T.Tensor(np.ones((2, 3)))
    assert "matmul" in str(e.value) and "(2, 3)" in str(e.value)
    with pytest.raises(T.ShapeError, match="add"):
        T.Tensor(np.ones(3)) + T.Tensor(np.ones(4))


def test_grad_accumulates_across_uses():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    (x * x + x).sum().backward()
    assert np.array_equal(x.grad, [3.0, 5.0])


def test_gradcheck_examples():
    assert grad_check(lambda x: (x * x).sum(), T.Tensor([1.0, 2.0]), eps=1e-5) < 1e-8
    assert grad_check(lambda x: T.Tensor(3.0) + 0.0 * x.sum(), T.Tensor([1.0, 2.0])) == 0.0


@pytest.mark.filterwarnings("ignore:invalid value encountered in log")
def test_gradcheck_nonfinite():
    with pytest.raises(NonFiniteError):
        grad_check(lambda x: T.log(x).sum(), T.Tensor([-1.0, 1.0]))


shapes = st.tuples(st.integers(1, 4), st.integers(1, 4))


@settings(max_examples=25, deadline=None)
@given(shapes, st.integers(0, 10_000))
def test_random_op_gradients(shape, seed):
    rng = Rng(seed)
    a = rng.split("a").normal(shape)
    c = rng.split("c").normal(shape)
    w = rng.split("w").normal(shape[1])
    idx = rng.split("i").integers(shape[0], 5)
    ops = [
        lambda x: (x @ T.Tensor(c.T)).sum(),
        lambda x: (T.softmax(x, axis=-1) * T.Tensor(c)).sum(),
        lambda x: (T.layernorm(x, T.Tensor(w), T.Tensor(w)) * T.Tensor(c)).sum() if shape[1] > 1 else x.sum(),
        lambda x: (T.gelu(x) * T.Tensor(c)).sum(),
        lambda x: (T.gather(x, idx, axis=0) ** 2).sum(),
        lambda x: (T.scatter_add(x, idx[:shape[0]] % 2 if len(idx) >= shape[0] else np.zeros(shape[0], int), 2) ** 2).sum(),
        lambda x: (x.max(axis=0) * T.Tensor(w)).sum(),
        lambda x: (T.concat([x, x.transpose().transpose()], axis=1) ** 3).mean(),
        lambda x: (x[..., :1] * x[..., -1:]).sum(),
        lambda x: T.log_softmax(x, axis=0).sum() * 0.3 + T.sqrt(x * x + 1.0).sum(),
    ]
    for f in ops:
        assert grad_check(f, T.Tensor(a)) < 1e-6


def test_cross_entropy_examples():
    v = 7
    ce = T.cross_entropy(T.Tensor(np.zeros((3, v))), np.array([1, 2, 3]), np.ones(3, bool))
    assert ce.item() == pytest.approx(np.log(v), abs=1e-12)
    big = np.full((2, v), -50.0)
    big[[0, 1], [4, 5]] = 50.0
    assert T.cross_entropy(T.Tensor(big), np.array([4, 5]), np.ones(2, bool)).item() < 1e-12
    with pytest.raises(ValueError):
        T.cross_entropy(T.Tensor(np.zeros((2, v))), np.array([0, 0]), np.zeros(2, bool))


def test_cross_entropy_matches_hand_softmax():
    rng = Rng(3)
    logits = rng.normal((5, 6))
    tgt = np.array([0, 5, 2, 2, 1])
    mask = np.array([True, False, True, True, False])
    oracle = []
    for i in range(5):
        if mask[i]:
            z = np.exp(logits[i] - logits[i].max())
            oracle.append(-np.log(z[tgt[i]] / z.sum()))
    assert T.cross_entropy(T.Tensor(logits), tgt, mask).item() == pytest.approx(np.mean(oracle), abs=1e-12)


def test_float32_option():
    T.set_default_dtype(np.float32)
    x = T.Tensor([1.0, 2.0])
    assert x.data.dtype == np.float32
    assert (x * x).data.dtype == np.float32


def test_rng_reproducible_and_split():
    a, b = Rng(9), Rng(9)
    assert np.array_equal(a.uniform(10), b.uniform(10))
    assert np.array_equal(Rng(9).split("x").normal(4), Rng(9).split("x").normal(4))
    assert not np.array_equal(Rng(9).split("x").normal(4), Rng(9).split("y").normal(4))
    u = Rng(1).uniform(10_000)
    assert 0.0 <= u.min() and u.max() < 1.0 and abs(u.mean() - 0.5) < 0.01
    z = Rng(2).normal(20_000)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1.0) < 0.03
    assert sorted(Rng(3).permutation(20).tolist()) == list(range(20))


def _splitmix_ref(z: int) -> int:
    m = (1 << 64) - 1
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & m
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & m
    return z ^ (z >> 31)


def test_rng_matches_pure_python_splitmix():
    g, m = 0x9E3779B97F4A7C15, (1 << 64) - 1
    for seed in (0, 1, 2**63 + 5):
        key = _splitmix_ref(((seed ^ 0) + g) & m)
        want = [_splitmix_ref((key + i * g) & m) for i in range(1, 6)]
        assert [int(b) for b in Rng(seed).bits(5)] == want
    assert [int(b) for b in Rng(0).bits(2)] == [12035550249420947055, 12935080325729570654]


def _quad_params():
    return {"w": T.Tensor(np.array([[1.0]]), requires_grad=True)}


def test_adamw_zero_grad_only_decay():
    p = _quad_params()
    st_ = OptimizerState({"g": 0.1}, {"w": "g"}, total_steps=10, weight_decay=0.5)
    adamw_step(p, {"w": np.zeros((1, 1))}, st_)
    assert p["w"].data[0, 0] == pytest.approx(1.0 - 0.1 * st_.lr_factor(1) * 0.5, abs=1e-15)
    assert st_.step == 1


def test_adamw_descends():
    p = _quad_params()
    opt = AdamW(p, {"g": (1e-2, ["w"])}, total_steps=10)
    (p["w"] * p["w"]).sum().backward()
    opt.step()
    assert p["w"].data[0, 0] < 1.0


def test_adamw_frozen_bit_identical_and_missing_group():
    p = _quad_params()
    before = p["w"].data.tobytes()
    opt = AdamW(p, {"frozen": (0.0, ["w"])}, total_steps=10, weight_decay=0.1)
    (p["w"] * p["w"]).sum().backward()
    opt.step()
    assert p["w"].data.tobytes() == before
    with pytest.raises(MissingGroupError):
        adamw_step({"x": T.Tensor([1.0])}, {}, OptimizerState({"g": 1.0}, {}, 1))


def test_cosine_schedule_endpoints():
    st_ = OptimizerState({"g": 1.0}, {}, total_steps=100, warmup_steps=10, min_lr_ratio=0.1)
    assert st_.lr_factor(5) == pytest.approx(0.5)
    assert st_.lr_factor(10) == pytest.approx(1.0)
    assert st_.lr_factor(100) == pytest.approx(0.1)
    mids = [st_.lr_factor(s) for s in range(10, 101)]
    assert all(a >= b for a, b in zip(mids, mids[1:]))


def test_checkpoint_roundtrip_and_errors(tmp_path):
    arrays = {"a": Rng(0).normal((2, 3)), "scalar": np.array(2.5), "ünï": np.zeros((0, 4))}
    save_checkpoint(tmp_path / "c.pfck", arrays)
    raw = (tmp_path / "c.pfck").read_bytes()
    assert raw[:4] == b"PFCK"
    back = load_checkpoint(tmp_path / "c.pfck")
    for k, v in arrays.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()
    (tmp_path / "bad.pfck").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.pfck")
    (tmp_path / "short.pfck").write_bytes(raw[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.pfck")


def test_backward_is_deterministic():
    rng = Rng(5)
    a = rng.normal((6, 6))

    def run():
        x = T.Tensor(a, requires_grad=True)
        y = T.softmax(x @ x.transpose(), axis=-1)
        (T.layernorm(y, T.Tensor(np.ones(6)), T.Tensor(np.zeros(6))) ** 2).sum().backward()
        return x.grad.tobytes()

    assert run() == run()
